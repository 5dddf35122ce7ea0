"""Toy referring-selection training: the desk-scale stand-in for fine-tuning.

A bilinear selection head scores each visual token against a query vector;
training minimizes softmax cross-entropy of the correct token over a seeded
stream of scene/query pairs with plain SGD + momentum.  Superpixel order is
shuffled per draw so the model cannot lean on token order.  A two-stage
schedule (positional embeddings zeroed for the first fraction of steps) is
on by default.

Scenes are pre-generated into a pool with their filtering, alignment and
pooling cached; only the trainable parts of the forward pass re-run per
step, which keeps a full 2,000-step run in the tens of seconds.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import NumericalError, ValidationError
from .aggregator import PatchAlignedSuperpixels, SsaConfig, align_to_patches, \
    pool_superpixels, ssa_forward
from .layers import mlp_forward, sinusoidal_pe_2d, transformer_block, xavier_uniform
from .projector import PipelineConfig, SvpParams, TokenSequence, init_svp_params, \
    svp_forward
from .scenes import (QUERY_KINDS, NoValidTarget, ReferringQuery, Scene,
                     SceneSpec, gen_query, gen_scene, query_dim)
from .sspe import SspeConfig, encode_mask_tokens, masks_to_tokens
from .superpixels import SuperpixelSet, filter_candidates, resize_masks

__all__ = ["TrainConfig", "SelectionHead", "ToyModel", "train_toy",
           "eval_selection", "build_eval_set", "target_token_index",
           "ablation_suite"]


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run (fully seeded)."""

    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-2
    momentum: float = 0.9
    # cap on the global gradient norm; None disables.  Cross-entropy spikes
    # otherwise destabilize fixed-lr SGD late in training.
    clip_norm: float | None = 1.0
    # task scale
    grid_height: int = 10
    grid_width: int = 10
    min_objects: int = 4
    max_objects: int = 6
    num_categories: int = 3
    num_attributes: int = 3
    embed_dim: int = 32
    token_dim: int = 32
    sspe_dim: int = 16
    sspe_heads: int = 2
    sspe_queries: int = 4
    ssa_heads: int = 4
    dtype: str = "float64"
    mask_budget_per_superpixel: int = 36
    theta_overlap: float = 0.5
    noise_sigma: float = 0.1
    background_scale: float = 2.0
    jitter_scale: float = 0.05
    # ablation switches
    use_sspe: bool = True
    use_ssa: bool = True
    ssa_mode: str = "share_sspe"
    two_stage: bool = True
    stage_fraction: float = 0.4
    # start the PE output projection at zero so enabling it mid-run is a
    # continuous change rather than a distribution shock
    zero_init_sspe_out: bool = True
    shuffle: bool = True
    # data plumbing
    pool_scenes: int = 160
    eval_scenes: int = 48
    eval_queries_per_kind: int = 120
    eval_seed: int | None = None

    def __post_init__(self):
        if self.steps <= 0:
            raise ValidationError("steps must be positive")
        if self.lr <= 0 and self.lr != 0.0:
            raise ValidationError("lr must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def scene_spec(self, num_objects: int) -> SceneSpec:
        return SceneSpec(height=self.grid_height, width=self.grid_width,
                         num_objects=num_objects,
                         num_categories=self.num_categories,
                         num_attributes=self.num_attributes,
                         embed_dim=self.embed_dim,
                         background_scale=self.background_scale,
                         noise_sigma=self.noise_sigma,
                         jitter_scale=self.jitter_scale)

    def pipeline(self, shuffle_seed: int | None = None) -> PipelineConfig:
        return PipelineConfig(theta_overlap=self.theta_overlap,
                              mask_budget_per_superpixel=self.mask_budget_per_superpixel,
                              shuffle_seed=shuffle_seed)


@dataclass
class SelectionHead:
    """Bilinear scorer: logit_i = q^T W t_i / sqrt(token_dim).

    The scale keeps logits moderate as token magnitudes grow, like the
    attention temperature.
    """

    store: ParamStore
    name: str
    query_dim: int
    token_dim: int

    @classmethod
    def create(cls, store: ParamStore, query_dim: int, token_dim: int,
               seed: int, name: str = "head.w",
               dtype=np.float64) -> "SelectionHead":
        rng = np.random.default_rng([seed, 0x4EAD])
        store.add(name, xavier_uniform(rng, query_dim, token_dim, dtype=dtype))
        return cls(store=store, name=name, query_dim=query_dim, token_dim=token_dim)

    def logits(self, tokens, query_vector: np.ndarray) -> Tensor:
        w = self.store[self.name]
        q = np.asarray(query_vector, dtype=w.value.dtype)[None, :] / \
            np.sqrt(self.token_dim)
        out = ad.matmul(tokens, ad.reshape(ad.matmul(q, w), (self.token_dim, 1)))
        return ad.reshape(out, (-1,))


@dataclass
class ToyModel:
    """A trained (or freshly initialized) projector plus selection head."""

    params: SvpParams
    head: SelectionHead
    cfg: TrainConfig

    def token_sequence(self, scene: Scene, shuffle_seed: int | None = None) -> TokenSequence:
        return svp_forward(scene.grid, scene.candidates, self.params,
                           self.cfg.pipeline(shuffle_seed))

    def score(self, seq: TokenSequence, query: ReferringQuery) -> np.ndarray:
        with ad.no_grad():
            return self.head.logits(seq.tokens, query.vector).value


def target_token_index(seq: TokenSequence, scene: Scene, query: ReferringQuery) -> int:
    cand_id = scene.whole_ids[query.target_object]
    rows = np.flatnonzero(seq.mask_ids == cand_id)
    if rows.size != 1:
        raise ValidationError("target superpixel is missing or duplicated")
    return int(rows[0])


def _init_model(cfg: TrainConfig) -> ToyModel:
    sspe_cfg = SspeConfig(out_dim=cfg.embed_dim, num_queries=cfg.sspe_queries,
                          model_dim=cfg.sspe_dim, num_heads=cfg.sspe_heads)
    ssa_cfg = SsaConfig(model_dim=cfg.embed_dim, num_heads=cfg.ssa_heads,
                        mode=cfg.ssa_mode)
    params = init_svp_params(cfg.seed, cfg.embed_dim, cfg.token_dim,
                             sspe_cfg=sspe_cfg, ssa_cfg=ssa_cfg,
                             use_sspe=cfg.use_sspe, use_ssa=cfg.use_ssa,
                             dtype=cfg.np_dtype)
    if cfg.zero_init_sspe_out:
        params.store["sspe.out"].value[...] = 0.0
    spec = cfg.scene_spec(cfg.min_objects)
    head = SelectionHead.create(params.store, query_dim(spec), cfg.token_dim,
                                seed=cfg.seed, dtype=cfg.np_dtype)
    return ToyModel(params=params, head=head, cfg=cfg)


# ---------------------------------------------------------------------------
# cached scenes for the training loop
# ---------------------------------------------------------------------------

@dataclass
class _PooledScene:
    scene: Scene
    sp: SuperpixelSet
    labels_flat: np.ndarray        # patch labels at native order
    feats: np.ndarray              # (HW, d) patch embeddings in the train dtype
    pooled: np.ndarray             # (M, d) mean patch embedding per superpixel
    mask_tokens: np.ndarray        # (M, L) resized binary masks as int tokens
    mask_dims: tuple[int, int]
    cand_rows: dict[int, int]      # candidate id -> superpixel row (native order)

    @property
    def num_superpixels(self) -> int:
        return self.sp.num_superpixels


def _prepare_scene(scene: Scene, cfg: TrainConfig) -> _PooledScene:
    sp = filter_candidates(scene.candidates, (scene.spec.height, scene.spec.width),
                           cfg.theta_overlap)
    aligned = align_to_patches(sp, scene.grid.height, scene.grid.width)
    if aligned.num_superpixels != sp.num_superpixels:
        raise ValidationError("training scenes must not drop superpixels")
    with ad.no_grad():
        pooled = pool_superpixels(aligned, scene.grid.embeddings).value
    resized = resize_masks(sp, cfg.mask_budget_per_superpixel * sp.num_superpixels)
    tokens = masks_to_tokens(resized)
    cand_rows = {int(cid): i for i, cid in enumerate(sp.mask_ids) if cid >= 0}
    dt = cfg.np_dtype
    return _PooledScene(scene=scene, sp=sp, labels_flat=aligned.labels.reshape(-1),
                        feats=scene.grid.embeddings.astype(dt),
                        pooled=pooled.astype(dt), mask_tokens=tokens,
                        mask_dims=resized.dims, cand_rows=cand_rows)


def _forward_cached(ps: _PooledScene, perm: np.ndarray, model: ToyModel,
                    use_sspe_now: bool) -> Tensor:
    """Tokens for a cached scene under a superpixel permutation."""
    cfg = model.cfg
    params = model.params
    m = ps.num_superpixels
    inverse = np.empty(m, dtype=np.int64)
    inverse[perm] = np.arange(m)
    labels = inverse[ps.labels_flat]
    pooled = Tensor(ps.pooled[perm])
    if use_sspe_now:
        sspe = encode_mask_tokens(ps.mask_tokens[perm], ps.mask_dims[0],
                                  ps.mask_dims[1], params.store, "sspe",
                                  params.sspe_cfg)
    else:
        sspe = ad.zeros((m, cfg.embed_dim), dtype=cfg.np_dtype)
    if params.use_ssa:
        aligned = PatchAlignedSuperpixels(
            labels=labels.reshape(ps.scene.grid.height, ps.scene.grid.width),
            kept=np.arange(m), dropped=np.empty(0, dtype=np.int64),
            height=ps.scene.grid.height, width=ps.scene.grid.width)
        refined = ssa_forward(pooled, ps.feats, sspe, aligned,
                              params.store, "ssa", params.ssa_cfg)
    else:
        refined = pooled
    return mlp_forward(ad.add(refined, sspe), params.store, "proj", params.proj_dims)


_NEG = -1e9


def _batched_forward(draws: list[tuple[_PooledScene, np.ndarray]], model: ToyModel,
                     use_sspe_now: bool) -> tuple[Tensor, np.ndarray]:
    """Tokens for several cached scenes through one set of tape nodes.

    Positional encoding runs on the concatenated mask rows (independent per
    row).  For aggregation, samples are padded to a common superpixel count
    and stacked along a leading batch axis, so each sample structurally
    attends to its own patches only; -1e9 biases hide padded rows from
    self-attention, and padded logits underflow to exactly zero weight, so
    the result matches the per-scene forward bit-for-bit up to blas tiling.
    Returns tokens stacked as (sum M_i, d') plus per-draw row offsets.
    """
    cfg = model.cfg
    params = model.params
    n_draws = len(draws)
    counts = np.array([ps.num_superpixels for ps, _ in draws])
    offsets = np.concatenate(([0], np.cumsum(counts)))
    total = int(offsets[-1])
    m_max = int(counts.max())
    grid_h, grid_w = draws[0][0].scene.grid.height, draws[0][0].scene.grid.width
    n_patches = grid_h * grid_w
    d = cfg.embed_dim

    dt = cfg.np_dtype

    # flat row index of each (draw, padded slot); pad slots alias row 0 and
    # are zeroed through the mask below
    pad_index = np.zeros((n_draws, m_max), dtype=np.int64)
    pad_mask = np.zeros((n_draws, m_max, 1), dtype=dt)
    real_rows = np.empty(total, dtype=np.int64)  # padded position of each real row
    for i, (ps, _) in enumerate(draws):
        m = ps.num_superpixels
        pad_index[i, :m] = np.arange(offsets[i], offsets[i + 1])
        pad_mask[i, :m] = 1.0
        real_rows[offsets[i]:offsets[i + 1]] = i * m_max + np.arange(m)

    if use_sspe_now:
        mask_batch = np.concatenate([ps.mask_tokens[perm] for ps, perm in draws])
        hm, wm = draws[0][0].mask_dims
        sspe_all = encode_mask_tokens(mask_batch, hm, wm, params.store, "sspe",
                                      params.sspe_cfg)
        sspe_pad = ad.mul(ad.gather_rows(sspe_all, pad_index), pad_mask)
    else:
        sspe_all = None
        sspe_pad = ad.zeros((n_draws, m_max, d), dtype=dt)

    pooled_pad = np.zeros((n_draws, m_max, d), dtype=dt)
    labels_pad = np.empty((n_draws, n_patches), dtype=np.int64)
    for i, (ps, perm) in enumerate(draws):
        pooled_pad[i, :counts[i]] = ps.pooled[perm]
        inverse = np.empty(perm.size, dtype=np.int64)
        inverse[perm] = np.arange(perm.size)
        labels_pad[i] = inverse[ps.labels_flat]
    pooled_pad = Tensor(pooled_pad)

    if params.use_ssa:
        mode = params.ssa_cfg.mode
        kv = np.stack([ps.feats for ps, _ in draws])
        sin_pe = sinusoidal_pe_2d(grid_h, grid_w, d).astype(dt)
        if mode == "share_sspe" and sspe_all is not None:
            owner = labels_pad + offsets[:-1, None]
            kv_pe = ad.add(ad.gather_rows(sspe_all, owner), sin_pe)
        elif mode == "share_sspe":
            kv_pe = np.broadcast_to(sin_pe, (n_draws,) + sin_pe.shape)
        else:
            kv_pe = sin_pe
        cross_bias = None
        if mode == "attn_bias":
            slots = np.arange(m_max)
            own = slots[None, :, None] == labels_pad[:, None, :]
            cross_bias = np.where(own, dt(0.0), dt(_NEG))[:, None]  # (B, 1, M, HW)
        real_key = (np.arange(m_max)[None, :] < counts[:, None])
        self_bias = np.where(real_key[:, None, None, :], dt(0.0), dt(_NEG))
        x = pooled_pad
        att = params.ssa_cfg.attention
        for b in range(params.ssa_cfg.num_blocks):
            x = transformer_block(x, sspe_pad, kv, kv_pe, att, params.store,
                                  f"ssa.block{b}", bias=cross_bias,
                                  self_bias=self_bias)
        refined = x
    else:
        refined = pooled_pad
    tokens_pad = mlp_forward(ad.add(refined, sspe_pad), params.store, "proj",
                             params.proj_dims)
    tokens = ad.gather_rows(ad.reshape(tokens_pad, (n_draws * m_max, cfg.token_dim)),
                            real_rows)
    return tokens, offsets


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _draw_query(ps: _PooledScene, rng: np.random.Generator) -> ReferringQuery | None:
    kind = QUERY_KINDS[int(rng.integers(0, len(QUERY_KINDS)))]
    qseed = int(rng.integers(0, 2 ** 62))
    try:
        return gen_query(ps.scene, kind, qseed)
    except NoValidTarget:
        return None


def train_toy(cfg: TrainConfig):
    """Train the projector + head on the seeded scene/query stream.

    Returns (model, curve); `curve` is the per-step mean batch loss.  Raises
    NumericalError if the loss goes non-finite.
    """
    model = _init_model(cfg)
    store = model.params.store

    rng_scenes = np.random.default_rng([cfg.seed, 1])
    pool = [_prepare_scene(gen_scene(int(s), cfg.scene_spec(
                int(rng_scenes.integers(cfg.min_objects, cfg.max_objects + 1)))), cfg)
            for s in rng_scenes.integers(0, 2 ** 62, size=cfg.pool_scenes)]

    rng_draw = np.random.default_rng([cfg.seed, 2])
    velocity: dict[str, np.ndarray] = {}
    curve: list[float] = []
    stage_cut = int(cfg.stage_fraction * cfg.steps) if cfg.two_stage else 0

    for step in range(cfg.steps):
        use_sspe_now = cfg.use_sspe and (step >= stage_cut)
        store.zero_grads()
        draws: list[tuple[_PooledScene, np.ndarray]] = []
        queries: list[ReferringQuery] = []
        targets: list[int] = []
        while len(draws) < cfg.batch_size:
            ps = pool[int(rng_draw.integers(0, len(pool)))]
            query = _draw_query(ps, rng_draw)
            if query is None:
                continue
            if cfg.shuffle:
                perm = rng_draw.permutation(ps.num_superpixels)
            else:
                perm = np.arange(ps.num_superpixels)
            inverse = np.empty(perm.size, dtype=np.int64)
            inverse[perm] = np.arange(perm.size)
            draws.append((ps, perm))
            queries.append(query)
            targets.append(int(
                inverse[ps.cand_rows[ps.scene.whole_ids[query.target_object]]]))
        tokens_all, offsets = _batched_forward(draws, model, use_sspe_now)
        losses = []
        for d, (query, target) in enumerate(zip(queries, targets)):
            rows = np.arange(offsets[d], offsets[d + 1])
            logits = model.head.logits(ad.gather_rows(tokens_all, rows),
                                       query.vector)
            losses.append(ad.softmax_cross_entropy(logits, target))
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        total = ad.scale(total, 1.0 / cfg.batch_size)
        loss_val = float(total.value)
        if not np.isfinite(loss_val):
            raise NumericalError(f"training diverged at step {step}: loss={loss_val}")
        curve.append(loss_val)
        if cfg.lr == 0.0:
            continue
        total.backward()
        scale = 1.0
        if cfg.clip_norm is not None:
            sq = 0.0
            for name in store.trainable_names():
                g = store.grad(name)
                sq += float(np.dot(g.reshape(-1), g.reshape(-1)))
            norm = np.sqrt(sq)
            if norm > cfg.clip_norm:
                scale = cfg.clip_norm / norm
        for name in store.trainable_names():
            g = store.grad(name) * scale
            v = velocity.get(name)
            if v is None:
                v = np.zeros_like(g)
            v = cfg.momentum * v + g
            velocity[name] = v
            store[name].value -= cfg.lr * v
    return model, curve


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def build_eval_set(cfg: TrainConfig, kinds=QUERY_KINDS):
    """Held-out (scene, query) pairs, balanced per kind, seeded disjointly."""
    eval_seed = cfg.eval_seed if cfg.eval_seed is not None else cfg.seed + 10_000
    rng = np.random.default_rng([eval_seed, 3])
    scenes = [gen_scene(int(s), cfg.scene_spec(
                  int(rng.integers(cfg.min_objects, cfg.max_objects + 1))))
              for s in rng.integers(0, 2 ** 62, size=cfg.eval_scenes)]
    dataset: list[tuple[Scene, ReferringQuery]] = []
    for kind in kinds:
        got = 0
        attempts = 0
        while got < cfg.eval_queries_per_kind and attempts < 40 * cfg.eval_queries_per_kind:
            attempts += 1
            scene = scenes[int(rng.integers(0, len(scenes)))]
            try:
                q = gen_query(scene, kind, int(rng.integers(0, 2 ** 62)))
            except NoValidTarget:
                continue
            dataset.append((scene, q))
            got += 1
    return dataset


def eval_selection(model: ToyModel, dataset, by_kind: bool = True):
    """Argmax-token accuracy, overall and per query kind."""
    if not dataset:
        raise ValidationError("eval_selection: empty dataset")
    hits: dict[str, list[float]] = {}
    seq_cache: dict[int, TokenSequence] = {}
    for scene, query in dataset:
        key = id(scene)
        seq = seq_cache.get(key)
        if seq is None:
            with ad.no_grad():
                seq = model.token_sequence(scene)
            seq_cache[key] = seq
        logits = model.score(seq, query)
        pred = int(np.argmax(logits))
        target = target_token_index(seq, scene, query)
        hits.setdefault(query.kind, []).append(1.0 if pred == target else 0.0)
    per_kind = {k: float(np.mean(v)) for k, v in hits.items()}
    overall = float(np.mean([h for v in hits.values() for h in v]))
    return (overall, per_kind) if by_kind else overall


# ---------------------------------------------------------------------------
# the ablation experiment used by the acceptance suite
# ---------------------------------------------------------------------------

def ablation_suite(seeds=(0, 1, 2), base_cfg: TrainConfig | None = None,
                   verbose: bool = False) -> dict:
    """Train full / no-PE / attention-bias / no-sharing variants per seed.

    Every variant of a seed shares the training stream and the held-out
    evaluation set.  Returns per-seed and mean accuracies for the attribute
    kind (full model), the positional kinds with and without the positional
    embedding, and the context kind across the three aggregator modes.
    """
    from .scenes import POSITIONAL_KINDS

    base = base_cfg if base_cfg is not None else TrainConfig()
    results: dict = {"seeds": list(seeds), "per_seed": [], "elapsed": 0.0}
    t0 = time.time()
    for seed in seeds:
        cfgs = {
            "full": replace(base, seed=seed, use_sspe=True, ssa_mode="share_sspe"),
            "no_sspe": replace(base, seed=seed, use_sspe=False),
            "attn_bias": replace(base, seed=seed, use_sspe=True, ssa_mode="attn_bias"),
            "no_share": replace(base, seed=seed, use_sspe=True, ssa_mode="no_share"),
        }
        row: dict = {"seed": seed}
        eval_set = build_eval_set(cfgs["full"])
        for name, cfg in cfgs.items():
            model, curve = train_toy(cfg)
            _, per_kind = eval_selection(model, eval_set)
            row[name] = per_kind
            row[f"{name}_final_loss"] = float(np.mean(curve[-max(1, len(curve) // 10):]))
            if verbose:
                print(f"[seed {seed}] {name}: " +
                      " ".join(f"{k}={v:.3f}" for k, v in sorted(per_kind.items())))
        results["per_seed"].append(row)

    def mean_of(variant: str, kinds) -> float:
        vals = []
        for row in results["per_seed"]:
            vals.append(np.mean([row[variant].get(k, 0.0) for k in kinds]))
        return float(np.mean(vals))

    results["attribute_full"] = mean_of("full", ["attribute"])
    results["positional_full"] = mean_of("full", POSITIONAL_KINDS)
    results["positional_no_sspe"] = mean_of("no_sspe", POSITIONAL_KINDS)
    results["context_share"] = mean_of("full", ["context"])
    results["context_attn_bias"] = mean_of("attn_bias", ["context"])
    results["context_no_share"] = mean_of("no_share", ["context"])
    results["elapsed"] = time.time() - t0
    return results
