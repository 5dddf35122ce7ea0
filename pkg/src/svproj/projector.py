"""End-to-end semantic visual projection plus baseline compressive projectors.

`svp_forward` runs: candidate filtering -> (optional shuffle) -> mask
resizing -> superpixel positional encoding -> patch alignment -> pooling ->
aggregation -> MLP projection, and reports token-count statistics against a
fixed reference budget.  The baselines (pixel shuffle, adaptive average
pooling, global learnable queries) emit constant token counts by
construction and share the same TokenSequence container.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import NumericalError, ValidationError
from .layers import (AttentionConfig, init_block_params, init_mlp_params,
                     mlp_forward, sinusoidal_pe_2d, transformer_block,
                     xavier_uniform)
from .aggregator import (PatchAlignedSuperpixels, SsaConfig, align_to_patches,
                         init_ssa_params, pool_superpixels, ssa_forward)
from .sspe import SspeConfig, encode_sspe, init_sspe_params
from .superpixels import CandidateMask, SuperpixelSet, filter_candidates, \
    resize_masks, shuffle_superpixels

__all__ = [
    "PatchGrid", "PipelineConfig", "SvpParams", "TokenStats", "TokenSequence",
    "init_svp_params", "svp_forward", "pixel_shuffle_tokens", "avg_pool_tokens",
    "global_query_tokens", "init_pixel_shuffle_params", "init_avg_pool_params",
    "init_global_query_params", "fuse_svp_outputs", "token_purity",
]

REFERENCE_TOKENS = 576


@dataclass
class PatchGrid:
    """A patch-embedding field: H*W rows of width `dim`."""

    height: int
    width: int
    dim: int
    embeddings: np.ndarray  # (H*W, dim)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        if self.height * self.width < 1:
            raise ValidationError("PatchGrid: empty grid")
        if self.embeddings.shape != (self.height * self.width, self.dim):
            raise ValidationError("PatchGrid: embeddings shape mismatch")
        if not np.all(np.isfinite(self.embeddings)):
            raise NumericalError("PatchGrid: non-finite embeddings")


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the mask-to-token pipeline.

    `mask_pixel_budget` is the total pixel target for mask resizing before
    positional encoding.  When `mask_budget_per_superpixel` is set the target
    becomes M * that value instead, which keeps the resized mask resolution
    constant across scenes of one grid size (the desk-scale training uses
    this so train and eval see the same resolution).
    """

    theta_overlap: float = 0.5
    mask_pixel_budget: int = 40 * 126 * 126
    mask_budget_per_superpixel: int | None = None
    shuffle_seed: int | None = None
    reference_tokens: int = REFERENCE_TOKENS

    def budget_for(self, num_superpixels: int) -> int:
        if self.mask_budget_per_superpixel is not None:
            return self.mask_budget_per_superpixel * num_superpixels
        return self.mask_pixel_budget


@dataclass
class TokenStats:
    token_count: int
    reference_count: int
    compression: float
    areas: np.ndarray

    @classmethod
    def from_counts(cls, token_count: int, areas, reference: int = REFERENCE_TOKENS):
        return cls(token_count=token_count, reference_count=reference,
                   compression=1.0 - token_count / reference,
                   areas=np.asarray(areas, dtype=np.int64))


@dataclass
class TokenSequence:
    """Projected visual tokens plus bookkeeping for tests and metrics."""

    tokens: Tensor                     # (M, d')
    order: np.ndarray                  # provenance permutation of rows
    mask_ids: np.ndarray               # source candidate id per row (-1 residual)
    supports: list[np.ndarray]         # patch index set per token
    stats: TokenStats

    @property
    def values(self) -> np.ndarray:
        return self.tokens.value


@dataclass
class SvpParams:
    """All learnable state of the projector plus the ablation switches."""

    store: ParamStore
    sspe_cfg: SspeConfig
    ssa_cfg: SsaConfig
    embed_dim: int
    token_dim: int
    hidden_dim: int
    use_sspe: bool = True
    use_ssa: bool = True

    @property
    def proj_dims(self):
        return [self.embed_dim, self.hidden_dim, self.token_dim]


def init_svp_params(seed: int, embed_dim: int, token_dim: int,
                    sspe_cfg: SspeConfig | None = None,
                    ssa_cfg: SsaConfig | None = None,
                    use_sspe: bool = True, use_ssa: bool = True,
                    store: ParamStore | None = None,
                    dtype=np.float64) -> SvpParams:
    rng = np.random.default_rng(seed)
    if sspe_cfg is None:
        sspe_cfg = SspeConfig(out_dim=embed_dim)
    if ssa_cfg is None:
        ssa_cfg = SsaConfig(model_dim=embed_dim)
    if sspe_cfg.out_dim != embed_dim or ssa_cfg.model_dim != embed_dim:
        raise ValidationError("init_svp_params: inconsistent widths")
    if store is None:
        store = ParamStore()
    hidden = 4 * embed_dim
    init_sspe_params(store, "sspe", sspe_cfg, rng, dtype)
    init_ssa_params(store, "ssa", ssa_cfg, rng, dtype)
    init_mlp_params(store, "proj", [embed_dim, hidden, token_dim], rng, dtype)
    return SvpParams(store=store, sspe_cfg=sspe_cfg, ssa_cfg=ssa_cfg,
                     embed_dim=embed_dim, token_dim=token_dim, hidden_dim=hidden,
                     use_sspe=use_sspe, use_ssa=use_ssa)


def _full_grid_superpixel(dims) -> SuperpixelSet:
    return SuperpixelSet(label_grid=np.zeros(dims, dtype=np.int64),
                         order=np.zeros(1, dtype=np.int64),
                         mask_ids=np.array([-1]), levels=["whole"], scores=[0.0])


def svp_forward(grid: PatchGrid, cands: list[CandidateMask], params: SvpParams,
                cfg: PipelineConfig, sspe_override: Tensor | None = None,
                precomputed_sp: SuperpixelSet | None = None) -> TokenSequence:
    """Project a patch grid plus candidate masks into visual tokens.

    With `use_sspe` off the positional embedding is zeroed everywhere it
    appears (the projection addend and all aggregator PEs); with `use_ssa`
    off the pooled embeddings pass straight to the projection MLP.  An empty
    candidate list yields a single full-grid token rather than an error.
    `sspe_override` substitutes an externally computed positional embedding
    (e.g. the bbox-MLP variant); `precomputed_sp` skips filtering.
    """
    if precomputed_sp is not None:
        sp = precomputed_sp
    else:
        if cands:
            dims = cands[0].mask.shape
            sp = filter_candidates(cands, dims, cfg.theta_overlap)
        else:
            sp = _full_grid_superpixel((grid.height, grid.width))
    if cfg.shuffle_seed is not None:
        sp = shuffle_superpixels(sp, cfg.shuffle_seed)

    if params.use_sspe:
        if sspe_override is not None:
            sspe = sspe_override
        else:
            sp_resized = resize_masks(sp, cfg.budget_for(sp.num_superpixels))
            sspe = encode_sspe(sp_resized, params.store, "sspe", params.sspe_cfg)
    else:
        sspe = ad.zeros((sp.num_superpixels, params.embed_dim),
                        dtype=grid.embeddings.dtype)

    aligned = align_to_patches(sp, grid.height, grid.width)
    if aligned.num_superpixels != sp.num_superpixels:
        sspe = ad.gather_rows(sspe, aligned.kept) if isinstance(sspe, Tensor) \
            else sspe[aligned.kept]

    pooled = pool_superpixels(aligned, grid.embeddings)
    if params.use_ssa:
        refined = ssa_forward(pooled, grid.embeddings, sspe, aligned,
                              params.store, "ssa", params.ssa_cfg)
    else:
        refined = pooled
    tokens = mlp_forward(ad.add(refined, sspe), params.store, "proj",
                         params.proj_dims)

    stats = TokenStats.from_counts(aligned.num_superpixels, aligned.areas(),
                                   cfg.reference_tokens)
    return TokenSequence(tokens=tokens, order=sp.order[aligned.kept],
                         mask_ids=sp.mask_ids[aligned.kept],
                         supports=aligned.supports(), stats=stats)


# ---------------------------------------------------------------------------
# baseline projectors
# ---------------------------------------------------------------------------

def init_pixel_shuffle_params(store: ParamStore, prefix: str, embed_dim: int,
                              r: int, token_dim: int, rng, dtype=np.float64):
    d_in = embed_dim * r * r
    init_mlp_params(store, prefix, [d_in, 4 * embed_dim, token_dim], rng, dtype)


def _window_indices(height: int, width: int, r_h: int, r_w: int) -> np.ndarray:
    out_h, out_w = height // r_h, width // r_w
    idx = np.arange(height * width).reshape(height, width)
    windows = idx.reshape(out_h, r_h, out_w, r_w).transpose(0, 2, 1, 3)
    return windows.reshape(out_h * out_w, r_h * r_w)


def pixel_shuffle_tokens(grid: PatchGrid, r: int, store: ParamStore,
                         prefix: str, token_dim: int,
                         reference: int = REFERENCE_TOKENS) -> TokenSequence:
    """Channel-stack r x r patch windows, then project with an MLP."""
    if r < 1 or grid.height % r or grid.width % r:
        raise ValidationError(f"pixel_shuffle_tokens: r={r} does not divide grid dims")
    win = _window_indices(grid.height, grid.width, r, r)
    stacked = grid.embeddings[win].reshape(win.shape[0], r * r * grid.dim)
    dims = [grid.dim * r * r, 4 * grid.dim, token_dim]
    tokens = mlp_forward(stacked, store, prefix, dims)
    n = win.shape[0]
    stats = TokenStats.from_counts(n, np.full(n, r * r), reference)
    return TokenSequence(tokens=tokens, order=np.arange(n),
                         mask_ids=np.full(n, -1), supports=list(win), stats=stats)


def init_avg_pool_params(store: ParamStore, prefix: str, embed_dim: int,
                         token_dim: int, rng, dtype=np.float64):
    init_mlp_params(store, prefix, [embed_dim, 4 * embed_dim, token_dim], rng, dtype)


def _adaptive_bounds(size: int, out: int) -> list[tuple[int, int]]:
    return [(int(np.floor(i * size / out)), int(np.ceil((i + 1) * size / out)))
            for i in range(out)]


def avg_pool_tokens(grid: PatchGrid, out_h: int, out_w: int, store: ParamStore,
                    prefix: str, token_dim: int,
                    reference: int = REFERENCE_TOKENS) -> TokenSequence:
    """Adaptive window means followed by the projection MLP."""
    if out_h < 1 or out_w < 1:
        raise ValidationError("avg_pool_tokens: zero output dims")
    if out_h > grid.height or out_w > grid.width:
        raise ValidationError("avg_pool_tokens: output exceeds grid dims")
    idx = np.arange(grid.height * grid.width).reshape(grid.height, grid.width)
    supports = []
    pooled = np.empty((out_h * out_w, grid.dim), dtype=grid.embeddings.dtype)
    t = 0
    for r0, r1 in _adaptive_bounds(grid.height, out_h):
        for c0, c1 in _adaptive_bounds(grid.width, out_w):
            patches = idx[r0:r1, c0:c1].reshape(-1)
            supports.append(patches)
            pooled[t] = grid.embeddings[patches].mean(axis=0)
            t += 1
    tokens = mlp_forward(pooled, store, prefix, [grid.dim, 4 * grid.dim, token_dim])
    areas = np.array([s.size for s in supports])
    stats = TokenStats.from_counts(t, areas, reference)
    return TokenSequence(tokens=tokens, order=np.arange(t),
                         mask_ids=np.full(t, -1), supports=supports, stats=stats)


def init_global_query_params(store: ParamStore, prefix: str, embed_dim: int,
                             num_queries: int, token_dim: int, rng,
                             num_heads: int = 4, num_blocks: int = 3,
                             dtype=np.float64):
    store.add(f"{prefix}.queries",
              xavier_uniform(rng, num_queries, embed_dim,
                             shape=(num_queries, embed_dim), dtype=dtype))
    cfg = AttentionConfig(embed_dim, num_heads)
    for b in range(num_blocks):
        init_block_params(store, f"{prefix}.block{b}", cfg, rng, dtype)
    init_mlp_params(store, f"{prefix}.mlp", [embed_dim, 4 * embed_dim, token_dim],
                    rng, dtype)


def global_query_tokens(grid: PatchGrid, num_queries: int, store: ParamStore,
                        prefix: str, token_dim: int, num_heads: int = 4,
                        num_blocks: int = 3,
                        reference: int = REFERENCE_TOKENS) -> TokenSequence:
    """A fixed set of learnable queries cross-attends to the whole grid."""
    if num_queries < 1:
        raise ValidationError("global_query_tokens: need at least one query")
    cfg = AttentionConfig(grid.dim, num_heads)
    kv_pe = sinusoidal_pe_2d(grid.height, grid.width, grid.dim)
    x: Tensor = store[f"{prefix}.queries"]
    for b in range(num_blocks):
        x = transformer_block(x, None, grid.embeddings, kv_pe, cfg, store,
                              f"{prefix}.block{b}")
    tokens = mlp_forward(x, store, f"{prefix}.mlp",
                         [grid.dim, 4 * grid.dim, token_dim])
    n = num_queries
    all_patches = np.arange(grid.height * grid.width)
    stats = TokenStats.from_counts(n, np.full(n, all_patches.size), reference)
    return TokenSequence(tokens=tokens, order=np.arange(n),
                         mask_ids=np.full(n, -1),
                         supports=[all_patches] * n, stats=stats)


def fuse_svp_outputs(seqs: list[TokenSequence], store: ParamStore,
                     weight_names: list[str]) -> TokenSequence:
    """Elementwise weighted sum of token sequences over the same superpixels."""
    if not seqs or len(seqs) != len(weight_names):
        raise ValidationError("fuse_svp_outputs: sources and weights must pair up")
    first = seqs[0]
    for s in seqs[1:]:
        if s.values.shape != first.values.shape:
            raise ValidationError("fuse_svp_outputs: shape mismatch")
        if not np.array_equal(s.order, first.order):
            raise ValidationError("fuse_svp_outputs: order mismatch")
    total = ad.scale_by(seqs[0].tokens, store[weight_names[0]])
    for s, nm in zip(seqs[1:], weight_names[1:]):
        total = ad.add(total, ad.scale_by(s.tokens, store[nm]))
    return TokenSequence(tokens=total, order=first.order.copy(),
                         mask_ids=first.mask_ids.copy(),
                         supports=list(first.supports), stats=first.stats)


def token_purity(supports: list[np.ndarray], labels: np.ndarray,
                 require_partition: bool = True) -> np.ndarray:
    """Majority-label fraction of each token's patch support.

    `labels` assigns a ground-truth object id to every patch.  With
    `require_partition` the supports must cover every patch exactly once
    (downsampling windows and superpixels do; global queries do not).
    """
    labels = np.asarray(labels).reshape(-1)
    if require_partition:
        joined = np.concatenate([np.asarray(s) for s in supports]) if supports else \
            np.empty(0, dtype=int)
        if joined.size != labels.size or not np.array_equal(np.sort(joined),
                                                            np.arange(labels.size)):
            raise ValidationError("token_purity: supports do not partition the grid")
    out = np.empty(len(supports), dtype=np.float64)
    for t, s in enumerate(supports):
        s = np.asarray(s)
        if s.size == 0:
            raise ValidationError("token_purity: empty support")
        counts = np.bincount(labels[s])
        out[t] = counts.max() / s.size
    return out
