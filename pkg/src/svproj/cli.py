"""Command-line interface.

Subcommands: filter-masks, tokenize, bench, toy-train, toy-eval, gradcheck.
All randomness is controlled by explicit seed flags; identical invocations
produce identical output files.  Exit codes: 0 ok, 1 validation failure,
2 numerical failure, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace

import numpy as np
from scipy import stats as scipy_stats

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import NumericalError, ValidationError
from .aggregator import SsaConfig, align_to_patches, init_ssa_params, \
    pool_superpixels, ssa_forward
from .layers import grad_check, init_mlp_params, mlp_forward, sinusoidal_pe_2d
from .projector import (PatchGrid, PipelineConfig, SvpParams, init_svp_params,
                        svp_forward, token_purity)
from .io import (format_stats_block, load_embeddings, load_params, read_kv_config,
                 save_params, save_tokens)
from .scenes import gen_corpus
from .sspe import SspeConfig, encode_sspe, init_sspe_params
from .superpixels import SuperpixelSet, filter_candidates, load_mask_file, \
    save_mask_file, superpixels_to_candidates
from .training import TrainConfig, ToyModel, SelectionHead, build_eval_set, \
    eval_selection, train_toy

GRADCHECK_THRESHOLD = 1e-4


def _cmd_filter_masks(args) -> int:
    cands, dims = load_mask_file(args.masks)
    sp = filter_candidates(cands, dims, args.theta)
    save_mask_file(args.out, superpixels_to_candidates(sp), dims)
    print(f"superpixels={sp.num_superpixels}")
    return 0


def _params_from_file(path):
    store, meta = load_params(path)
    need = ("embed_dim", "token_dim", "sspe_queries", "sspe_dim", "sspe_heads",
            "ssa_heads", "ssa_mode")
    for key in need:
        if key not in meta:
            raise ValidationError(f"params file missing meta key '{key}'")
    embed_dim = int(meta["embed_dim"])
    token_dim = int(meta["token_dim"])
    sspe_cfg = SspeConfig(out_dim=embed_dim, num_queries=int(meta["sspe_queries"]),
                          model_dim=int(meta["sspe_dim"]),
                          num_heads=int(meta["sspe_heads"]))
    ssa_cfg = SsaConfig(model_dim=embed_dim, num_heads=int(meta["ssa_heads"]),
                        mode=meta["ssa_mode"])
    params = SvpParams(store=store, sspe_cfg=sspe_cfg, ssa_cfg=ssa_cfg,
                       embed_dim=embed_dim, token_dim=token_dim,
                       hidden_dim=4 * embed_dim)
    return params, meta


def _cmd_tokenize(args) -> int:
    grid = load_embeddings(args.embeddings)
    cands, _dims = load_mask_file(args.masks)
    params, _meta = _params_from_file(args.params)
    params.use_sspe = not args.no_sspe
    params.use_ssa = not args.no_ssa
    if grid.dim != params.embed_dim:
        raise ValidationError(
            f"embedding width {grid.dim} does not match params ({params.embed_dim})")
    cfg = PipelineConfig(theta_overlap=args.theta,
                         mask_pixel_budget=args.mask_budget,
                         shuffle_seed=args.shuffle_seed)
    with ad.no_grad():
        seq = svp_forward(grid, cands, params, cfg)
    if not np.all(np.isfinite(seq.values)):
        raise NumericalError("tokenize produced non-finite tokens")
    save_tokens(args.out, seq)
    sys.stdout.write(format_stats_block(seq.stats))
    return 0


_BENCH_PROJECTORS = ("svp", "pixel-shuffle", "avg-pool", "global-query")


def _bench_counts(scene, projector: str, theta: float):
    h, w = scene.grid.height, scene.grid.width
    if projector == "svp":
        sp = filter_candidates(scene.candidates, (h, w), theta)
        aligned = align_to_patches(sp, h, w)
        supports = aligned.supports()
        purity = token_purity(supports, scene.labels.reshape(-1))
        return len(supports), purity
    if projector == "pixel-shuffle":
        from .projector import _window_indices
        win = _window_indices(h, w, 4, 4)
        purity = token_purity(list(win), scene.labels.reshape(-1))
        return win.shape[0], purity
    if projector == "avg-pool":
        from .projector import _adaptive_bounds
        idx = np.arange(h * w).reshape(h, w)
        supports = [idx[r0:r1, c0:c1].reshape(-1)
                    for r0, r1 in _adaptive_bounds(h, 6)
                    for c0, c1 in _adaptive_bounds(w, 6)]
        purity = token_purity(supports, scene.labels.reshape(-1))
        return len(supports), purity
    # global-query: a fixed query budget attending everywhere
    supports = [np.arange(h * w)] * 40
    purity = token_purity(supports, scene.labels.reshape(-1), require_partition=False)
    return 40, purity


def _cmd_bench(args) -> int:
    scenes = gen_corpus(args.corpus_seed, args.scenes)
    lines = [f"corpus_seed={args.corpus_seed}", f"scenes={args.scenes}",
             f"projector={args.projector}"]
    tokens, objects, purities = [], [], []
    for i, scene in enumerate(scenes):
        count, purity = _bench_counts(scene, args.projector, args.theta)
        comp = 1.0 - count / 576
        tokens.append(count)
        objects.append(scene.spec.num_objects)
        purities.append(float(purity.mean()))
        lines.append(f"scene={i} objects={scene.spec.num_objects} tokens={count} "
                     f"compression={comp!r} purity={purities[-1]!r}")
    rho = float(scipy_stats.spearmanr(objects, tokens).statistic) \
        if len(set(tokens)) > 1 else 0.0
    lines.append(f"mean_tokens={np.mean(tokens)!r}")
    lines.append(f"mean_compression={1.0 - np.mean(tokens) / 576!r}")
    lines.append(f"mean_purity={np.mean(purities)!r}")
    lines.append(f"spearman_tokens_vs_objects={rho!r}")
    text = "\n".join(lines) + "\n"
    with open(args.report, "w", encoding="ascii") as f:
        f.write(text)
    sys.stdout.write(text)
    return 0


_CFG_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_BOOL_KEYS = {"use_sspe", "use_ssa", "two_stage", "shuffle"}


def _train_config_from_file(path) -> TrainConfig:
    raw = read_kv_config(path)
    kwargs = {}
    for key, val in raw.items():
        if key not in _CFG_FIELD_TYPES:
            raise ValidationError(f"unknown config key '{key}'")
        if key in _BOOL_KEYS:
            if val not in ("true", "false", "0", "1"):
                raise ValidationError(f"config key '{key}' must be true/false")
            kwargs[key] = val in ("true", "1")
        elif key in ("lr", "momentum", "theta_overlap", "noise_sigma",
                     "background_scale", "jitter_scale", "stage_fraction"):
            kwargs[key] = float(val)
        elif key == "ssa_mode":
            kwargs[key] = val
        else:
            kwargs[key] = int(val)
    return TrainConfig(**kwargs)


def _meta_for(cfg: TrainConfig, model: ToyModel) -> dict:
    return {
        "embed_dim": cfg.embed_dim, "token_dim": cfg.token_dim,
        "sspe_queries": cfg.sspe_queries, "sspe_dim": cfg.sspe_dim,
        "sspe_heads": cfg.sspe_heads, "ssa_heads": cfg.ssa_heads,
        "ssa_mode": cfg.ssa_mode, "query_dim": model.head.query_dim,
        "use_sspe": int(cfg.use_sspe), "use_ssa": int(cfg.use_ssa),
        "grid_height": cfg.grid_height, "grid_width": cfg.grid_width,
        "min_objects": cfg.min_objects, "max_objects": cfg.max_objects,
        "num_categories": cfg.num_categories, "num_attributes": cfg.num_attributes,
        "mask_pixel_budget": cfg.mask_pixel_budget, "seed": cfg.seed,
    }


def _cmd_toy_train(args) -> int:
    cfg = _train_config_from_file(args.config)
    model, curve = train_toy(cfg)
    meta = {k: str(v) for k, v in _meta_for(cfg, model).items()}
    save_params(args.out, model.params.store, meta)
    print(f"steps={cfg.steps} initial_loss={curve[0]!r} "
          f"final_loss={float(np.mean(curve[-max(1, len(curve) // 10):]))!r}")
    return 0


def _model_from_file(path) -> tuple[ToyModel, dict]:
    params, meta = _params_from_file(path)
    cfg_kwargs = {}
    for key in ("grid_height", "grid_width", "min_objects", "max_objects",
                "num_categories", "num_attributes", "mask_pixel_budget", "seed"):
        if key in meta:
            cfg_kwargs[key] = int(meta[key])
    cfg = TrainConfig(embed_dim=params.embed_dim, token_dim=params.token_dim,
                      sspe_dim=params.sspe_cfg.model_dim,
                      sspe_heads=params.sspe_cfg.num_heads,
                      sspe_queries=params.sspe_cfg.num_queries,
                      ssa_heads=params.ssa_cfg.num_heads,
                      ssa_mode=params.ssa_cfg.mode,
                      use_sspe=bool(int(meta.get("use_sspe", "1"))),
                      use_ssa=bool(int(meta.get("use_ssa", "1"))),
                      **cfg_kwargs)
    params.use_sspe = cfg.use_sspe
    params.use_ssa = cfg.use_ssa
    head = SelectionHead(store=params.store, name="head.w",
                         query_dim=int(meta["query_dim"]),
                         token_dim=params.token_dim)
    return ToyModel(params=params, head=head, cfg=cfg), meta


def _cmd_toy_eval(args) -> int:
    model, _meta = _model_from_file(args.params)
    for seed in args.seeds:
        cfg = replace(model.cfg, eval_seed=seed)
        dataset = build_eval_set(cfg)
        overall, per_kind = eval_selection(model, dataset)
        parts = " ".join(f"{k}={v!r}" for k, v in sorted(per_kind.items()))
        print(f"seed={seed} overall={overall!r} {parts}")
    return 0


def _gradcheck_target(target: str, eps: float) -> float:
    rng = np.random.default_rng(17)
    store = ParamStore()
    if target == "mlp":
        init_mlp_params(store, "m", [4, 8, 3], rng)
        x = rng.standard_normal((3, 4))
        return grad_check(lambda: ad.sum_all(mlp_forward(x, store, "m", [4, 8, 3])),
                          store, eps)
    if target == "sspe":
        cfg = SspeConfig(out_dim=6, num_queries=2, model_dim=8, num_heads=2)
        init_sspe_params(store, "s", cfg, rng)
        sp = _toy_partition()
        return grad_check(lambda: ad.sum_all(encode_sspe(sp, store, "s", cfg)),
                          store, eps)
    if target == "ssa":
        cfg = SsaConfig(model_dim=8, num_heads=2)
        init_ssa_params(store, "a", cfg, rng)
        sp = _toy_partition()
        aligned = align_to_patches(sp, 3, 3)
        feats = rng.standard_normal((9, 8))
        sspe_const = rng.standard_normal((aligned.num_superpixels, 8))
        store.add("pe", sspe_const)

        def loss():
            pooled = pool_superpixels(aligned, feats)
            return ad.sum_all(ssa_forward(pooled, feats, store["pe"], aligned,
                                          store, "a", cfg))
        return grad_check(loss, store, eps)
    if target == "svp":
        from .scenes import SceneSpec, gen_scene
        spec = SceneSpec(height=6, width=6, num_objects=2, num_categories=2,
                         num_attributes=2, embed_dim=8, cell=3)
        scene = gen_scene(5, spec)
        sspe_cfg = SspeConfig(out_dim=8, num_queries=2, model_dim=8, num_heads=2)
        ssa_cfg = SsaConfig(model_dim=8, num_heads=2)
        params = init_svp_params(3, 8, 6, sspe_cfg=sspe_cfg, ssa_cfg=ssa_cfg)
        pipe = PipelineConfig(mask_pixel_budget=6 * 6 * 4)

        def loss():
            return ad.sum_all(svp_forward(scene.grid, scene.candidates,
                                          params, pipe).tokens)
        return grad_check(loss, params.store, eps)
    raise ValidationError(f"unknown gradcheck target '{target}'")


def _toy_partition() -> SuperpixelSet:
    labels = np.array([[0, 0, 1], [0, 2, 1], [2, 2, 1]])
    return SuperpixelSet(label_grid=labels, order=np.arange(3),
                         mask_ids=np.array([0, 1, 2]))


def _cmd_gradcheck(args) -> int:
    err = _gradcheck_target(args.target, args.eps)
    print(f"target={args.target} max_relative_error={err!r}")
    return 0 if err <= GRADCHECK_THRESHOLD else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svproj",
                                description="semantic-superpixel visual projector tools")
    sub = p.add_subparsers(dest="command", required=True)

    fm = sub.add_parser("filter-masks", help="filter candidate masks into a partition")
    fm.add_argument("--masks", required=True)
    fm.add_argument("--theta", type=float, default=0.5)
    fm.add_argument("--out", required=True)
    fm.set_defaults(fn=_cmd_filter_masks)

    tk = sub.add_parser("tokenize", help="project embeddings + masks into tokens")
    tk.add_argument("--embeddings", required=True)
    tk.add_argument("--masks", required=True)
    tk.add_argument("--params", required=True)
    tk.add_argument("--out", required=True)
    tk.add_argument("--no-sspe", action="store_true")
    tk.add_argument("--no-ssa", action="store_true")
    tk.add_argument("--shuffle-seed", type=int, default=None)
    tk.add_argument("--theta", type=float, default=0.5)
    tk.add_argument("--mask-budget", type=int, default=40 * 126 * 126)
    tk.set_defaults(fn=_cmd_tokenize)

    be = sub.add_parser("bench", help="token counts / compression / purity on a corpus")
    be.add_argument("--corpus-seed", type=int, required=True)
    be.add_argument("--scenes", type=int, required=True)
    be.add_argument("--projector", choices=_BENCH_PROJECTORS, required=True)
    be.add_argument("--report", required=True)
    be.add_argument("--theta", type=float, default=0.5)
    be.set_defaults(fn=_cmd_bench)

    tt = sub.add_parser("toy-train", help="train the toy referring-selection task")
    tt.add_argument("--config", required=True)
    tt.add_argument("--out", required=True)
    tt.set_defaults(fn=_cmd_toy_train)

    te = sub.add_parser("toy-eval", help="evaluate a trained model")
    te.add_argument("--params", required=True)
    te.add_argument("--seeds", type=int, nargs="+", required=True)
    te.set_defaults(fn=_cmd_toy_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--target", choices=("sspe", "ssa", "svp", "mlp"), required=True)
    gc.add_argument("--eps", type=float, default=1e-4)
    gc.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
