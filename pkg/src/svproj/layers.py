"""Attention blocks, positional embeddings and the gradient checker.

All layers read their weights from a :class:`~svproj.autodiff.ParamStore`
under a caller-supplied prefix, so that independent modules can share one
store without name clashes.  Blocks are pre-norm with residual connections;
positional embeddings are re-added to queries and keys at every attention
layer and never to values.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ValidationError

__all__ = [
    "AttentionConfig", "sinusoidal_pe_2d", "mha_forward", "transformer_block",
    "mlp_forward", "grad_check", "init_attention_params", "init_block_params",
    "init_mlp_params", "xavier_uniform",
]


@dataclass(frozen=True)
class AttentionConfig:
    """Width/head configuration shared by the attention and FFN layers."""

    model_dim: int
    num_heads: int
    ffn_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValidationError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.ln_eps <= 0:
            raise ValidationError("ln_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_mult * self.model_dim


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None, dtype=np.float64) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-a, a, size=shape).astype(dtype)


def init_attention_params(store: ParamStore, prefix: str, cfg: AttentionConfig,
                          rng: np.random.Generator, dtype=np.float64):
    d = cfg.model_dim
    for nm in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{nm}", xavier_uniform(rng, d, d, dtype=dtype))
    # no key bias: it cancels in the softmax and would never train
    for nm in ("bq", "bv", "bo"):
        store.add(f"{prefix}.{nm}", np.zeros(d, dtype=dtype))


def _init_ln(store: ParamStore, prefix: str, d: int, dtype):
    store.add(f"{prefix}.g", np.ones(d, dtype=dtype))
    store.add(f"{prefix}.b", np.zeros(d, dtype=dtype))


def init_block_params(store: ParamStore, prefix: str, cfg: AttentionConfig,
                      rng: np.random.Generator, dtype=np.float64):
    """Parameters for one cross-attention / self-attention / FFN block."""
    d, h = cfg.model_dim, cfg.ffn_hidden
    _init_ln(store, f"{prefix}.ln_cross", d, dtype)
    init_attention_params(store, f"{prefix}.cross", cfg, rng, dtype)
    _init_ln(store, f"{prefix}.ln_self", d, dtype)
    init_attention_params(store, f"{prefix}.self", cfg, rng, dtype)
    _init_ln(store, f"{prefix}.ln_ffn", d, dtype)
    store.add(f"{prefix}.ffn.w1", xavier_uniform(rng, d, h, dtype=dtype))
    store.add(f"{prefix}.ffn.b1", np.zeros(h, dtype=dtype))
    store.add(f"{prefix}.ffn.w2", xavier_uniform(rng, h, d, dtype=dtype))
    store.add(f"{prefix}.ffn.b2", np.zeros(d, dtype=dtype))


def init_mlp_params(store: ParamStore, prefix: str, dims: Sequence[int],
                    rng: np.random.Generator, dtype=np.float64):
    """Two-layer perceptron parameters for dims [d_in, d_hidden, d_out]."""
    d_in, d_h, d_out = dims
    store.add(f"{prefix}.w1", xavier_uniform(rng, d_in, d_h, dtype=dtype))
    store.add(f"{prefix}.b1", np.zeros(d_h, dtype=dtype))
    store.add(f"{prefix}.w2", xavier_uniform(rng, d_h, d_out, dtype=dtype))
    store.add(f"{prefix}.b2", np.zeros(d_out, dtype=dtype))


@lru_cache(maxsize=64)
def _sinusoidal_cached(height: int, width: int, dim: int) -> np.ndarray:
    half = dim // 2
    pe = np.zeros((height * width, dim), dtype=np.float64)
    rows = np.repeat(np.arange(height, dtype=np.float64), width)
    cols = np.tile(np.arange(width, dtype=np.float64), height)
    freqs = np.exp(-np.log(10000.0) * (2.0 * np.arange(half // 2) / half))
    for pos, off in ((rows, 0), (cols, half)):
        ang = pos[:, None] * freqs[None, :]
        pe[:, off + 0:off + half:2] = np.sin(ang)
        pe[:, off + 1:off + half:2] = np.cos(ang)
    pe.setflags(write=False)
    return pe


def sinusoidal_pe_2d(height: int, width: int, dim: int) -> np.ndarray:
    """2-D sinusoidal positional embedding, shape (height*width, dim).

    The first dim/2 channels encode the row index and the second half the
    column index, each with the standard interleaved sin/cos frequency
    ladder.  `dim` must be divisible by 4.
    """
    if dim % 4 != 0:
        raise ValidationError(f"sinusoidal_pe_2d: dim {dim} not divisible by 4")
    if height < 1 or width < 1:
        raise ValidationError("sinusoidal_pe_2d: empty grid")
    return _sinusoidal_cached(height, width, dim)


def _check_finite(name: str, *arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(ad._val(a))):
            raise ValidationError(f"{name}: non-finite input")


def mha_forward(q, k, v, q_pe, k_pe, cfg: AttentionConfig, store: ParamStore,
                prefix: str, bias=None, weights_out: list | None = None) -> Tensor:
    """Multi-head attention with PEs applied to the query/key paths only.

    Computes softmax((Wq(q+q_pe))(Wk(k+k_pe))^T / sqrt(head_dim) + bias)
    applied to Wv(v), heads concatenated and output-projected.  `bias`
    entries should be 0 or large negatives (attention masking).
    """
    qv, kv = ad._val(q), ad._val(k)
    vv = ad._val(v)
    if qv.shape[-1] != cfg.model_dim or kv.shape[-1] != cfg.model_dim:
        raise ValidationError("mha_forward: feature dim does not match config")
    if kv.shape[:-1] != vv.shape[:-1]:
        raise ValidationError("mha_forward: k and v row counts differ")
    if bias is not None:
        bshape = np.asarray(bias).shape
        ok = len(bshape) >= 2 and all(
            b in (1, want) for b, want in zip(bshape[-2:], (qv.shape[-2], kv.shape[-2])))
        if not ok:
            raise ValidationError("mha_forward: bias shape mismatch")
    _check_finite("mha_forward", q, k, v, q_pe, k_pe)
    return ad.multi_head_attention(
        q, k, v, q_pe, k_pe,
        store[f"{prefix}.wq"], store[f"{prefix}.bq"], store[f"{prefix}.wk"],
        store[f"{prefix}.wv"], store[f"{prefix}.bv"],
        store[f"{prefix}.wo"], store[f"{prefix}.bo"],
        num_heads=cfg.num_heads, bias=bias, weights_out=weights_out)


def _ffn(x, store: ParamStore, prefix: str) -> Tensor:
    h = ad.gelu(ad.linear(x, store[f"{prefix}.w1"], store[f"{prefix}.b1"]))
    return ad.linear(h, store[f"{prefix}.w2"], store[f"{prefix}.b2"])


def transformer_block(queries, q_pe, kv, kv_pe, cfg: AttentionConfig,
                      store: ParamStore, prefix: str, bias=None,
                      self_bias=None,
                      cross_weights_out: list | None = None) -> Tensor:
    """Pre-norm cross-attention, self-attention, FFN, each with a residual.

    `bias` applies to the cross-attention; `self_bias` to the self-attention
    (used to keep concatenated batches from attending across samples).  In
    the self-attention the normalized queries serve as keys and values, with
    `q_pe` re-added as both the query and key positional embedding.
    """
    x = queries
    hq = ad.layer_norm(x, store[f"{prefix}.ln_cross.g"], store[f"{prefix}.ln_cross.b"],
                       cfg.ln_eps)
    x = ad.add(x, mha_forward(hq, kv, kv, q_pe, kv_pe, cfg, store,
                              f"{prefix}.cross", bias=bias,
                              weights_out=cross_weights_out))
    hs = ad.layer_norm(x, store[f"{prefix}.ln_self.g"], store[f"{prefix}.ln_self.b"],
                       cfg.ln_eps)
    x = ad.add(x, mha_forward(hs, hs, hs, q_pe, q_pe, cfg, store, f"{prefix}.self",
                              bias=self_bias))
    hf = ad.layer_norm(x, store[f"{prefix}.ln_ffn.g"], store[f"{prefix}.ln_ffn.b"],
                       cfg.ln_eps)
    return ad.add(x, _ffn(hf, store, f"{prefix}.ffn"))


def mlp_forward(x, store: ParamStore, prefix: str, dims: Sequence[int]) -> Tensor:
    """Linear -> GELU -> Linear, row-wise independent."""
    d_in, d_h, d_out = dims
    w1, w2 = store[f"{prefix}.w1"], store[f"{prefix}.w2"]
    if w1.shape != (d_in, d_h) or w2.shape != (d_h, d_out):
        raise ValidationError(f"mlp_forward: params at {prefix} do not match dims {dims}")
    xv = ad._val(x)
    if xv.shape[-1] != d_in:
        raise ValidationError("mlp_forward: input dim mismatch")
    h = ad.gelu(ad.linear(x, w1, store[f"{prefix}.b1"]))
    return ad.linear(h, w2, store[f"{prefix}.b2"])


def grad_check(loss_fn: Callable[[], Tensor], store: ParamStore,
               eps: float = 1e-4) -> float:
    """Worst relative error of reverse-mode grads vs central differences.

    The denominator is max(|analytic|, |numeric|, 1e-8) per entry; scanning
    covers every element of every trainable parameter.  Use float64 params.
    """
    store.zero_grads()
    loss = loss_fn()
    if not np.isfinite(loss.value):
        raise ValidationError("grad_check: non-finite loss")
    loss.backward()
    analytic = {n: store.grad(n).copy() for n in store.trainable_names()}

    worst = 0.0
    with ad.no_grad():
        for name in store.trainable_names():
            value = store[name].value
            flat = value.reshape(-1)
            ga = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(loss_fn().value)
                flat[i] = orig - eps
                f_minus = float(loss_fn().value)
                flat[i] = orig
                gn = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(ga[i]), abs(gn), 1e-8)
                worst = max(worst, abs(ga[i] - gn) / denom)
    store.zero_grads()
    return worst
