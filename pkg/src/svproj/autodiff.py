"""Minimal reverse-mode autodiff over dense numpy arrays.

Graphs are built eagerly by the op functions below and torn down after each
backward pass.  Arrays are float64 by default; float32 is supported for
speed.  Heavy layers (attention, layer norm) are implemented as single tape
nodes with hand-derived vector-Jacobian products, which keeps per-step Python
overhead low enough for the toy training loop.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ParamStore", "no_grad", "as_tensor",
    "add", "sub", "mul", "scale", "scale_by", "matmul", "reshape",
    "gather_rows", "segment_mean", "linear", "layer_norm", "gelu",
    "softmax", "multi_head_attention", "softmax_cross_entropy",
    "sum_all", "zeros",
]

_grad_enabled = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure-numpy evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus an optional gradient slot and tape linkage."""

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=None)
        if self.value.dtype not in (np.float64, np.float32):
            self.value = self.value.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._vjp: Callable | None = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-accumulate gradients from this scalar into the graph."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._vjp is not None:
                node._vjp(node.grad)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _accum(t: Tensor, g):
    # grads are never mutated in place, so the first contribution may alias g
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _node(value: np.ndarray, parents: Iterable, vjp: Callable | None) -> Tensor:
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    if needs:
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av + bv

    def vjp(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, _unbroadcast(g, av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accum(b, _unbroadcast(g, bv.shape))

    return _node(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av - bv

    def vjp(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, _unbroadcast(g, av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accum(b, _unbroadcast(-g, bv.shape))

    return _node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av * bv

    def vjp(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accum(b, _unbroadcast(g * av, bv.shape))

    return _node(out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    av = _val(a)
    out = av * c

    def vjp(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, g * c)

    return _node(out, (a,), vjp)


def scale_by(a, s) -> Tensor:
    """Multiply array `a` by learnable scalar tensor `s`."""
    av, sv = _val(a), _val(s)
    if sv.size != 1:
        raise ValueError("scale_by expects a scalar multiplier")
    out = av * sv

    def vjp(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, g * sv)
        if isinstance(s, Tensor) and s.requires_grad:
            _accum(s, np.sum(g * av).reshape(sv.shape))

    return _node(out, (a, s), vjp)


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av @ bv

    def vjp(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape))

    return _node(out, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    av = _val(a)
    out = av.reshape(shape)

    def vjp(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, g.reshape(av.shape))

    return _node(out, (a,), vjp)


def sum_all(a) -> Tensor:
    av = _val(a)
    out = np.asarray(av.sum())

    def vjp(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, np.broadcast_to(g, av.shape))

    return _node(out, (a,), vjp)


def gather_rows(table, idx) -> Tensor:
    """Row lookup `table[idx]`; the VJP scatter-adds back into the table."""
    tv = _val(table)
    idx = np.asarray(idx)
    out = tv[idx]

    def vjp(g):
        if isinstance(table, Tensor) and table.requires_grad:
            buf = np.zeros_like(tv)
            np.add.at(buf, idx.reshape(-1), g.reshape(-1, tv.shape[-1]))
            _accum(table, buf)

    return _node(out, (table,), vjp)


def segment_mean(x, labels: np.ndarray, num_segments: int) -> Tensor:
    """Mean of rows of `x` grouped by integer `labels` (every segment non-empty).

    Means are centered on the segment's first row; a segment of identical
    rows then reproduces the row bit-exactly (the deviations are exact
    zeros), which downstream identity checks rely on.
    """
    xv = _val(x)
    labels = np.asarray(labels).reshape(-1)
    counts = np.bincount(labels, minlength=num_segments)
    if np.any(counts == 0):
        raise ValueError("segment_mean: empty segment")
    out = np.empty((num_segments, xv.shape[-1]), dtype=xv.dtype)
    for s in range(num_segments):
        rows = xv[labels == s]
        out[s] = rows[0] + (rows - rows[0]).mean(axis=0)

    def vjp(g):
        if isinstance(x, Tensor) and x.requires_grad:
            _accum(x, (g / counts[:, None])[labels])

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# fused neural-net ops
# ---------------------------------------------------------------------------

def linear(x, w, b=None) -> Tensor:
    xv, wv = _val(x), _val(w)
    out = xv @ wv
    if b is not None:
        out = out + _val(b)

    def vjp(g):
        if isinstance(w, Tensor) and w.requires_grad:
            _accum(w, xv.reshape(-1, wv.shape[0]).T @ g.reshape(-1, g.shape[-1]))
        if b is not None and isinstance(b, Tensor) and b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
        if isinstance(x, Tensor) and x.requires_grad:
            _accum(x, g @ wv.T)

    return _node(out, (x, w, b), vjp)


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x), with the erf formulation."""
    xv = _val(x)
    cdf = 0.5 * (1.0 + erf(xv * _INV_SQRT2))
    out = xv * cdf

    def vjp(g):
        if isinstance(x, Tensor) and x.requires_grad:
            pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT2PI
            _accum(x, g * (cdf + xv * pdf))

    return _node(out, (x,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis with learnable scale/shift."""
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gv + bv

    def vjp(g):
        if isinstance(gamma, Tensor) and gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        if isinstance(beta, Tensor) and beta.requires_grad:
            _accum(beta, g.sum(axis=tuple(range(g.ndim - 1))))
        if isinstance(x, Tensor) and x.requires_grad:
            gx = g * gv
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))

    return _node(out, (x, gamma, beta), vjp)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    xv = _val(x)
    y = _softmax(xv)

    def vjp(g):
        if isinstance(x, Tensor) and x.requires_grad:
            _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (x,), vjp)


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, l, d = x.shape
    return x.reshape(b, l, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * hd)


def multi_head_attention(q, k, v, q_pe, k_pe,
                         wq, bq, wk, wv, bv, wo, bo,
                         num_heads: int, bias=None,
                         weights_out: list | None = None) -> Tensor:
    """Scaled dot-product multi-head attention as a single tape node.

    Positional embeddings are added to the query and key inputs before their
    projections and never to the values.  The key projection carries no bias
    term: a constant key offset shifts every logit of a query equally, which
    softmax ignores, so such a parameter would be untrainable dead weight.
    `bias` (broadcast over heads) is added to the pre-softmax logits.  Inputs
    may be (L, d) or batched (B, L, d); PEs broadcast against them.  If
    `weights_out` is given, the softmax attention weights are appended to it
    (for inspection only).
    """
    qv, kv_, vv = _val(q), _val(k), _val(v)
    squeeze = qv.ndim == 2
    if squeeze:
        qv, kv_, vv = qv[None], kv_[None], vv[None]
    qpe_v = _val(q_pe) if q_pe is not None else None
    kpe_v = _val(k_pe) if k_pe is not None else None
    qn = qv + qpe_v if qpe_v is not None else qv
    kn = kv_ + kpe_v if kpe_v is not None else kv_

    wq_v, wk_v, wv_v, wo_v = _val(wq), _val(wk), _val(wv), _val(wo)
    bq_v, bv_v, bo_v = _val(bq), _val(bv), _val(bo)
    d_m = wq_v.shape[0]
    hd = d_m // num_heads
    sc = 1.0 / np.sqrt(hd)

    Q = _split_heads(qn @ wq_v + bq_v, num_heads)
    K = _split_heads(kn @ wk_v, num_heads)
    V = _split_heads(vv @ wv_v + bv_v, num_heads)

    S = (Q @ np.swapaxes(K, -1, -2)) * sc
    if bias is not None:
        S = S + np.asarray(bias)
    A = _softmax(S)
    if weights_out is not None:
        weights_out.append(A[0] if squeeze else A)
    O = _merge_heads(A @ V)
    out3 = O @ wo_v + bo_v
    out = out3[0] if squeeze else out3

    def vjp(g):
        g3 = g[None] if squeeze else g
        gf = g3.reshape(-1, g3.shape[-1])
        if isinstance(wo, Tensor) and wo.requires_grad:
            _accum(wo, O.reshape(-1, d_m).T @ gf)
        if isinstance(bo, Tensor) and bo.requires_grad:
            _accum(bo, gf.sum(axis=0))
        dO = _split_heads(g3 @ wo_v.T, num_heads)
        dA = dO @ np.swapaxes(V, -1, -2)
        dV = np.swapaxes(A, -1, -2) @ dO
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
        dQ = (dS @ K) * sc
        dK = (np.swapaxes(dS, -1, -2) @ Q) * sc
        dQm, dKm, dVm = _merge_heads(dQ), _merge_heads(dK), _merge_heads(dV)

        if isinstance(wq, Tensor) and wq.requires_grad:
            _accum(wq, qn.reshape(-1, d_m).T @ dQm.reshape(-1, d_m))
        if isinstance(bq, Tensor) and bq.requires_grad:
            _accum(bq, dQm.reshape(-1, d_m).sum(axis=0))
        if isinstance(wk, Tensor) and wk.requires_grad:
            _accum(wk, kn.reshape(-1, d_m).T @ dKm.reshape(-1, d_m))
        if isinstance(wv, Tensor) and wv.requires_grad:
            _accum(wv, vv.reshape(-1, d_m).T @ dVm.reshape(-1, d_m))
        if isinstance(bv, Tensor) and bv.requires_grad:
            _accum(bv, dVm.reshape(-1, d_m).sum(axis=0))

        dqn = dQm @ wq_v.T
        dkn = dKm @ wk_v.T
        dvn = dVm @ wv_v.T
        if isinstance(q, Tensor) and q.requires_grad:
            _accum(q, _unbroadcast(dqn, q.value.shape))
        if isinstance(q_pe, Tensor) and q_pe.requires_grad:
            _accum(q_pe, _unbroadcast(dqn, q_pe.value.shape))
        if isinstance(k, Tensor) and k.requires_grad:
            _accum(k, _unbroadcast(dkn, k.value.shape))
        if isinstance(k_pe, Tensor) and k_pe.requires_grad:
            _accum(k_pe, _unbroadcast(dkn, k_pe.value.shape))
        if isinstance(v, Tensor) and v.requires_grad:
            _accum(v, _unbroadcast(dvn, v.value.shape))

    return _node(out, (q, k, v, q_pe, k_pe, wq, bq, wk, wv, bv, wo, bo), vjp)


def softmax_cross_entropy(logits, target: int) -> Tensor:
    """Cross entropy of a 1-D logit vector against an integer class index.

    Computed as logsumexp(logits) - logits[target], which stays finite for
    arbitrarily spread logits.
    """
    lv = _val(logits).reshape(-1)
    m = lv.max()
    e = np.exp(lv - m)
    z = e.sum()
    out = np.asarray(m + np.log(z) - lv[target])
    p = e / z

    def vjp(g):
        if isinstance(logits, Tensor) and logits.requires_grad:
            d = p.copy()
            d[target] -= 1.0
            _accum(logits, (g * d).reshape(logits.value.shape))

    return _node(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class ParamStore:
    """Named collection of learnable arrays with gradient slots.

    Each entry holds a value tensor and a trainable flag; gradients accumulate
    on the tensors during backward passes and are cleared with
    :meth:`zero_grads`.
    """

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, bool]] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value), requires_grad=trainable)
        self._entries[name] = (t, trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def trainable_names(self) -> list[str]:
        return [n for n, (_, tr) in self._entries.items() if tr]

    def is_trainable(self, name: str) -> bool:
        return self._entries[name][1]

    def zero_grads(self):
        for t, _ in self._entries.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        t = self._entries[name][0]
        return t.grad if t.grad is not None else np.zeros_like(t.value)

    def num_entries(self) -> int:
        return len(self._entries)
