"""Pooling patch embeddings per superpixel and cross-attention refinement.

`pool_superpixels` averages patch embeddings over each superpixel (a binary
assignment matrix row-normalized to L1 unit length).  `ssa_forward` refines
the pooled embeddings with attention blocks over the full patch field; the
three modes differ only in the cross-attention key PE and bias:

- share_sspe: keys get the sinusoidal PE plus the owning superpixel's
  positional embedding scattered onto its patches, giving each query a soft
  prior toward its own region while the rest of the image stays reachable.
- no_share:   keys get the sinusoidal PE only.
- attn_bias:  like no_share, but cross-attention is hard-masked so query i
  can only attend to patches of superpixel i.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ValidationError
from .layers import AttentionConfig, init_block_params, sinusoidal_pe_2d, transformer_block
from .superpixels import SuperpixelSet, resize_label_grid

__all__ = ["SsaConfig", "PatchAlignedSuperpixels", "align_to_patches",
           "pool_superpixels", "scatter_sspe", "ssa_forward", "init_ssa_params",
           "SSA_MODES"]

SSA_MODES = ("share_sspe", "no_share", "attn_bias")

_NEG_BIAS = -1e9


@dataclass(frozen=True)
class SsaConfig:
    model_dim: int
    num_heads: int = 4
    num_blocks: int = 3
    mode: str = "share_sspe"

    def __post_init__(self):
        if self.mode not in SSA_MODES:
            raise ValidationError(f"unknown aggregator mode: {self.mode!r}")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.model_dim, self.num_heads)


@dataclass
class PatchAlignedSuperpixels:
    """Superpixel assignment resampled to the patch grid.

    Superpixels that map to zero patches are dropped; `kept` lists the
    surviving original row indices so callers can remap per-superpixel data.
    """

    labels: np.ndarray            # (H, W) patch-resolution labels in [0, M')
    kept: np.ndarray              # (M',) original row index per surviving row
    dropped: np.ndarray           # original row indices that vanished
    height: int
    width: int

    @property
    def num_superpixels(self) -> int:
        return int(self.kept.shape[0])

    @property
    def num_patches(self) -> int:
        return self.height * self.width

    def assignment(self) -> np.ndarray:
        """Binary matrix S, shape (M', H*W)."""
        flat = self.labels.reshape(-1)
        return flat[None, :] == np.arange(self.num_superpixels)[:, None]

    def areas(self) -> np.ndarray:
        return np.bincount(self.labels.reshape(-1), minlength=self.num_superpixels)

    def supports(self) -> list[np.ndarray]:
        """Patch index set per superpixel."""
        flat = self.labels.reshape(-1)
        return [np.flatnonzero(flat == i) for i in range(self.num_superpixels)]


def align_to_patches(sp: SuperpixelSet, height: int, width: int) -> PatchAlignedSuperpixels:
    """Resample the mask-resolution partition to the patch grid."""
    if height * width == 0:
        raise ValidationError("align_to_patches: empty patch grid")
    labels = resize_label_grid(sp.label_grid, (height, width))
    m = sp.num_superpixels
    counts = np.bincount(labels.reshape(-1), minlength=m)
    kept = np.flatnonzero(counts > 0)
    dropped = np.flatnonzero(counts == 0)
    remap = np.full(m, -1, dtype=np.int64)
    remap[kept] = np.arange(kept.size)
    return PatchAlignedSuperpixels(labels=remap[labels], kept=kept, dropped=dropped,
                                   height=height, width=width)


def pool_superpixels(aligned: PatchAlignedSuperpixels, patch_embeddings) -> Tensor:
    """Mean patch embedding per superpixel: N1(S) @ F with binary S."""
    fv = ad._val(patch_embeddings)
    if fv.shape[0] != aligned.num_patches:
        raise ValidationError("pool_superpixels: patch count mismatch")
    return ad.segment_mean(patch_embeddings, aligned.labels.reshape(-1),
                           aligned.num_superpixels)


def scatter_sspe(aligned: PatchAlignedSuperpixels, sspe: Tensor) -> Tensor:
    """Scatter per-superpixel embeddings onto patches: S^T @ P.

    Under the partition each patch receives exactly its owner's row, so a
    label gather is the exact (and cheaper) evaluation of S^T @ P.
    """
    pv = ad._val(sspe)
    if pv.shape[0] != aligned.num_superpixels:
        raise ValidationError("scatter_sspe: row count mismatch")
    return ad.gather_rows(sspe, aligned.labels.reshape(-1))


def init_ssa_params(store: ParamStore, prefix: str, cfg: SsaConfig,
                    rng: np.random.Generator, dtype=np.float64):
    for b in range(cfg.num_blocks):
        init_block_params(store, f"{prefix}.block{b}", cfg.attention, rng, dtype)


def ssa_forward(pooled, patch_embeddings, sspe, aligned: PatchAlignedSuperpixels,
                store: ParamStore, prefix: str, cfg: SsaConfig,
                cross_weights_out: list | None = None) -> Tensor:
    """Refine pooled superpixel embeddings over the patch field.

    Query input is the pooled embedding with the superpixel's positional
    embedding as query PE (all modes); self-attention across superpixels uses
    the same PE.  See the module docstring for how modes alter the keys.
    """
    fv = ad._val(patch_embeddings)
    if fv.shape[-1] != cfg.model_dim:
        raise ValidationError("ssa_forward: patch width does not match config")
    m = aligned.num_superpixels
    if ad._val(pooled).shape[0] != m or ad._val(sspe).shape[0] != m:
        raise ValidationError("ssa_forward: row counts do not conform")

    sin_pe = sinusoidal_pe_2d(aligned.height, aligned.width, cfg.model_dim)
    if cfg.mode == "share_sspe":
        kv_pe = ad.add(scatter_sspe(aligned, sspe), sin_pe)
    else:
        kv_pe = sin_pe
    bias = None
    if cfg.mode == "attn_bias":
        inside = aligned.assignment()
        bias = np.where(inside, 0.0, _NEG_BIAS)

    x = pooled if isinstance(pooled, Tensor) else Tensor(pooled)
    for b in range(cfg.num_blocks):
        x = transformer_block(x, sspe, patch_embeddings, kv_pe, cfg.attention,
                              store, f"{prefix}.block{b}", bias=bias,
                              cross_weights_out=cross_weights_out)
    return x
