"""Semantic-superpixel positional embeddings (SSPE).

The main encoder turns each superpixel's binary mask into a d-vector: mask
values are embedded per pixel and serve as keys/values (with a 2-D sinusoidal
key PE) for a stack of attention blocks driven by a small set of learnable
queries shared across superpixels; the query outputs are concatenated and
linearly projected.  Each superpixel is encoded independently, so the result
is exactly equivariant under superpixel reordering.

Two cheaper ablation variants project the normalized bounding box or the
flattened resized mask through an MLP instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ValidationError
from .layers import (AttentionConfig, init_block_params, sinusoidal_pe_2d,
                     transformer_block, xavier_uniform)
from .superpixels import SuperpixelSet, _nn_indices

__all__ = ["SspeConfig", "init_sspe_params", "encode_sspe", "encode_mask_tokens",
           "masks_to_tokens", "bbox_mlp_sspe", "mask_mlp_sspe"]


@dataclass(frozen=True)
class SspeConfig:
    """Encoder hyperparameters; block count is fixed at construction."""

    out_dim: int
    num_queries: int = 4
    model_dim: int = 128
    num_heads: int = 8
    num_blocks: int = 3

    def __post_init__(self):
        if self.num_queries < 1:
            raise ValidationError("num_queries must be at least 1")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.model_dim, self.num_heads)


def init_sspe_params(store: ParamStore, prefix: str, cfg: SspeConfig,
                     rng: np.random.Generator, dtype=np.float64):
    d = cfg.model_dim
    store.add(f"{prefix}.embed", xavier_uniform(rng, 2, d, dtype=dtype))
    store.add(f"{prefix}.queries", xavier_uniform(rng, cfg.num_queries, d,
                                                  shape=(cfg.num_queries, d), dtype=dtype))
    store.add(f"{prefix}.query_pe", xavier_uniform(rng, cfg.num_queries, d,
                                                   shape=(cfg.num_queries, d), dtype=dtype))
    for b in range(cfg.num_blocks):
        init_block_params(store, f"{prefix}.block{b}", cfg.attention, rng, dtype)
    # no bias: the output acts as an additive embedding
    store.add(f"{prefix}.out", xavier_uniform(rng, cfg.num_queries * d, cfg.out_dim,
                                              dtype=dtype))


def masks_to_tokens(sp: SuperpixelSet) -> np.ndarray:
    """Binary mask rows as int token ids, shape (M, H*W)."""
    return sp.masks().astype(np.int64)


def encode_mask_tokens(mask_tokens: np.ndarray, height: int, width: int,
                       store: ParamStore, prefix: str, cfg: SspeConfig) -> Tensor:
    """Encoder core over pre-extracted binary mask token rows (M, H*W)."""
    kv = ad.gather_rows(store[f"{prefix}.embed"], mask_tokens)  # (M, L, dm)
    kv_pe = sinusoidal_pe_2d(height, width, cfg.model_dim)  # (L, dm) broadcast
    m = mask_tokens.shape[0]
    # lift the shared queries to (M, N, dm); the zero addend only broadcasts
    x = ad.add(store[f"{prefix}.queries"], np.zeros((m, 1, 1)))
    q_pe = store[f"{prefix}.query_pe"]
    for b in range(cfg.num_blocks):
        x = transformer_block(x, q_pe, kv, kv_pe, cfg.attention, store,
                              f"{prefix}.block{b}")
    flat = ad.reshape(x, (m, cfg.num_queries * cfg.model_dim))
    return ad.matmul(flat, store[f"{prefix}.out"])


def encode_sspe(sp_resized: SuperpixelSet, store: ParamStore, prefix: str,
                cfg: SspeConfig) -> Tensor:
    """Encode every superpixel's geometry/position into one row of (M, d).

    Superpixels are processed as a batch but never attend across each other;
    resize the set first so H*W stays within the compute budget.
    """
    height, width = sp_resized.dims
    return encode_mask_tokens(masks_to_tokens(sp_resized), height, width,
                              store, prefix, cfg)


def init_bbox_mlp_params(store: ParamStore, prefix: str, dims,
                         rng: np.random.Generator, dtype=np.float64):
    from .layers import init_mlp_params
    init_mlp_params(store, prefix, dims, rng, dtype)


def bbox_mlp_sspe(bboxes_norm: np.ndarray, store: ParamStore, prefix: str,
                  dims) -> Tensor:
    """Positional embedding from normalized (row_min,col_min,row_max,col_max)."""
    boxes = np.asarray(bboxes_norm, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValidationError("bbox_mlp_sspe expects an (M, 4) array")
    if boxes.min() < 0.0 or boxes.max() > 1.0:
        raise ValidationError("bbox_mlp_sspe expects boxes normalized to [0, 1]")
    from .layers import mlp_forward
    return mlp_forward(boxes, store, prefix, dims)


def _resize_binary_mask(mask: np.ndarray, side: int) -> np.ndarray:
    h, w = mask.shape
    return mask[np.ix_(_nn_indices(h, side), _nn_indices(w, side))]


def mask_mlp_sspe(sp: SuperpixelSet, side: int, store: ParamStore, prefix: str,
                  dims) -> Tensor:
    """Positional embedding from each mask resized to side x side and flattened."""
    if side < 1:
        raise ValidationError("side must be at least 1")
    m = sp.num_superpixels
    flat = np.empty((m, side * side), dtype=np.float64)
    for i in range(m):
        flat[i] = _resize_binary_mask(sp.mask(i), side).astype(np.float64).reshape(-1)
    from .layers import mlp_forward
    return mlp_forward(flat, store, prefix, dims)
