"""svproj: semantic-superpixel visual projection at desk scale.

A numpy implementation of adaptive visual-token compression: candidate
segmentation masks are filtered into a superpixel partition, each superpixel
gets a learned positional embedding from its binary mask, patch embeddings
are pooled and refined per superpixel by cross-attention, and the result is
projected into a short token sequence.  Includes baseline projectors, a
synthetic referring-selection training task, and binary/text file formats
for masks, embeddings and tokens.
"""

from .autodiff import ParamStore, Tensor, no_grad
from .layers import (AttentionConfig, grad_check, mha_forward, mlp_forward,
                     sinusoidal_pe_2d, transformer_block)
from .superpixels import (BBox, CandidateMask, SuperpixelSet, bbox_of,
                          centroid_area, decode_rle, encode_rle,
                          filter_candidates, load_mask_file, resize_masks,
                          save_mask_file, shuffle_superpixels)
from .sspe import (SspeConfig, bbox_mlp_sspe, encode_sspe, init_sspe_params,
                   mask_mlp_sspe)
from .aggregator import (PatchAlignedSuperpixels, SsaConfig, align_to_patches,
                         init_ssa_params, pool_superpixels, scatter_sspe,
                         ssa_forward)
from .projector import (PatchGrid, PipelineConfig, SvpParams, TokenSequence,
                        TokenStats, avg_pool_tokens, fuse_svp_outputs,
                        global_query_tokens, init_svp_params,
                        pixel_shuffle_tokens, svp_forward, token_purity)
from .scenes import ReferringQuery, Scene, SceneSpec, gen_corpus, gen_query, gen_scene
from .training import SelectionHead, ToyModel, TrainConfig, eval_selection, train_toy

__version__ = "0.1.0"
