"""Programmable block-sparse attention on CPU.

Attention variants are written as small positional callables
(``mask_mod``/``score_mod``); a block mask derived from the mask lets the
tiled engine skip fully masked tiles.
"""

from .block_mask import (BlockMask, SparsityReport, create_block_mask, sparsity, to_dense,
                         transpose)
from .core import (AttentionConfig, AttentionOutput, Gradients, MaskMod, ScoreMod,
                   finite_difference_grad, mod_from_mask, validate_inputs)
from .engine import Counters, backward, decode, forward
from .masks import (NAGeometry, Permutation, alibi, alibi_slopes, and_mask, causal, document_mask,
                    morton_permutation, na_morton, na_naive, na_tiled, noop_mask, noop_score,
                    offset_mask, offset_score, or_mask, prefix_lm, remap_mask, sliding_window,
                    soft_cap, tile_permutation)
from .paged import PagedKVCache, PageTable, convert_block_mask, convert_mods, paged_forward

__version__ = "0.1.0"
