"""Modifier contracts, attention configuration and input validation.

Tensors are plain 4-D numpy arrays laid out as (batch, heads, length, feature).
Modifiers are ordinary Python callables evaluated on *broadcastable index
arrays*: the engine calls ``mask_mod(b, h, q_idx, kv_idx)`` with ``b`` and
``h`` as ints, ``q_idx`` as a column vector and ``kv_idx`` as a row vector, so
a modifier must be written with numpy operators (``&``, ``|``, ``np.where``)
rather than ``and``/``or``.  Written that way, the same callable also works on
plain Python ints.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch

NEG_INF = float("-inf")
WORKING_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


@dataclass(frozen=True)
class MaskMod:
    """Positional predicate: ``True`` keeps the score, ``False`` sets it to -inf.

    ``required_len`` is set by masks that only make sense for one sequence
    length (neighborhood attention over a fixed canvas); block-mask
    construction checks it.
    """

    fn: Callable[..., Any]
    name: str = "mask"
    required_len: Optional[int] = None
    captures: tuple = field(default=(), compare=False, repr=False)

    def __call__(self, b, h, q_idx, kv_idx):
        return self.fn(b, h, q_idx, kv_idx)

    def grid(self, b: int, h: int, q_len: int, kv_len: int) -> np.ndarray:
        """Evaluate on the full ``(q_len, kv_len)`` grid as a dense bool array."""
        q = np.arange(q_len)[:, None]
        kv = np.arange(kv_len)[None, :]
        out = np.asarray(self.fn(b, h, q, kv), dtype=bool)
        return np.broadcast_to(out, (q_len, kv_len))


@dataclass(frozen=True)
class ScoreMod:
    """Pointwise rewrite of an already-scaled score, plus its derivative.

    ``dapply`` must return d(apply)/d(score) at the same point.  It may be
    ``None`` for forward-only use; backward refuses such modifiers.
    """

    apply: Callable[..., Any]
    dapply: Optional[Callable[..., Any]] = None
    name: str = "score"
    identity: bool = False
    captures: tuple = field(default=(), compare=False, repr=False)

    def __call__(self, score, b, h, q_idx, kv_idx):
        return self.apply(score, b, h, q_idx, kv_idx)

    def grad(self, score, b, h, q_idx, kv_idx):
        if self.dapply is None:
            raise TypeError(
                f"score_mod {self.name!r} has no derivative; wrap it with "
                "finite_difference_grad() if it is only needed in tests"
            )
        return self.dapply(score, b, h, q_idx, kv_idx)


def finite_difference_grad(smod: ScoreMod, eps: float = 1e-4) -> ScoreMod:
    """Attach a central-difference derivative to ``smod``.

    Only meant for tests: it doubles the modifier cost and is accurate to
    roughly ``eps**2``.
    """
    apply = smod.apply

    def dapply(score, b, h, q_idx, kv_idx):
        s = np.asarray(score, dtype=np.float64)
        hi = np.asarray(apply(s + eps, b, h, q_idx, kv_idx), dtype=np.float64)
        lo = np.asarray(apply(s - eps, b, h, q_idx, kv_idx), dtype=np.float64)
        return (hi - lo) / (2.0 * eps)

    return ScoreMod(apply, dapply, name=f"fd({smod.name})", captures=smod.captures)


def mod_from_mask(m: MaskMod) -> ScoreMod:
    """Express a mask as a score modifier (-inf where masked).

    Attention results are identical, but the engine cannot skip any blocks
    for a mask hidden inside a score modifier.
    """

    def apply(score, b, h, q_idx, kv_idx):
        return np.where(m(b, h, q_idx, kv_idx), score, NEG_INF)

    def dapply(score, b, h, q_idx, kv_idx):
        keep = np.asarray(m(b, h, q_idx, kv_idx), dtype=bool)
        return np.where(keep, 1.0, 0.0) + np.zeros_like(score, dtype=np.float64)

    return ScoreMod(apply, dapply, name=f"score({m.name})")


@dataclass
class AttentionOutput:
    out: np.ndarray  # (B, H_q, Q_LEN, D)
    lse: np.ndarray  # (B, H_q, Q_LEN); -inf on fully masked rows


@dataclass
class Gradients:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray


def default_workers() -> int:
    """Worker count from ``FLEXATTN_NUM_WORKERS`` (default 1)."""
    raw = os.environ.get("FLEXATTN_NUM_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class AttentionConfig:
    """Scale, GQA grouping and tile sizes for one attention call.

    ``scale=None`` means ``1/sqrt(D)``; ``gqa_group=None`` infers
    ``H_q // H_kv``.
    """

    scale: Optional[float] = None
    gqa_group: Optional[int] = None
    block_size_q: int = 128
    block_size_kv: int = 128
    num_workers: Optional[int] = None

    def __post_init__(self):
        if self.scale is not None and not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.gqa_group is not None and self.gqa_group < 1:
            raise ValueError(f"gqa_group must be >= 1, got {self.gqa_group}")
        if self.block_size_q < 1 or self.block_size_kv < 1:
            raise ValueError("block sizes must be >= 1")

    def scale_for(self, head_dim: int) -> float:
        return self.scale if self.scale is not None else 1.0 / math.sqrt(head_dim)

    def group_for(self, h_q: int, h_kv: int) -> int:
        if self.gqa_group is not None:
            return self.gqa_group
        return max(1, h_q // max(h_kv, 1))

    def workers(self) -> int:
        return self.num_workers if self.num_workers else default_workers()


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput(f"{name} contains NaN or Inf")


def validate_inputs(q, k, v, cfg: AttentionConfig) -> None:
    """Check shapes, GQA divisibility and finiteness of q, k, v.

    q must be (B, H_q, Q_LEN, D); k and v (B, H_kv, KV_LEN, D) with
    H_q == G * H_kv.
    """
    for name, x in (("q", q), ("k", k), ("v", v)):
        if np.ndim(x) != 4:
            raise ShapeMismatch(f"{name} must be 4-D (B, H, L, D), got shape {np.shape(x)}")
    bq, hq, _, dq = q.shape
    bk, hk, lk, dk = k.shape
    bv, hv, lv, dv = v.shape
    if bk != bq or bv != bq:
        raise ShapeMismatch(f"batch: q has {bq}, k has {bk}, v has {bv}")
    if hk != hv:
        raise ShapeMismatch(f"heads: k has {hk}, v has {hv}")
    if lk != lv:
        raise ShapeMismatch(f"kv length: k has {lk}, v has {lv}")
    if dk != dq or dv != dq:
        raise ShapeMismatch(f"feature dim: q has {dq}, k has {dk}, v has {dv}")
    g = cfg.group_for(hq, hk)
    if hk == 0 or hq != g * hk:
        raise ShapeMismatch(f"heads: H_q={hq} is not {g} * H_kv={hk}")
    _check_finite("q", q)
    _check_finite("k", k)
    _check_finite("v", v)


def working_dtype(q: np.ndarray) -> np.dtype:
    dt = np.asarray(q).dtype
    if dt in WORKING_DTYPES:
        return dt
    if np.issubdtype(dt, np.floating) or np.issubdtype(dt, np.integer):
        return np.dtype(np.float64)
    raise TypeError(f"unsupported dtype {dt}")
