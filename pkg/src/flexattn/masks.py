"""Library of attention variants plus composition and index-remapping helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import MaskMod, ScoreMod
from .errors import GeometryMismatch, IndexOutOfRange, NonPositiveCap


def _ones_like_score(score):
    return np.ones_like(np.asarray(score, dtype=np.float64))


# --- masks ----------------------------------------------------------------


def noop_mask() -> MaskMod:
    return MaskMod(lambda b, h, q, kv: np.True_, name="noop")


def causal() -> MaskMod:
    return MaskMod(lambda b, h, q, kv: q >= kv, name="causal")


def sliding_window(window: int) -> MaskMod:
    """Causal band: each query sees itself and the ``window`` tokens before it."""
    if window < 0:
        raise ValueError(f"window must be >= 0, got {window}")

    def fn(b, h, q, kv):
        return (q >= kv) & (q - kv <= window)

    return MaskMod(fn, name=f"sliding_window({window})")


def symmetric_window(window: int) -> MaskMod:
    """Bidirectional band ``|q - kv| <= window``."""
    if window < 0:
        raise ValueError(f"window must be >= 0, got {window}")
    return MaskMod(lambda b, h, q, kv: np.abs(q - kv) <= window,
                   name=f"symmetric_window({window})")


def _gather(ids: np.ndarray, idx, what: str):
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= ids.shape[0]):
        raise IndexOutOfRange(f"{what} index outside [0, {ids.shape[0]})")
    return ids[idx]


def document_mask(doc_ids) -> MaskMod:
    """Tokens only attend within their own packed document."""
    ids = np.asarray(doc_ids, dtype=np.int64).copy()
    ids.setflags(write=False)

    def fn(b, h, q, kv):
        return _gather(ids, q, "q") == _gather(ids, kv, "kv")

    return MaskMod(fn, name="document", captures=(ids,))


def prefix_mask(prefix_len: int) -> MaskMod:
    return MaskMod(lambda b, h, q, kv: kv < prefix_len, name=f"prefix({prefix_len})")


def prefix_lm(prefix_len: int) -> MaskMod:
    """Bidirectional over the first ``prefix_len`` tokens, causal afterwards."""
    m = or_mask(prefix_mask(prefix_len), causal())
    return MaskMod(m.fn, name=f"prefix_lm({prefix_len})")


def length_mask(seq_lens) -> MaskMod:
    """Per-batch valid KV length (``kv < seq_lens[b]``)."""
    lens = np.asarray(seq_lens, dtype=np.int64).copy()
    lens.setflags(write=False)
    return MaskMod(lambda b, h, q, kv: kv < lens[b], name="length", captures=(lens,))


# --- combinators ----------------------------------------------------------


def _required(a: MaskMod, b: MaskMod):
    if a.required_len is not None and b.required_len is not None and a.required_len != b.required_len:
        raise GeometryMismatch(f"cannot combine masks for lengths {a.required_len} and {b.required_len}")
    return a.required_len if a.required_len is not None else b.required_len


def and_mask(a: MaskMod, b: MaskMod) -> MaskMod:
    def fn(bi, h, q, kv):
        return np.logical_and(a(bi, h, q, kv), b(bi, h, q, kv))

    return MaskMod(fn, name=f"and({a.name},{b.name})", required_len=_required(a, b))


def or_mask(a: MaskMod, b: MaskMod) -> MaskMod:
    def fn(bi, h, q, kv):
        return np.logical_or(a(bi, h, q, kv), b(bi, h, q, kv))

    return MaskMod(fn, name=f"or({a.name},{b.name})", required_len=_required(a, b))


def offset_mask(m: MaskMod, offset: int) -> MaskMod:
    """Shift query positions by ``offset`` so a decode step sees absolute indices.

    The result covers fewer query rows than the original, so any
    ``required_len`` is dropped.
    """
    if offset < 0:
        raise ValueError(f"offset must be >= 0, got {offset}")
    if offset == 0 and m.required_len is None:
        return m

    def fn(b, h, q, kv):
        return m(b, h, q + offset, kv)

    return MaskMod(fn, name=f"offset({m.name},{offset})")


def offset_score(s: ScoreMod, offset: int) -> ScoreMod:
    if offset < 0:
        raise ValueError(f"offset must be >= 0, got {offset}")
    if offset == 0 or s.identity:
        return s

    def apply(score, b, h, q, kv):
        return s.apply(score, b, h, q + offset, kv)

    dapply = None
    if s.dapply is not None:
        def dapply(score, b, h, q, kv):
            return s.dapply(score, b, h, q + offset, kv)

    return ScoreMod(apply, dapply, name=f"offset({s.name},{offset})")


# --- score modifiers ------------------------------------------------------


def noop_score() -> ScoreMod:
    return ScoreMod(lambda score, b, h, q, kv: score,
                    lambda score, b, h, q, kv: _ones_like_score(score),
                    name="noop", identity=True)


def alibi_slopes(num_heads: int) -> np.ndarray:
    """Conventional geometric ALiBi slopes ``-2**(-8 (h+1) / H)``."""
    h = np.arange(num_heads, dtype=np.float64)
    return -np.exp2(-8.0 * (h + 1) / num_heads)


def alibi(slopes) -> ScoreMod:
    """``score + slopes[h] * (q - kv)``; pass negative slopes to penalise distance."""
    sl = np.asarray(slopes, dtype=np.float64).copy()
    sl.setflags(write=False)

    def slope(h):
        if isinstance(h, int):  # the engine's per-tile call
            if not 0 <= h < sl.shape[0]:
                raise IndexOutOfRange(f"head index outside [0, {sl.shape[0]})")
            return sl[h]
        if np.any(np.asarray(h) < 0) or np.any(np.asarray(h) >= sl.shape[0]):
            raise IndexOutOfRange(f"head index outside [0, {sl.shape[0]})")
        return sl[h]

    def apply(score, b, h, q, kv):
        return score + slope(h) * (q - kv)

    def dapply(score, b, h, q, kv):
        return _ones_like_score(score)

    return ScoreMod(apply, dapply, name="alibi", captures=(sl,))


def soft_cap(cap: float) -> ScoreMod:
    """``cap * tanh(score / cap)``."""
    if not cap > 0:
        raise NonPositiveCap(f"soft cap must be positive, got {cap}")

    def apply(score, b, h, q, kv):
        return cap * np.tanh(score / cap)

    def dapply(score, b, h, q, kv):
        t = np.tanh(np.asarray(score, dtype=np.float64) / cap)
        return 1.0 - t * t

    return ScoreMod(apply, dapply, name=f"soft_cap({cap:g})")


# --- neighborhood attention ----------------------------------------------


@dataclass(frozen=True)
class NAGeometry:
    canvas_h: int
    canvas_w: int
    kernel: int

    def __post_init__(self):
        if self.canvas_h < 1 or self.canvas_w < 1:
            raise GeometryMismatch("canvas dimensions must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise GeometryMismatch(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.kernel > min(self.canvas_h, self.canvas_w):
            raise GeometryMismatch(
                f"kernel {self.kernel} larger than canvas {self.canvas_h}x{self.canvas_w}")

    @property
    def area(self) -> int:
        return self.canvas_h * self.canvas_w


@dataclass(frozen=True)
class Permutation:
    """``forward[slot]`` is the original token index stored at ``slot``."""

    forward: np.ndarray

    def __post_init__(self):
        fwd = np.asarray(self.forward, dtype=np.int64)
        n = fwd.shape[0]
        if fwd.ndim != 1 or not np.array_equal(np.sort(fwd), np.arange(n)):
            raise ValueError("permutation must be a bijection on [0, N)")
        fwd = fwd.copy()
        fwd.setflags(write=False)
        object.__setattr__(self, "forward", fwd)

    def __len__(self) -> int:
        return self.forward.shape[0]

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.forward)
        inv[self.forward] = np.arange(len(self))
        return inv

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))


def na_naive(g: NAGeometry) -> MaskMod:
    """Centered (non-clamped) k x k window on a row-major flattened canvas."""
    r = g.kernel // 2
    w = g.canvas_w
    area = g.area

    def fn(b, h, q, kv):
        q = np.asarray(q)
        kv = np.asarray(kv)
        for name, idx in (("q", q), ("kv", kv)):
            if idx.size and (idx.min() < 0 or idx.max() >= area):
                raise GeometryMismatch(f"{name} index outside the {g.canvas_h}x{g.canvas_w} canvas")
        iq, jq = np.divmod(q, w)
        ik, jk = np.divmod(kv, w)
        return (np.abs(iq - ik) <= r) & (np.abs(jq - jk) <= r)

    return MaskMod(fn, name=f"na({g.canvas_h}x{g.canvas_w},k={g.kernel})", required_len=area)


def tile_permutation(g: NAGeometry, tile: int) -> Permutation:
    """Group pixels into contiguous ``tile x tile`` tiles (tiles and pixels row-major)."""
    if tile < 1 or g.canvas_h % tile or g.canvas_w % tile:
        raise GeometryMismatch(f"tile {tile} does not divide canvas {g.canvas_h}x{g.canvas_w}")
    rows = np.arange(g.canvas_h).reshape(g.canvas_h // tile, tile)
    cols = np.arange(g.canvas_w).reshape(g.canvas_w // tile, tile)
    # axes: (tile_row, tile_col, row_in_tile, col_in_tile)
    pix = rows[:, None, :, None] * g.canvas_w + cols[None, :, None, :]
    return Permutation(pix.reshape(-1))


def _interleave(row: np.ndarray, col: np.ndarray, bits: int) -> np.ndarray:
    out = np.zeros_like(row)
    for i in range(bits):
        out |= ((col >> i) & 1) << (2 * i)
        out |= ((row >> i) & 1) << (2 * i + 1)
    return out


def morton_permutation(g: NAGeometry) -> Permutation:
    """Z-order slots; row bits take the higher position of each bit pair."""
    n = g.canvas_h
    if g.canvas_w != n or n & (n - 1):
        raise GeometryMismatch(f"Morton order needs an equal power-of-two canvas, got {g.canvas_h}x{g.canvas_w}")
    bits = n.bit_length() - 1
    pixel = np.arange(g.area, dtype=np.int64)
    slot = _interleave(pixel // n, pixel % n, bits)
    fwd = np.empty_like(slot)
    fwd[slot] = pixel
    return Permutation(fwd)


def remap_mask(m: MaskMod, p: Permutation) -> MaskMod:
    """Evaluate ``m`` on the original token indices stored at each slot."""
    fwd = p.forward
    n = len(p)

    def fn(b, h, q, kv):
        return m(b, h, _gather(fwd, q, "q"), _gather(fwd, kv, "kv"))

    req = m.required_len if m.required_len is not None else n
    if req != n:
        raise GeometryMismatch(f"permutation over {n} tokens applied to a mask over {req}")
    return MaskMod(fn, name=f"remap({m.name})", required_len=n, captures=(fwd,))


def na_tiled(g: NAGeometry, tile: int) -> MaskMod:
    return remap_mask(na_naive(g), tile_permutation(g, tile))


def na_morton(g: NAGeometry) -> MaskMod:
    return remap_mask(na_naive(g), morton_permutation(g))
