"""Block-level sparsity index built from a mask modifier.

The score matrix of every (batch, head) is cut into ``bs_q x bs_kv`` tiles.
Each tile is EMPTY (mask false everywhere, never computed), FULL (mask true
everywhere, mask evaluation skipped) or PARTIAL (mask applied elementwise).
Per query-block row the index stores how many PARTIAL/FULL tiles there are
and which KV-block columns they sit in.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import MaskMod
from .errors import GeometryMismatch

EMPTY, PARTIAL, FULL = 0, 1, 2


def _cdiv(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class SparsityReport:
    total_blocks: int
    full_blocks: int
    partial_blocks: int
    empty_blocks: int

    @property
    def computed_blocks(self) -> int:
        return self.full_blocks + self.partial_blocks

    @property
    def density(self) -> float:
        return self.computed_blocks / self.total_blocks if self.total_blocks else 0.0


@dataclass(frozen=True, eq=False)
class BlockMask:
    block_size_q: int
    block_size_kv: int
    q_len: int
    kv_len: int
    partial_kv_num: np.ndarray      # (B_m, H_m, num_row)
    partial_kv_indices: np.ndarray  # (B_m, H_m, num_row, width)
    full_kv_num: np.ndarray
    full_kv_indices: np.ndarray
    source_mask: Optional[MaskMod] = None
    # Visit-order keys when indices are not logical positions (paged masks).
    partial_kv_order: Optional[np.ndarray] = None
    full_kv_order: Optional[np.ndarray] = None

    @property
    def num_row(self) -> int:
        return _cdiv(self.q_len, self.block_size_q)

    @property
    def num_col(self) -> int:
        return _cdiv(self.kv_len, self.block_size_kv)

    @property
    def shape(self) -> tuple:
        b, h, _ = self.partial_kv_num.shape
        return (b, h, self.num_row, self.num_col)

    def row_schedule(self, b: int, h: int, r: int):
        """KV-block columns of row ``r`` in visit order, with a FULL flag each.

        Visit order is ascending logical KV position over partial and full
        blocks together, so paged and unpaged runs do the same arithmetic.
        """
        bb = 0 if self.partial_kv_num.shape[0] == 1 else b
        hh = 0 if self.partial_kv_num.shape[1] == 1 else h
        npart = int(self.partial_kv_num[bb, hh, r])
        nfull = int(self.full_kv_num[bb, hh, r])
        cols = np.concatenate((self.partial_kv_indices[bb, hh, r, :npart],
                               self.full_kv_indices[bb, hh, r, :nfull]))
        is_full = np.zeros(npart + nfull, dtype=bool)
        is_full[npart:] = True
        if self.partial_kv_order is None:
            keys = cols
        else:
            keys = np.concatenate((self.partial_kv_order[bb, hh, r, :npart],
                                   self.full_kv_order[bb, hh, r, :nfull]))
        order = np.argsort(keys, kind="stable")
        return cols[order], is_full[order]

    def broadcast_index(self, b: int, h: int) -> tuple:
        return (0 if self.partial_kv_num.shape[0] == 1 else b,
                0 if self.partial_kv_num.shape[1] == 1 else h)


def from_dense(grid: np.ndarray, block_size_q: int, block_size_kv: int, q_len: int,
               kv_len: int, source_mask: Optional[MaskMod] = None) -> BlockMask:
    """Build the count/index arrays from a (B_m, H_m, rows, cols) classification grid."""
    grid = np.asarray(grid, dtype=np.int8)
    bm_, hm_, rows, cols = grid.shape

    def pack(kind):
        hit = grid == kind
        num = hit.sum(axis=-1).astype(np.int64)
        # stable argsort of ~hit moves hit columns to the front in ascending order
        order = np.argsort(~hit, axis=-1, kind="stable").astype(np.int64)
        width = np.arange(cols)
        idx = np.where(width < num[..., None], order, -1)
        return num, idx

    pnum, pidx = pack(PARTIAL)
    fnum, fidx = pack(FULL)
    return BlockMask(block_size_q, block_size_kv, q_len, kv_len, pnum, pidx, fnum, fidx,
                     source_mask=source_mask)


def to_dense(bm: BlockMask) -> np.ndarray:
    """Classification grid (EMPTY/PARTIAL/FULL) of shape (B_m, H_m, num_row, num_col)."""
    b_m, h_m, rows, cols = bm.shape
    grid = np.full((b_m, h_m, rows, cols), EMPTY, dtype=np.int8)
    for num, idx, kind in ((bm.partial_kv_num, bm.partial_kv_indices, PARTIAL),
                           (bm.full_kv_num, bm.full_kv_indices, FULL)):
        valid = np.arange(idx.shape[-1]) < num[..., None]
        bi, hi, ri, wi = np.nonzero(valid)
        grid[bi, hi, ri, idx[bi, hi, ri, wi]] = kind
    return grid


def create_block_mask(mask_mod: MaskMod, B: int, H: int, q_len: int, kv_len: int,
                      block_size_q: int = 128, block_size_kv: Optional[int] = None,
                      broadcast_b: bool = False, broadcast_h: bool = False) -> BlockMask:
    """Classify every tile by exhaustively evaluating ``mask_mod``.

    With ``broadcast_b``/``broadcast_h`` the mask is evaluated for index 0
    only and the resulting index is shared along that axis; the caller
    asserts the mask really ignores it.  Tiles that hang over the end of
    either sequence are never FULL.
    """
    if not isinstance(mask_mod, MaskMod):
        mask_mod = MaskMod(mask_mod)
    bs_q = int(block_size_q)
    bs_kv = int(block_size_kv if block_size_kv is not None else block_size_q)
    if bs_q < 1 or bs_kv < 1:
        raise ValueError("block sizes must be >= 1")
    req = mask_mod.required_len
    if req is not None and (q_len != req or kv_len != req):
        raise GeometryMismatch(
            f"mask {mask_mod.name} is defined for length {req}, got q_len={q_len}, kv_len={kv_len}")
    rows, cols = _cdiv(q_len, bs_q), _cdiv(kv_len, bs_kv)
    b_m = 1 if broadcast_b else B
    h_m = 1 if broadcast_h else H
    grid = np.empty((b_m, h_m, rows, cols), dtype=np.int8)
    kv = np.arange(kv_len)[None, :]
    pad = cols * bs_kv - kv_len
    for b in range(b_m):
        for h in range(h_m):
            for r in range(rows):
                q0, q1 = r * bs_q, min((r + 1) * bs_q, q_len)
                q = np.arange(q0, q1)[:, None]
                m = np.broadcast_to(np.asarray(mask_mod(b, h, q, kv), dtype=bool), (q1 - q0, kv_len))
                if pad:
                    m = np.concatenate((m, np.zeros((q1 - q0, pad), dtype=bool)), axis=1)
                tiles = m.reshape(q1 - q0, cols, bs_kv)
                any_ = tiles.any(axis=(0, 2))
                all_ = tiles.all(axis=(0, 2)) & (q1 - q0 == bs_q)
                grid[b, h, r] = np.where(all_, FULL, np.where(any_, PARTIAL, EMPTY))
    return from_dense(grid, bs_q, bs_kv, q_len, kv_len, source_mask=mask_mod)


def _transpose_mask(m: Optional[MaskMod]) -> Optional[MaskMod]:
    if m is None:
        return None
    return MaskMod(lambda b, h, q, kv: m(b, h, kv, q), name=f"T({m.name})")


def transpose(bm: BlockMask) -> BlockMask:
    """Index of q-blocks per kv-block row; used by the dK/dV pass."""
    if bm.partial_kv_order is not None:
        raise ValueError("cannot transpose a paged (physically indexed) block mask")
    grid = np.swapaxes(to_dense(bm), -1, -2)
    return from_dense(grid, bm.block_size_kv, bm.block_size_q, bm.kv_len, bm.q_len,
                      source_mask=_transpose_mask(bm.source_mask))


def sparsity(bm: BlockMask) -> SparsityReport:
    total = int(np.prod(bm.shape))
    full = int(bm.full_kv_num.sum())
    partial = int(bm.partial_kv_num.sum())
    return SparsityReport(total, full, partial, total - full - partial)


def demote_full(bm: BlockMask) -> BlockMask:
    """Same mask with every FULL tile reclassified PARTIAL (mask always evaluated)."""
    grid = to_dense(bm)
    grid[grid == FULL] = PARTIAL
    return replace(from_dense(grid, bm.block_size_q, bm.block_size_kv, bm.q_len, bm.kv_len),
                   source_mask=bm.source_mask)


def force_dense(bm: BlockMask) -> BlockMask:
    """Same mask with every EMPTY tile reclassified PARTIAL (no tile skipped)."""
    grid = to_dense(bm)
    grid[grid == EMPTY] = PARTIAL
    return replace(from_dense(grid, bm.block_size_q, bm.block_size_kv, bm.q_len, bm.kv_len),
                   source_mask=bm.source_mask)


def same_classification(a: BlockMask, b: BlockMask) -> bool:
    return (a.block_size_q, a.block_size_kv, a.q_len, a.kv_len) == \
        (b.block_size_q, b.block_size_kv, b.q_len, b.kv_len) and \
        np.array_equal(to_dense(a), to_dense(b))


# --- serialization --------------------------------------------------------

_HEADER = struct.Struct("<8q")


def to_bytes(bm: BlockMask) -> bytes:
    """Flat little-endian layout.

    Header: B_m, H_m, num_row, width, bs_q, bs_kv, q_len, kv_len as int64,
    followed by partial_num, partial_indices, full_num, full_indices as
    int64 C-order arrays.  The source mask is not serialized.
    """
    b_m, h_m, rows = bm.partial_kv_num.shape
    width = bm.partial_kv_indices.shape[-1]
    head = _HEADER.pack(b_m, h_m, rows, width, bm.block_size_q, bm.block_size_kv,
                        bm.q_len, bm.kv_len)
    body = b"".join(np.ascontiguousarray(a, dtype="<i8").tobytes() for a in
                    (bm.partial_kv_num, bm.partial_kv_indices, bm.full_kv_num, bm.full_kv_indices))
    return head + body


def from_bytes(data: bytes, source_mask: Optional[MaskMod] = None) -> BlockMask:
    b_m, h_m, rows, width, bs_q, bs_kv, q_len, kv_len = _HEADER.unpack_from(data, 0)
    off = _HEADER.size
    arrays = []
    for shape in ((b_m, h_m, rows), (b_m, h_m, rows, width)) * 2:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<i8", count=n, offset=off).astype(np.int64).reshape(shape))
        off += 8 * n
    if off != len(data):
        raise ValueError(f"trailing bytes in block mask payload ({len(data) - off})")
    return BlockMask(bs_q, bs_kv, q_len, kv_len, *arrays, source_mask=source_mask)


# --- rendering ------------------------------------------------------------

_GLYPH = {EMPTY: "□", PARTIAL: "▒", FULL: "█"}
_COLOR = {EMPTY: (255, 255, 255), PARTIAL: (240, 200, 40), FULL: (40, 150, 60)}


def render_ascii(bm: BlockMask, b: int = 0, h: int = 0) -> str:
    grid = to_dense(bm)[bm.broadcast_index(b, h)]
    return "\n".join("".join(_GLYPH[int(c)] for c in row) for row in grid) + "\n"


def render_ppm(bm: BlockMask, b: int = 0, h: int = 0, cell: int = 4) -> bytes:
    """Binary PPM (P6) image, one ``cell x cell`` square per tile."""
    grid = to_dense(bm)[bm.broadcast_index(b, h)]
    palette = np.array([_COLOR[EMPTY], _COLOR[PARTIAL], _COLOR[FULL]], dtype=np.uint8)
    img = palette[grid.astype(np.intp)]
    img = np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)
    hgt, wid = img.shape[:2]
    return f"P6\n{wid} {hgt}\n255\n".encode("ascii") + img.tobytes()
