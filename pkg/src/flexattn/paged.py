"""Paged KV cache and the conversions that let the unmodified engine read it.

The physical cache is one shared ``(1, H_kv, num_pages * page_size, D)``
buffer.  A page table maps (batch, logical page) to a physical page, and an
inverse vector maps each physical page back to its logical page and owner.
The page size equals the engine's KV block size, so one index indirection
serves both block sparsity and paging.

Mutation (assign/append/erase) is single-writer; attention calls may read
the cache concurrently only between mutations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .block_mask import BlockMask
from .core import AttentionConfig, AttentionOutput, MaskMod, ScoreMod
from .engine import Counters, _check_block_mask, _forward_core
from .errors import ShapeMismatch, OutOfPages, UnmappedBlock, UnmappedPhysicalIndex
from .masks import noop_mask, noop_score

SENTINEL = -1


@dataclass(frozen=True)
class PageTable:
    """Immutable snapshot of the mapping in both directions."""

    table: np.ndarray            # (B, max_logical_pages) physical page or SENTINEL
    phys_to_logical: np.ndarray  # (num_pages,) logical page or SENTINEL
    owner: np.ndarray            # (num_pages,) batch index or SENTINEL
    seq_len: np.ndarray          # (B,) valid tokens per batch
    page_size: int

    @classmethod
    def identity(cls, batch: int, pages_per_batch: int, page_size: int, seq_len=None) -> "PageTable":
        """Batch ``b`` owns physical pages ``b*P .. b*P+P-1`` in order."""
        n = batch * pages_per_batch
        table = np.arange(n, dtype=np.int64).reshape(batch, pages_per_batch)
        p2l = np.tile(np.arange(pages_per_batch, dtype=np.int64), batch)
        owner = np.repeat(np.arange(batch, dtype=np.int64), pages_per_batch)
        if seq_len is None:
            seq_len = np.full(batch, pages_per_batch * page_size, dtype=np.int64)
        return cls(table, p2l, owner, np.asarray(seq_len, dtype=np.int64), page_size)

    @property
    def num_pages(self) -> int:
        return self.phys_to_logical.shape[0]

    def check(self) -> None:
        """Raise AssertionError unless table and inverse are mutually consistent."""
        mapped = self.table[self.table != SENTINEL]
        assert len(np.unique(mapped)) == mapped.size, "physical page mapped twice"
        for b, row in enumerate(self.table):
            for lp, pp in enumerate(row):
                if pp != SENTINEL:
                    assert self.phys_to_logical[pp] == lp and self.owner[pp] == b
        for pp in np.nonzero(self.phys_to_logical != SENTINEL)[0]:
            assert self.table[self.owner[pp], self.phys_to_logical[pp]] == pp
        for b in range(self.table.shape[0]):
            pages = int(np.sum(self.table[b] != SENTINEL))
            assert self.seq_len[b] <= pages * self.page_size


class PagedKVCache:
    """Shared physical KV storage with per-batch page allocation."""

    def __init__(self, num_pages: int, page_size: int, num_heads: int, head_dim: int,
                 max_batch: int, dtype=np.float32, rng: Optional[np.random.Generator] = None):
        self.page_size = page_size
        self.num_pages = num_pages
        self.k_phys = np.zeros((1, num_heads, num_pages * page_size, head_dim), dtype=dtype)
        self.v_phys = np.zeros_like(self.k_phys)
        self.max_logical_pages = num_pages
        self.table = np.full((max_batch, num_pages), SENTINEL, dtype=np.int64)
        self.phys_to_logical = np.full(num_pages, SENTINEL, dtype=np.int64)
        self.owner = np.full(num_pages, SENTINEL, dtype=np.int64)
        self.seq_len = np.zeros(max_batch, dtype=np.int64)
        self.free_pages = set(range(num_pages))
        # with an rng, pages are handed out in random order (exercises scattering)
        self._rng = rng

    def pages_of(self, b: int) -> int:
        return int(np.sum(self.table[b] != SENTINEL))

    def _take_page(self) -> int:
        if self._rng is None:
            page = min(self.free_pages)
        else:
            page = int(self._rng.choice(sorted(self.free_pages)))
        self.free_pages.remove(page)
        return page

    def _write(self, b: int, start: int, k_new: np.ndarray, v_new: np.ndarray) -> None:
        ps = self.page_size
        n = k_new.shape[1]
        pos = np.arange(start, start + n)
        phys = self.table[b, pos // ps] * ps + pos % ps
        self.k_phys[0][:, phys] = k_new
        self.v_phys[0][:, phys] = v_new

    def _check_tokens(self, k_new, v_new):
        k_new = np.asarray(k_new, dtype=self.k_phys.dtype)
        v_new = np.asarray(v_new, dtype=self.k_phys.dtype)
        want = (self.k_phys.shape[1], self.k_phys.shape[3])
        if k_new.ndim != 3 or k_new.shape != v_new.shape or (k_new.shape[0], k_new.shape[2]) != want:
            raise ShapeMismatch(f"tokens must be (H_kv, n, D) with H_kv, D = {want}, got {k_new.shape}, {v_new.shape}")
        return k_new, v_new

    def assign(self, b: int, k_tokens, v_tokens) -> None:
        """Replace batch ``b``'s sequence with ``k_tokens``/``v_tokens`` of shape (H_kv, n, D)."""
        k_tokens, v_tokens = self._check_tokens(k_tokens, v_tokens)
        n = k_tokens.shape[1]
        need = -(-n // self.page_size)
        if need > len(self.free_pages) + self.pages_of(b):
            raise OutOfPages(f"batch {b} needs {need} pages, {len(self.free_pages)} free")
        self.erase(b)
        for lp in range(need):
            pp = self._take_page()
            self.table[b, lp] = pp
            self.phys_to_logical[pp] = lp
            self.owner[pp] = b
        self.seq_len[b] = n
        if n:
            self._write(b, 0, k_tokens, v_tokens)

    def erase(self, b: int) -> None:
        row = self.table[b]
        for pp in row[row != SENTINEL]:
            self.phys_to_logical[pp] = SENTINEL
            self.owner[pp] = SENTINEL
            self.free_pages.add(int(pp))
        row[:] = SENTINEL
        self.seq_len[b] = 0

    def append_tokens(self, b: int, k_new, v_new) -> None:
        k_new, v_new = self._check_tokens(k_new, v_new)
        n = k_new.shape[1]
        start = int(self.seq_len[b])
        have = self.pages_of(b)
        need = -(-(start + n) // self.page_size) - have
        if need > len(self.free_pages):
            raise OutOfPages(f"batch {b} needs {need} more pages, {len(self.free_pages)} free")
        for lp in range(have, have + need):
            pp = self._take_page()
            self.table[b, lp] = pp
            self.phys_to_logical[pp] = lp
            self.owner[pp] = b
        self.seq_len[b] = start + n
        if n:
            self._write(b, start, k_new, v_new)

    def read_logical(self, b: int):
        """Batch ``b``'s K and V gathered back into logical order, (H_kv, seq_len, D)."""
        ps = self.page_size
        pos = np.arange(int(self.seq_len[b]))
        phys = self.table[b, pos // ps] * ps + pos % ps
        return self.k_phys[0][:, phys], self.v_phys[0][:, phys]

    def page_table(self, batch: Optional[int] = None) -> PageTable:
        """Snapshot for the first ``batch`` rows (all rows by default)."""
        rows = self.table.shape[0] if batch is None else batch
        return PageTable(self.table[:rows].copy(), self.phys_to_logical.copy(), self.owner.copy(),
                         self.seq_len[:rows].copy(), self.page_size)


_UNOWNED = np.iinfo(np.int64).max
_INDEX_BITS = (1 << 62) - 1


@dataclass(frozen=True)
class _TokenLookup:
    """Per-batch gather tables for the converted modifiers.

    ``logical[b][phys]`` is the logical token index, or an out-of-bounds
    value when batch ``b`` does not own that page, so the checked path's
    second gather (``clamped``/``valid``, indexed by logical token) raises
    instead of needing a reduction on every tile.  ``phys_clamped`` and
    ``phys_valid`` go straight from physical index to the answer for callers
    that validated page ownership up front.
    """

    logical: list
    clamped: list
    valid: list
    phys_clamped: list
    phys_valid: list

    @classmethod
    def build(cls, pt: PageTable) -> "_TokenLookup":
        ps = pt.page_size
        phys = np.arange(pt.num_pages * ps)
        blk = phys // ps
        lg = pt.phys_to_logical[blk] * ps + phys % ps
        pos = np.arange(pt.table.shape[1] * ps)
        out = cls([], [], [], [], [])
        for b in range(pt.table.shape[0]):
            owned = (pt.owner[blk] == b) & (pt.phys_to_logical[blk] != SENTINEL)
            n = int(pt.seq_len[b])
            out.logical.append(np.where(owned, lg, _UNOWNED))
            out.clamped.append(np.minimum(pos, max(n - 1, 0)))
            out.valid.append(pos < n)
            out.phys_clamped.append(np.where(owned, np.minimum(lg, max(n - 1, 0)), 0))
            out.phys_valid.append(owned & (lg < n))
        return out


def _logical_kv(lookup: _TokenLookup, b: int, kv):
    """Map physical token indices of batch ``b`` to (clamped logical index, in-range flag)."""
    # clearing the top bits turns negative indices into huge, out-of-bounds ones
    idx = np.bitwise_and(np.asarray(kv, dtype=np.int64), _INDEX_BITS)
    try:
        lg = lookup.logical[b][idx]
    except IndexError:
        raise UnmappedPhysicalIndex("physical index outside the cache") from None
    try:
        return lookup.clamped[b][lg], lookup.valid[b][lg]
    except IndexError:
        raise UnmappedPhysicalIndex(f"batch {b} touched a physical page it does not own") from None


def convert_mods(mask_mod: Optional[MaskMod], score_mod: Optional[ScoreMod], pt: PageTable,
                 checked: bool = True):
    """Rewrite modifiers to take physical KV indices.

    The converted mask also rejects positions at or past the sequence's true
    end, which live in the unused tail of its last page.  With
    ``checked=False`` page ownership is not re-validated per call; only use
    it when every physical index passed in is known to be owned.
    """
    mm = mask_mod or noop_mask()
    sm = score_mod or noop_score()
    lookup = _TokenLookup.build(pt)

    if checked:
        def logical_kv(b, kv):
            return _logical_kv(lookup, b, kv)

        def logical_only(b, kv):
            return _logical_kv(lookup, b, kv)[0]
    else:
        pc, pv = lookup.phys_clamped, lookup.phys_valid

        def logical_kv(b, kv):
            return pc[b][kv], pv[b][kv]

        def logical_only(b, kv):
            return pc[b][kv]

    def mask_fn(b, h, q, kv):
        logical, valid = logical_kv(b, kv)
        return np.logical_and(mm(b, h, q, logical), valid)

    cmask = MaskMod(mask_fn, name=f"paged({mm.name})")
    if sm.identity:
        return cmask, sm
    inner_apply, inner_dapply = sm.apply, sm.dapply

    def apply(score, b, h, q, kv):
        return inner_apply(score, b, h, q, logical_only(b, kv))

    dapply = None
    if inner_dapply is not None:
        def dapply(score, b, h, q, kv):
            return inner_dapply(score, b, h, q, logical_only(b, kv))

    return cmask, ScoreMod(apply, dapply, name=f"paged({sm.name})")


def _check_ownership(bm: BlockMask, pt: PageTable) -> None:
    """Every physical page a converted mask lists must belong to that batch."""
    for kind in ("partial", "full"):
        num = getattr(bm, f"{kind}_kv_num")
        idx = getattr(bm, f"{kind}_kv_indices")
        used = np.arange(idx.shape[-1]) < num[..., None]
        bi = np.broadcast_to(np.arange(idx.shape[0])[:, None, None, None], idx.shape)
        pages = idx[used]
        if pages.size and (pages.min() < 0 or pages.max() >= pt.num_pages):
            raise UnmappedPhysicalIndex("block mask lists a page outside the cache")
        if np.any(pt.owner[pages] != bi[used]):
            raise UnmappedPhysicalIndex("block mask lists a page its batch does not own")


def convert_block_mask(bm: BlockMask, pt: PageTable) -> BlockMask:
    """Swap logical KV-block indices for physical page ids; counts stay as they are.

    The original logical indices are kept as the visit-order keys so the
    engine walks pages in logical order.
    """
    if bm.block_size_kv != pt.page_size:
        raise ValueError(f"block_size_kv {bm.block_size_kv} != page_size {pt.page_size}")
    B = pt.table.shape[0]
    b_m, h_m, rows = bm.partial_kv_num.shape
    if b_m not in (1, B):
        raise ValueError(f"block mask batch dim {b_m} does not match page table rows {B}")

    def expand(a):
        return np.broadcast_to(a, (B,) + a.shape[1:]).copy()

    out = {}
    for kind in ("partial", "full"):
        num = expand(getattr(bm, f"{kind}_kv_num"))
        logical = expand(getattr(bm, f"{kind}_kv_indices"))
        phys = np.full_like(logical, SENTINEL)
        used = np.arange(logical.shape[-1]) < num[..., None]
        for b in range(B):
            li = logical[b][used[b]]
            if li.size and li.max() >= pt.table.shape[1]:
                raise UnmappedBlock(f"batch {b} references logical page {li.max()} beyond the table")
            pp = pt.table[b, li]
            if np.any(pp == SENTINEL):
                raise UnmappedBlock(f"batch {b} references a logical page with no physical backing")
            phys[b][used[b]] = pp
        out[f"{kind}_kv_num"] = num
        out[f"{kind}_kv_indices"] = phys
        out[f"{kind}_kv_order"] = np.where(used, logical, np.iinfo(np.int64).max)
    src = None
    if bm.source_mask is not None:
        src = convert_mods(bm.source_mask, None, pt)[0]
    return replace(bm, kv_len=pt.num_pages * pt.page_size, source_mask=src, **out)


def paged_forward(q, cache: PagedKVCache, block_mask: BlockMask, score_mod: Optional[ScoreMod] = None,
                  cfg: Optional[AttentionConfig] = None, counters: Optional[Counters] = None,
                  page_table: Optional[PageTable] = None, converted: Optional[BlockMask] = None) -> AttentionOutput:
    """Attention of ``q`` over the paged cache, given a *logical* block mask.

    ``block_mask`` is built over logical KV positions (its ``kv_len`` is the
    longest sequence).  Pass a precomputed ``converted`` mask to keep the
    conversion out of timed regions.
    """
    cfg = cfg or AttentionConfig()
    q = np.ascontiguousarray(q, dtype=cache.k_phys.dtype)
    B, H, q_len, D = q.shape
    pt = page_table or cache.page_table(B)
    if converted is None:
        converted = convert_block_mask(block_mask, pt)
    _check_block_mask(converted, B, H, q_len, pt.num_pages * pt.page_size)
    _check_ownership(converted, pt)
    _, smod = convert_mods(None, score_mod, pt, checked=False)
    h_kv = cache.k_phys.shape[1]
    if H % h_kv or D != cache.k_phys.shape[3]:
        raise ShapeMismatch(f"q heads/dim {H}/{D} incompatible with cache {h_kv}/{cache.k_phys.shape[3]}")
    return _forward_core(q, cache.k_phys, cache.v_phys, smod, converted, cfg.scale_for(D),
                         cfg.group_for(H, h_kv), converted.kv_len, counters, cfg.workers())
