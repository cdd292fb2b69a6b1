"""Tiled, block-sparse attention: forward, backward and decode.

Every (batch, q-head) walks its query-block rows; each row folds the KV
tiles listed in the block mask into an online softmax.  The score modifier
runs on every visited tile, the mask modifier only on PARTIAL tiles.  The
per-tile softmax bookkeeping lives in :mod:`flexattn.kernels` (compiled when
available); the two matmuls per tile go through BLAS.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import kernels
from .block_mask import BlockMask, create_block_mask, transpose
from .core import (AttentionConfig, AttentionOutput, Gradients, MaskMod, ScoreMod, validate_inputs,
                   working_dtype)
from .errors import BlockMaskMismatch, OffsetOutOfRange, ShapeMismatch, StaleStatistics
from .masks import noop_mask, noop_score, offset_mask, offset_score


@dataclass
class Counters:
    """Work done by one call.

    ``madds`` counts multiply-adds of the tile matmuls, ``mask_evals`` and
    ``score_evals`` the score positions each modifier was evaluated on.
    """

    madds: int = 0
    mask_evals: int = 0
    score_evals: int = 0
    blocks: int = 0

    def add(self, other: "Counters") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))


def _pad_kv(x: np.ndarray, bs: int) -> np.ndarray:
    n = x.shape[2]
    extra = -n % bs
    if not extra:
        return x
    pad = np.zeros(x.shape[:2] + (extra, x.shape[3]), dtype=x.dtype)
    return np.concatenate((x, pad), axis=2)


def _check_block_mask(bm: BlockMask, B: int, H: int, q_len: int, kv_len: int) -> None:
    b_m, h_m, _, _ = bm.shape
    if bm.q_len != q_len or bm.kv_len != kv_len:
        raise BlockMaskMismatch(
            f"block mask built for q_len={bm.q_len}, kv_len={bm.kv_len}; tensors have {q_len}, {kv_len}")
    if b_m not in (1, B) or h_m not in (1, H):
        raise BlockMaskMismatch(f"block mask batch/head dims ({b_m}, {h_m}) do not broadcast to ({B}, {H})")


def _run(tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [t() for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda t: t(), tasks))


def _writable_tile(x, shape, dtype) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.shape != shape:
        return np.array(np.broadcast_to(x, shape))
    if not (x.flags.c_contiguous and x.flags.writeable):
        return np.array(x, order="C")
    return x


class _TileContext:
    """Evaluates modifiers on one tile, handling KV tiles that hang past the end."""

    def __init__(self, smod: ScoreMod, mask: Optional[MaskMod], bs_kv: int, valid_kv: int, dtype):
        self.smod = smod
        self.mask = mask
        self.bs_kv = bs_kv
        self.valid_kv = valid_kv
        self.dtype = dtype

    def kv_index(self, c: int):
        k0 = c * self.bs_kv
        kvi = np.arange(k0, k0 + self.bs_kv)[None, :]
        if k0 + self.bs_kv > self.valid_kv:
            return np.minimum(kvi, self.valid_kv - 1), kvi < self.valid_kv
        return kvi, None

    def modify(self, s, b, h, qi, kvi, cnt: Counters):
        if self.smod.identity:
            return s
        cnt.score_evals += s.size
        return _writable_tile(self.smod.apply(s, b, h, qi, kvi), s.shape, self.dtype)

    def score_grad(self, s_raw, b, h, qi, kvi):
        if self.smod.identity:
            return None
        return _writable_tile(self.smod.grad(s_raw, b, h, qi, kvi), s_raw.shape, self.dtype)

    def keep(self, shape, b, h, qi, kvi, in_range, cnt: Counters):
        if self.mask is None:
            raise BlockMaskMismatch("block mask has PARTIAL blocks but no source mask")
        cnt.mask_evals += shape[0] * shape[1]
        mk = np.asarray(self.mask(b, h, qi, kvi), dtype=bool)
        if in_range is not None:
            mk = mk & in_range
        return np.ascontiguousarray(np.broadcast_to(mk, shape)).view(np.uint8)


def _forward_core(q, k, v, smod: ScoreMod, bm: BlockMask, scale: float, group: int,
                  valid_kv: int, counters: Optional[Counters], workers: int) -> AttentionOutput:
    """Forward over pre-validated arrays; ``k``/``v`` may have batch 1 (shared cache)."""
    dt = q.dtype
    B, H, q_len, D = q.shape
    bs_q, bs_kv = bm.block_size_q, bm.block_size_kv
    kp = _pad_kv(k, bs_kv)
    vp = _pad_kv(v, bs_kv)
    out = np.zeros_like(q)
    lse = np.full((B, H, q_len), -np.inf, dtype=dt)
    tile = _TileContext(smod, bm.source_mask, bs_kv, valid_kv, dt)
    kern = kernels.current()

    def head(b, h):
        cnt = Counters()
        kb = b if kp.shape[0] > 1 else 0
        Kh = kp[kb, h // group]
        Vh = vp[kb, h // group]
        for r in range(bm.num_row):
            q0, q1 = r * bs_q, min((r + 1) * bs_q, q_len)
            nq = q1 - q0
            Qt = q[b, h, q0:q1]
            qi = np.arange(q0, q1)[:, None]
            m = np.full(nq, -np.inf, dtype=dt)
            l = np.zeros(nq, dtype=dt)
            acc = np.zeros((nq, D), dtype=dt)
            cols, fulls = bm.row_schedule(b, h, r)
            for c, full in zip(cols.tolist(), fulls.tolist()):
                k0 = c * bs_kv
                Kt = Kh[k0:k0 + bs_kv]
                Vt = Vh[k0:k0 + bs_kv]
                s = Qt @ Kt.T
                s *= scale
                kvi, in_range = tile.kv_index(c)
                s = tile.modify(s, b, h, qi, kvi, cnt)
                keep = None if full else tile.keep(s.shape, b, h, qi, kvi, in_range, cnt)
                kern.online_softmax_update(s, keep, m, l, acc)
                acc += s @ Vt
                cnt.madds += 2 * nq * bs_kv * D
                cnt.blocks += 1
            alive = l > 0
            out[b, h, q0:q1] = np.where(alive[:, None], acc / np.where(alive, l, 1)[:, None], 0)
            lse[b, h, q0:q1] = np.where(alive, m + np.log(np.where(alive, l, 1)), -np.inf)
        return cnt

    tasks = [lambda b=b, h=h: head(b, h) for b in range(B) for h in range(H)]
    for cnt in _run(tasks, workers):
        if counters is not None:
            counters.add(cnt)
    return AttentionOutput(out, lse)


def _prepare(q, k, v, cfg: AttentionConfig):
    q = np.asarray(q)
    dt = working_dtype(q)
    q, k, v = (np.ascontiguousarray(x, dtype=dt) for x in (q, k, v))
    validate_inputs(q, k, v, cfg)
    return q, k, v


def forward(q, k, v, score_mod: Optional[ScoreMod] = None, block_mask: Optional[BlockMask] = None,
            cfg: Optional[AttentionConfig] = None, counters: Optional[Counters] = None) -> AttentionOutput:
    """``softmax(score_mod(scale * q @ k.T))`` restricted to ``block_mask``, times ``v``.

    Arithmetic runs in the dtype of ``q`` (float32 or float64).  Tile sizes
    come from ``block_mask``; ``cfg`` block sizes are only used to build a
    dense (all-FULL) mask when none is given.
    """
    cfg = cfg or AttentionConfig()
    q, k, v = _prepare(q, k, v, cfg)
    B, H, q_len, D = q.shape
    kv_len = k.shape[2]
    smod = score_mod or noop_score()
    if block_mask is None:
        block_mask = create_block_mask(noop_mask(), 1, 1, q_len, kv_len, cfg.block_size_q,
                                       cfg.block_size_kv, broadcast_b=True, broadcast_h=True)
    _check_block_mask(block_mask, B, H, q_len, kv_len)
    return _forward_core(q, k, v, smod, block_mask, cfg.scale_for(D), cfg.group_for(H, k.shape[1]),
                         kv_len, counters, cfg.workers())


def backward(q, k, v, out, lse, d_out, score_mod: Optional[ScoreMod] = None,
             block_mask: Optional[BlockMask] = None, block_mask_t: Optional[BlockMask] = None,
             cfg: Optional[AttentionConfig] = None, counters: Optional[Counters] = None) -> Gradients:
    """Gradients of the forward pass by recomputing scores tile by tile.

    The dQ pass walks rows of ``block_mask``; the dK/dV pass walks rows of
    ``block_mask_t`` (its transpose), accumulating over the GQA group of
    each KV head, so every output block has a single writer.
    """
    cfg = cfg or AttentionConfig()
    q, k, v = _prepare(q, k, v, cfg)
    dt = q.dtype
    B, H, q_len, D = q.shape
    Hk, kv_len = k.shape[1], k.shape[2]
    out = np.ascontiguousarray(out, dtype=dt)
    d_out = np.ascontiguousarray(d_out, dtype=dt)
    lse = np.ascontiguousarray(lse, dtype=dt)
    if out.shape != q.shape or d_out.shape != q.shape:
        raise ShapeMismatch(f"out/d_out must have shape {q.shape}, got {out.shape} and {d_out.shape}")
    if lse.shape != (B, H, q_len):
        raise StaleStatistics(f"lse has shape {lse.shape}, expected {(B, H, q_len)}")
    smod = score_mod or noop_score()
    bm = block_mask
    if bm is None:
        bm = create_block_mask(noop_mask(), 1, 1, q_len, kv_len, cfg.block_size_q,
                               cfg.block_size_kv, broadcast_b=True, broadcast_h=True)
    _check_block_mask(bm, B, H, q_len, kv_len)
    bmt = block_mask_t if block_mask_t is not None else transpose(bm)
    if (bmt.q_len, bmt.kv_len, bmt.block_size_q, bmt.block_size_kv) != \
            (kv_len, q_len, bm.block_size_kv, bm.block_size_q):
        raise BlockMaskMismatch("block_mask_t is not the transpose of block_mask")
    _check_block_mask(bmt, B, H, kv_len, q_len)

    scale = cfg.scale_for(D)
    group = cfg.group_for(H, Hk)
    bs_q, bs_kv = bm.block_size_q, bm.block_size_kv
    kp = _pad_kv(k, bs_kv)
    vp = _pad_kv(v, bs_kv)
    delta = np.einsum("bhld,bhld->bhl", d_out, out).astype(dt, copy=False)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    tile = _TileContext(smod, bm.source_mask, bs_kv, kv_len, dt)
    kern = kernels.current()

    def scores(Qt, Kt, b, h, qi, kvi, in_range, full, cnt):
        s_raw = Qt @ Kt.T
        s_raw *= scale
        s = s_raw.copy() if smod.identity else tile.modify(s_raw, b, h, qi, kvi, cnt)
        if not full:
            keep = tile.keep(s.shape, b, h, qi, kvi, in_range, cnt)
            np.copyto(s, -np.inf, where=~keep.view(bool))
        return s, tile.score_grad(s_raw, b, h, qi, kvi)

    def dq_head(b, h):
        cnt = Counters()
        Kh, Vh = kp[b, h // group], vp[b, h // group]
        for r in range(bm.num_row):
            q0, q1 = r * bs_q, min((r + 1) * bs_q, q_len)
            nq = q1 - q0
            Qt, dOt = q[b, h, q0:q1], d_out[b, h, q0:q1]
            lse_t, delta_t = lse[b, h, q0:q1], delta[b, h, q0:q1]
            qi = np.arange(q0, q1)[:, None]
            acc = np.zeros((nq, D), dtype=dt)
            cols, fulls = bm.row_schedule(b, h, r)
            for c, full in zip(cols.tolist(), fulls.tolist()):
                k0 = c * bs_kv
                Kt, Vt = Kh[k0:k0 + bs_kv], Vh[k0:k0 + bs_kv]
                kvi, in_range = tile.kv_index(c)
                s, dscore = scores(Qt, Kt, b, h, qi, kvi, in_range, full, cnt)
                dp = dOt @ Vt.T
                kern.softmax_grad(s, lse_t, dp, delta_t, dscore)
                acc += dp @ Kt
                cnt.madds += 3 * nq * bs_kv * D
                cnt.blocks += 1
            dq[b, h, q0:q1] = acc * scale
        return cnt

    def dkv_head(b, hk):
        cnt = Counters()
        Kh, Vh = kp[b, hk], vp[b, hk]
        for c in range(bm.num_col):
            k0 = c * bs_kv
            k1 = min(k0 + bs_kv, kv_len)
            Kt, Vt = Kh[k0:k0 + bs_kv], Vh[k0:k0 + bs_kv]
            kvi, in_range = tile.kv_index(c)
            dk_acc = np.zeros((bs_kv, D), dtype=dt)
            dv_acc = np.zeros((bs_kv, D), dtype=dt)
            for h in range(hk * group, (hk + 1) * group):
                rows, fulls = bmt.row_schedule(b, h, c)
                for r, full in zip(rows.tolist(), fulls.tolist()):
                    q0, q1 = r * bs_q, min((r + 1) * bs_q, q_len)
                    nq = q1 - q0
                    Qt, dOt = q[b, h, q0:q1], d_out[b, h, q0:q1]
                    qi = np.arange(q0, q1)[:, None]
                    s, dscore = scores(Qt, Kt, b, h, qi, kvi, in_range, full, cnt)
                    dp = dOt @ Vt.T
                    kern.softmax_grad(s, lse[b, h, q0:q1], dp, delta[b, h, q0:q1], dscore)
                    dv_acc += s.T @ dOt
                    dk_acc += dp.T @ Qt
                    cnt.madds += 4 * nq * bs_kv * D
                    cnt.blocks += 1
            dk[b, hk, k0:k1] = dk_acc[:k1 - k0] * scale
            dv[b, hk, k0:k1] = dv_acc[:k1 - k0]
        return cnt

    tasks = [lambda b=b, h=h: dq_head(b, h) for b in range(B) for h in range(H)]
    tasks += [lambda b=b, h=h: dkv_head(b, h) for b in range(B) for h in range(Hk)]
    for cnt in _run(tasks, cfg.workers()):
        if counters is not None:
            counters.add(cnt)
    return Gradients(dq, dk, dv)


def decode(q_step, k_cache, v_cache, offset: int, mask_mod: Optional[MaskMod] = None,
           score_mod: Optional[ScoreMod] = None, block_mask: Optional[BlockMask] = None,
           cfg: Optional[AttentionConfig] = None, counters: Optional[Counters] = None) -> AttentionOutput:
    """Attention for ``n_new`` query tokens sitting at absolute positions ``offset...``.

    Modifiers are written for absolute positions; they are shifted by
    ``offset`` here.  A supplied ``block_mask`` must already be built from
    ``offset_mask(mask_mod, offset)`` over the ``n_new`` rows.
    """
    cfg = cfg or AttentionConfig()
    n_new = np.shape(q_step)[2]
    kv_len = np.shape(k_cache)[2]
    if offset < 0 or offset + n_new > kv_len:
        raise OffsetOutOfRange(f"offset {offset} + {n_new} new tokens exceeds cache length {kv_len}")
    if block_mask is None:
        mm = offset_mask(mask_mod or noop_mask(), offset)
        block_mask = create_block_mask(mm, np.shape(q_step)[0], np.shape(q_step)[1], n_new, kv_len,
                                       cfg.block_size_q, cfg.block_size_kv)
    smod = offset_score(score_mod or noop_score(), offset)
    return forward(q_step, k_cache, v_cache, smod, block_mask, cfg, counters)

