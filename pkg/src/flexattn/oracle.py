"""Dense reference attention (materialized score matrix) and error metrics.

Nothing here touches the tiled engine or the block mask; it is the ground
truth the engine is checked against.
"""

from __future__ import annotations

import struct
from typing import Callable, Optional

import numpy as np

from .core import AttentionConfig, AttentionOutput, Gradients, MaskMod, ScoreMod, validate_inputs
from .errors import ShapeMismatch, SizeTooLarge

_PRECISION = {32: np.float32, 64: np.float64}


def _scores(q, k, smod, mm, scale, group, b, h):
    s = q[b, h] @ k[b, h // group].T
    s = s * scale
    q_len, kv_len = s.shape
    qi = np.arange(q_len)[:, None]
    kvi = np.arange(kv_len)[None, :]
    s_raw = s
    if smod is not None:
        s = np.broadcast_to(np.asarray(smod(s, b, h, qi, kvi), dtype=s.dtype), s.shape).copy()
    keep = None
    if mm is not None:
        keep = np.broadcast_to(np.asarray(mm(b, h, qi, kvi), dtype=bool), s.shape)
        s = np.where(keep, s, -np.inf)
    return s_raw, s, keep


def dense_forward(q, k, v, score_mod: Optional[ScoreMod] = None, mask_mod: Optional[MaskMod] = None,
                  cfg: Optional[AttentionConfig] = None, precision: int = 64) -> AttentionOutput:
    """Full-matrix ``softmax(mod(scale * q k^T)) v`` with row-max subtraction.

    Fully masked rows produce zeros and lse = -inf.
    """
    cfg = cfg or AttentionConfig()
    dt = _PRECISION[precision]
    q, k, v = (np.asarray(x, dtype=dt) for x in (q, k, v))
    validate_inputs(q, k, v, cfg)
    B, H, q_len, D = q.shape
    scale = cfg.scale_for(D)
    group = cfg.group_for(H, k.shape[1])
    out = np.zeros((B, H, q_len, D), dtype=dt)
    lse = np.full((B, H, q_len), -np.inf, dtype=dt)
    for b in range(B):
        for h in range(H):
            _, s, _ = _scores(q, k, score_mod, mask_mod, scale, group, b, h)
            mx = s.max(axis=1, keepdims=True)
            alive = np.isfinite(mx[:, 0])
            mx = np.where(np.isfinite(mx), mx, 0)
            e = np.exp(s - mx)
            tot = e.sum(axis=1, keepdims=True)
            w = np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)
            out[b, h] = w @ v[b, h // group]
            lse[b, h] = np.where(alive, mx[:, 0] + np.log(np.where(alive, tot[:, 0], 1)), -np.inf)
    return AttentionOutput(out, lse)


def dense_backward(q, k, v, d_out, score_mod: Optional[ScoreMod] = None,
                   mask_mod: Optional[MaskMod] = None, cfg: Optional[AttentionConfig] = None) -> Gradients:
    """Analytic gradients through the materialized softmax, in 64-bit.

    Used where finite differences are too expensive; itself checked against
    :func:`dense_backward_fd` in the tests.
    """
    cfg = cfg or AttentionConfig()
    q, k, v, d_out = (np.asarray(x, dtype=np.float64) for x in (q, k, v, d_out))
    validate_inputs(q, k, v, cfg)
    B, H, q_len, D = q.shape
    scale = cfg.scale_for(D)
    group = cfg.group_for(H, k.shape[1])
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    for b in range(B):
        for h in range(H):
            hk = h // group
            s_raw, s, _ = _scores(q, k, score_mod, mask_mod, scale, group, b, h)
            mx = s.max(axis=1, keepdims=True)
            mx = np.where(np.isfinite(mx), mx, 0)
            e = np.exp(s - mx)
            tot = e.sum(axis=1, keepdims=True)
            p = np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)
            dv[b, hk] += p.T @ d_out[b, h]
            dp = d_out[b, h] @ v[b, hk].T
            ds = p * (dp - (p * dp).sum(axis=1, keepdims=True))
            if score_mod is not None:
                qi = np.arange(q_len)[:, None]
                kvi = np.arange(k.shape[2])[None, :]
                g = np.broadcast_to(np.asarray(score_mod.grad(s_raw, b, h, qi, kvi), dtype=np.float64), ds.shape)
                ds = np.where(p > 0, ds * g, 0.0)
            dq[b, h] += scale * ds @ k[b, hk]
            dk[b, hk] += scale * ds.T @ q[b, h]
    return Gradients(dq, dk, dv)


def half_sum_squares(out: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.asarray(out, dtype=np.float64) ** 2))


def dense_backward_fd(q, k, v, score_mod: Optional[ScoreMod] = None, mask_mod: Optional[MaskMod] = None,
                      cfg: Optional[AttentionConfig] = None, eps: float = 1e-5,
                      loss: Callable[[np.ndarray], float] = half_sum_squares) -> Gradients:
    """Central finite differences of ``loss(dense_forward(...).out)`` w.r.t. q, k, v.

    The default loss is ``sum(out**2) / 2``, whose output gradient is ``out``.
    Restricted to at most 16 tokens and 8 features.
    """
    q, k, v = (np.array(x, dtype=np.float64) for x in (q, k, v))
    if max(q.shape[2], k.shape[2]) > 16 or q.shape[3] > 8:
        raise SizeTooLarge(f"finite differences limited to <=16 tokens and <=8 features, got {q.shape}, {k.shape}")
    inputs = [q, k, v]

    def f():
        return loss(dense_forward(q, k, v, score_mod, mask_mod, cfg, precision=64).out)

    grads = []
    for x in inputs:
        g = np.zeros_like(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return Gradients(*grads)


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"rmse of shapes {a.shape} and {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2))) if a.size else 0.0


def max_abs(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"max_abs of shapes {a.shape} and {b.shape}")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


# --- raw tensor fixtures --------------------------------------------------
# <int64 rank> <int64 dims...> <int64 precision bits> <little-endian values>

def save_tensor(path, x) -> None:
    x = np.asarray(x)
    bits = {np.dtype(np.float32): 32, np.dtype(np.float64): 64}.get(x.dtype.newbyteorder("="))
    if bits is None:
        raise TypeError(f"only float32/float64 tensors can be saved, got {x.dtype}")
    le = x.astype(x.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as fh:
        fh.write(struct.pack(f"<{x.ndim + 2}q", x.ndim, *x.shape, bits))
        fh.write(np.ascontiguousarray(le).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    (rank,) = struct.unpack_from("<q", data, 0)
    dims = struct.unpack_from(f"<{rank}q", data, 8)
    (bits,) = struct.unpack_from("<q", data, 8 + 8 * rank)
    dtype = {32: "<f4", 64: "<f8"}.get(bits)
    if dtype is None:
        raise ValueError(f"unknown precision tag {bits}")
    off = 16 + 8 * rank
    n = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=off)
    if off + arr.nbytes != len(data):
        raise ValueError("tensor file size does not match its header")
    return arr.astype(np.dtype(dtype).newbyteorder("="), copy=True).reshape(dims)
