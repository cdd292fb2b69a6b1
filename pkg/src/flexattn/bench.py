"""Benchmark grid runner, invariant checks and mask rendering behind the CLI.

A config is a flat JSON object or a ``key = value`` file.  Any key whose
value is a list (JSON array, or comma-separated in key=value form) becomes a
grid axis; one CSV row is produced per grid point.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import oracle
from .block_mask import (EMPTY, FULL, BlockMask, create_block_mask, demote_full, force_dense,
                         from_bytes, render_ascii, render_ppm, sparsity, to_dense)
from .core import AttentionConfig, MaskMod, ScoreMod
from .engine import Counters, backward, decode, forward
from .errors import ConfigParse, UnknownVariant
from .masks import (NAGeometry, alibi, alibi_slopes, and_mask, causal, document_mask, na_morton,
                    na_naive, na_tiled, noop_mask, offset_mask, offset_score, or_mask, prefix_lm,
                    prefix_mask, sliding_window, soft_cap)
from .paged import PagedKVCache, convert_block_mask, paged_forward

CSV_HEADER = ["variant", "B", "Hq", "Hkv", "qlen", "kvlen", "D", "bs", "mode", "median_ns",
              "madds", "density", "maxabs_err", "rmse"]
MODES = ("forward", "backward", "decode", "paged")
VARIANTS = ("noop", "causal", "sliding_window", "document", "prefix_lm", "alibi", "soft_cap",
            "na_naive", "na_tiled", "na_morton")

# pass thresholds per mode: (max-abs, rmse)
TOLERANCES = {
    "forward": (1e-5, 1e-6),
    "decode": (1e-5, 1e-6),
    "paged": (0.0, 1e-6),
    "backward": (1e-4, 1e-5),
}


# --- variants -------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    name: str
    mask: MaskMod
    score: Optional[ScoreMod]


def _canvas_side(q_len: int, kv_len: int) -> int:
    side = math.isqrt(q_len)
    if q_len != kv_len or side * side != q_len:
        raise ConfigParse(f"neighborhood variants need q_len == kv_len == side**2, got {q_len}, {kv_len}")
    return side


def document_ids(length: int, num_docs: int, seed: int) -> np.ndarray:
    """Packed-document ids with boundaries drawn from ``seed``."""
    num_docs = max(1, min(num_docs, length))
    rng = np.random.default_rng(seed)
    cuts = np.sort(rng.choice(np.arange(1, length), size=num_docs - 1, replace=False)) if num_docs > 1 else []
    ids = np.zeros(length, dtype=np.int64)
    for c in cuts:
        ids[c:] += 1
    return ids


def build_variant(name: str, q_len: int, kv_len: int, num_heads: int, seed: int = 0,
                  window: int = 256, cap: float = 20.0, prefix: Optional[int] = None,
                  num_docs: int = 4, kernel: int = 5, tile: int = 4) -> Variant:
    """Resolve a variant name to its (mask, score) pair for the given dims.

    ``alibi`` is ALiBi on top of a causal mask; ``soft_cap`` is unmasked.
    NA variants need a square self-attention length (the canvas is
    ``sqrt(q_len)`` on a side).
    """
    if name == "noop":
        return Variant(name, noop_mask(), None)
    if name == "causal":
        return Variant(name, causal(), None)
    if name == "sliding_window":
        return Variant(name, sliding_window(window), None)
    if name == "document":
        return Variant(name, document_mask(document_ids(max(q_len, kv_len), num_docs, seed)), None)
    if name == "prefix_lm":
        return Variant(name, prefix_lm(prefix if prefix is not None else kv_len // 4), None)
    if name == "alibi":
        return Variant(name, causal(), alibi(alibi_slopes(num_heads)))
    if name == "soft_cap":
        return Variant(name, noop_mask(), soft_cap(cap))
    if name in ("na_naive", "na_tiled", "na_morton"):
        side = _canvas_side(q_len, kv_len)
        g = NAGeometry(side, side, min(kernel, side if side % 2 else side - 1))
        if name == "na_naive":
            return Variant(name, na_naive(g), None)
        if name == "na_tiled":
            return Variant(name, na_tiled(g, tile if side % tile == 0 else 1), None)
        return Variant(name, na_morton(g), None)
    raise UnknownVariant(f"unknown variant {name!r}; known: {', '.join(VARIANTS)}")


# --- config ---------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    variant: str = "causal"
    B: int = 1
    Hq: int = 4
    Hkv: int = 4
    q_len: int = 256
    kv_len: int = 0  # 0 means equal to q_len
    D: int = 16
    block_size: int = 64
    mode: str = "forward"
    repeats: int = 3
    seed: int = 0
    page_size: int = 0  # 0 means equal to block_size
    window: int = 256
    cap: float = 20.0
    kernel: int = 5
    tile: int = 4
    timing: bool = True
    check: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigParse(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("B", "Hq", "Hkv", "q_len", "D", "block_size"):
            if getattr(self, name) < 1:
                raise ConfigParse(f"{name} must be positive, got {getattr(self, name)}")
        if self.kv_len < 0 or self.page_size < 0:
            raise ConfigParse("kv_len and page_size must be >= 0")
        if self.repeats < 3:
            raise ConfigParse(f"repeats must be >= 3, got {self.repeats}")
        if self.Hq % self.Hkv:
            raise ConfigParse(f"Hq={self.Hq} is not a multiple of Hkv={self.Hkv}")

    @property
    def kv(self) -> int:
        return self.kv_len or self.q_len

    @property
    def pages(self) -> int:
        return self.page_size or self.block_size

    def variant_obj(self) -> Variant:
        return build_variant(self.variant, self.q_len, self.kv, self.Hq, seed=self.seed,
                             window=self.window, cap=self.cap, kernel=self.kernel, tile=self.tile)


_FIELDS = {f.name: f for f in fields(BenchConfig)}
_ALIASES = {"qlen": "q_len", "kvlen": "kv_len", "bs": "block_size", "H_q": "Hq", "H_kv": "Hkv",
            "variants": "variant", "modes": "mode"}


def _coerce(key: str, raw):
    kind = _FIELDS[key].type
    try:
        if kind in ("int", int):
            if isinstance(raw, str):
                raw = raw.strip().lower()
                mult = 1024 if raw.endswith("k") else 1
                return int(raw[:-1] if mult > 1 else raw) * mult
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigParse(f"bad value for {key}: {raw!r}") from None


def _read_flat(text: str) -> dict:
    """Raw ``{key: value-or-list}`` from JSON or key=value text."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as e:
            raise ConfigParse(f"invalid JSON config: {e}") from None
        if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
            raise ConfigParse("config must be a flat JSON object")
        return data
    data = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParse(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        parts = [p.strip() for p in value.split(",")]
        data[key] = parts if len(parts) > 1 else parts[0]
    return data


def parse_config_text(text: str) -> Dict[str, list]:
    """Parse config text into ``{field: [values...]}``."""
    out: Dict[str, list] = {}
    for key, value in _read_flat(text).items():
        key = _ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigParse(f"unknown config key {key!r}")
        values = value if isinstance(value, list) else [value]
        if not values:
            raise ConfigParse(f"empty list for {key}")
        out[key] = [_coerce(key, v) for v in values]
    return out


def load_config(path) -> Dict[str, list]:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as e:
        raise ConfigParse(f"cannot read config {path}: {e}") from None


def expand_grid(spec: Dict[str, list]) -> List[BenchConfig]:
    """Cartesian product over list-valued fields, in key order of the dataclass."""
    unknown = [k for k in spec if k not in _FIELDS]
    if unknown:
        raise ConfigParse(f"unknown config keys: {', '.join(sorted(unknown))}")
    keys = [f for f in _FIELDS if f in spec]
    points = []
    for combo in itertools.product(*(spec[k] for k in keys)):
        points.append(BenchConfig(**dict(zip(keys, combo))))
    return points


# --- running one grid point -----------------------------------------------


@dataclass
class BenchRow:
    variant: str
    B: int
    Hq: int
    Hkv: int
    qlen: int
    kvlen: int
    D: int
    bs: int
    mode: str
    median_ns: int
    madds: int
    density: float
    maxabs_err: float
    rmse: float
    passed: bool = True

    def csv_fields(self) -> list:
        def num(x):
            return "nan" if x != x else f"{x:.6e}"
        return [self.variant, self.B, self.Hq, self.Hkv, self.qlen, self.kvlen, self.D, self.bs,
                self.mode, self.median_ns, self.madds, f"{self.density:.6f}", num(self.maxabs_err),
                num(self.rmse)]


def _inputs(cfg: BenchConfig):
    rng = np.random.default_rng(cfg.seed)
    q = rng.uniform(-1, 1, (cfg.B, cfg.Hq, cfg.q_len, cfg.D)).astype(np.float32)
    k = rng.uniform(-1, 1, (cfg.B, cfg.Hkv, cfg.kv, cfg.D)).astype(np.float32)
    v = rng.uniform(-1, 1, (cfg.B, cfg.Hkv, cfg.kv, cfg.D)).astype(np.float32)
    return q, k, v


def median_time_ns(fn: Callable[[], object], repeats: int) -> int:
    """Median wall time of ``repeats`` calls after one untimed warmup call."""
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(statistics.median(samples))


def _decode_rows(q, k, v, var: Variant, attn: AttentionConfig, counters: Optional[Counters]):
    """Feed the queries one token at a time; they sit at the end of the cache."""
    n, kv_len = q.shape[2], k.shape[2]
    start = kv_len - n
    outs = [decode(q[:, :, t:t + 1], k, v, start + t, var.mask, var.score, cfg=attn,
                   counters=counters).out for t in range(n)]
    return np.concatenate(outs, axis=2)


def run_point(cfg: BenchConfig) -> BenchRow:
    var = cfg.variant_obj()
    q, k, v = _inputs(cfg)
    bs = cfg.pages if cfg.mode == "paged" else cfg.block_size
    attn = AttentionConfig(block_size_q=bs, block_size_kv=bs)
    nan = float("nan")
    maxabs = err = nan

    if cfg.mode == "decode":
        if cfg.q_len > cfg.kv:
            raise ConfigParse("decode mode needs q_len <= kv_len")
        offset = cfg.kv - cfg.q_len
        dmask = offset_mask(var.mask, offset)
        bm = create_block_mask(dmask, cfg.B, cfg.Hq, cfg.q_len, cfg.kv, bs, bs,
                               broadcast_b=True, broadcast_h=True)
        cnt = Counters()
        out = _decode_rows(q, k, v, var, attn, cnt)
        run = lambda: _decode_rows(q, k, v, var, attn, None)  # noqa: E731
        if cfg.check:
            gold = oracle.dense_forward(q, k, v, offset_score(var.score, offset) if var.score else None,
                                        dmask, attn).out
            maxabs, err = oracle.max_abs(out, gold), oracle.rmse(out, gold)
    else:
        bm = create_block_mask(var.mask, cfg.B, cfg.Hq, cfg.q_len, cfg.kv, bs, bs,
                               broadcast_b=True, broadcast_h=True)
        cnt = Counters()
        if cfg.mode == "forward":
            out = forward(q, k, v, var.score, bm, attn, cnt).out
            run = lambda: forward(q, k, v, var.score, bm, attn)  # noqa: E731
        elif cfg.mode == "paged":
            cache = PagedKVCache(cfg.B * -(-cfg.kv // bs) + 1, bs, cfg.Hkv, cfg.D, cfg.B,
                                 rng=np.random.default_rng(cfg.seed + 1))
            for b in range(cfg.B):
                cache.assign(b, k[b], v[b])
            pt = cache.page_table(cfg.B)
            conv = convert_block_mask(bm, pt)
            out = paged_forward(q, cache, bm, var.score, attn, cnt, page_table=pt, converted=conv).out
            run = lambda: paged_forward(q, cache, bm, var.score, attn, page_table=pt, converted=conv)  # noqa: E731
            if cfg.check:
                maxabs = oracle.max_abs(out, forward(q, k, v, var.score, bm, attn).out)
        else:
            fwd = forward(q, k, v, var.score, bm, attn)
            d_out = np.random.default_rng(cfg.seed + 2).uniform(-1, 1, q.shape).astype(np.float32)
            grads = backward(q, k, v, fwd.out, fwd.lse, d_out, var.score, bm, cfg=attn, counters=cnt)
            run = lambda: backward(q, k, v, fwd.out, fwd.lse, d_out, var.score, bm, cfg=attn)  # noqa: E731
            if cfg.check:
                gold = oracle.dense_backward(q, k, v, d_out, var.score, var.mask, attn)
                got = np.concatenate([g.ravel() for g in (grads.dq, grads.dk, grads.dv)])
                ref = np.concatenate([g.ravel() for g in (gold.dq, gold.dk, gold.dv)])
                maxabs, err = oracle.max_abs(got, ref), oracle.rmse(got, ref)
            out = None
        if cfg.check and out is not None:
            gold = oracle.dense_forward(q, k, v, var.score, var.mask, attn).out
            err = oracle.rmse(out, gold)
            if cfg.mode == "forward":
                maxabs = oracle.max_abs(out, gold)

    median = median_time_ns(run, cfg.repeats) if cfg.timing else 0
    tol_abs, tol_rmse = TOLERANCES[cfg.mode]
    passed = not cfg.check or (maxabs <= tol_abs and err <= tol_rmse)
    return BenchRow(cfg.variant, cfg.B, cfg.Hq, cfg.Hkv, cfg.q_len, cfg.kv, cfg.D, bs, cfg.mode,
                    median, cnt.madds, sparsity(bm).density, maxabs, err, passed)


def run_grid(points: List[BenchConfig], jobs: int = 1) -> List[BenchRow]:
    """Run every grid point; ``jobs > 1`` runs points concurrently (timings then interfere)."""
    if jobs <= 1:
        return [run_point(p) for p in points]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_point, points))


def rows_to_csv(rows: List[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()


# --- verify ---------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


@dataclass(frozen=True)
class VerifyConfig:
    variants: Tuple[str, ...] = VARIANTS
    seed: int = 0
    block_sizes: Tuple[int, ...] = (16, 64)
    kv_heads: Tuple[int, ...] = (4, 1)
    block_mask_fixture: Optional[str] = None
    fixture_variant: str = "causal"
    na_canvas: int = 32
    na_kernel: int = 5
    na_block: int = 16


def parse_verify_config(text: str) -> VerifyConfig:
    """Verify-specific keys on top of the shared config syntax."""
    data = _read_flat(text)
    known = {f.name for f in fields(VerifyConfig)} | {"variant"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigParse(f"unknown verify keys: {', '.join(unknown)}")

    def as_list(v):
        return list(v) if isinstance(v, (list, tuple)) else [v]

    kw = {}
    try:
        if "variant" in data or "variants" in data:
            kw["variants"] = tuple(str(x) for x in as_list(data.get("variants", data.get("variant"))))
        for key in ("block_sizes", "kv_heads"):
            if key in data:
                kw[key] = tuple(int(x) for x in as_list(data[key]))
        for key in ("seed", "na_canvas", "na_kernel", "na_block"):
            if key in data:
                kw[key] = int(data[key])
        for key in ("block_mask_fixture", "fixture_variant"):
            if key in data:
                kw[key] = str(data[key])
    except (TypeError, ValueError) as e:
        raise ConfigParse(f"bad verify value: {e}") from None
    for name in kw.get("variants", ()):
        if name not in VARIANTS:
            raise UnknownVariant(f"unknown variant {name!r}; known: {', '.join(VARIANTS)}")
    return VerifyConfig(**kw)


def _is_na(name: str) -> bool:
    return name.startswith("na_")


def block_mask_soundness(bm: BlockMask, mask: MaskMod, B: int = 1, H: int = 1) -> Tuple[bool, str]:
    """Exhaustively check that EMPTY tiles are all-false and FULL tiles all-true.

    Ragged tail positions count as masked.
    """
    grid = to_dense(bm)
    bs_q, bs_kv = bm.block_size_q, bm.block_size_kv
    rows, cols = grid.shape[2:]
    bad = []
    for b in range(B):
        for h in range(H):
            dense = np.zeros((rows * bs_q, cols * bs_kv), dtype=bool)
            dense[:bm.q_len, :bm.kv_len] = mask.grid(b, h, bm.q_len, bm.kv_len)
            tiles = dense.reshape(rows, bs_q, cols, bs_kv)
            any_ = tiles.any(axis=(1, 3))
            all_ = tiles.all(axis=(1, 3))
            g = grid[bm.broadcast_index(b, h)]
            bad_empty = np.argwhere((g == EMPTY) & any_)
            bad_full = np.argwhere((g == FULL) & ~all_)
            bad += [("EMPTY", b, h, *map(int, x)) for x in bad_empty]
            bad += [("FULL", b, h, *map(int, x)) for x in bad_full]
    if bad:
        return False, f"{len(bad)} misclassified tiles, first {bad[0]}"
    return True, f"{rows}x{cols} tiles"


def _grad_relerr(got, ref) -> float:
    num = max(np.linalg.norm(g - r) for g, r in zip(got, ref))
    den = max(max(np.linalg.norm(r) for r in ref), 1e-30)
    return float(num / den)


def run_verify(vc: VerifyConfig, emit: Optional[Callable[[str], None]] = None) -> List[CheckResult]:
    """Run the invariant suite; ``emit`` receives each PASS/FAIL line as it is produced."""
    results: List[CheckResult] = []

    def record(name, ok, detail=""):
        r = CheckResult(name, bool(ok), detail)
        results.append(r)
        if emit:
            emit(r.line())

    rng = np.random.default_rng(vc.seed)

    def rand(*shape, dtype=np.float32):
        return rng.uniform(-1, 1, shape).astype(dtype)

    for name in vc.variants:
        # oracle equivalence, 32-bit engine vs 64-bit golden
        L = 256  # NA variants read this as a 16x16 canvas
        var = build_variant(name, L, L, 4, seed=vc.seed)
        for hkv in vc.kv_heads:
            q, k, v = rand(2, 4, L, 16), rand(2, hkv, L, 16), rand(2, hkv, L, 16)
            gold = oracle.dense_forward(q, k, v, var.score, var.mask)
            for bs in vc.block_sizes:
                bm = create_block_mask(var.mask, 2, 4, L, L, bs, bs, broadcast_b=True, broadcast_h=True)
                out = forward(q, k, v, var.score, bm).out
                ma, rm = oracle.max_abs(out, gold.out), oracle.rmse(out, gold.out)
                record(f"oracle/{name}/Hkv={hkv}/bs={bs}", ma <= 1e-5 and rm <= 1e-6,
                       f"maxabs={ma:.2e} rmse={rm:.2e}")

        # gradients, 64-bit engine vs central differences
        gl = 16 if _is_na(name) else 8
        gvar = build_variant(name, gl, gl, 2, seed=vc.seed, window=3, kernel=3, tile=2)
        q, k, v = (rand(1, 2, gl, 4, dtype=np.float64) for _ in range(3))
        fd = oracle.dense_backward_fd(q, k, v, gvar.score, gvar.mask)
        bm = create_block_mask(gvar.mask, 1, 2, gl, gl, 4, 4)
        f = forward(q, k, v, gvar.score, bm)
        g = backward(q, k, v, f.out, f.lse, f.out, gvar.score, bm)
        rel = _grad_relerr((g.dq, g.dk, g.dv), (fd.dq, fd.dk, fd.dv))
        record(f"grad/{name}", rel <= 1e-6, f"relerr={rel:.2e}")

        # block-mask exactness, including a ragged block size
        for sl, bs in ((256, 64), (256, 48)) if _is_na(name) else ((512, 64), (200, 64)):
            svar = build_variant(name, sl, sl, 4, seed=vc.seed)
            bm = create_block_mask(svar.mask, 1, 1, sl, sl, bs, bs)
            ok, detail = block_mask_soundness(bm, svar.mask)
            record(f"soundness/{name}/L={sl}/bs={bs}", ok, detail)

        # skipping and full-block optimisations are unobservable
        bm = create_block_mask(var.mask, 1, 4, L, L, 32, 32, broadcast_b=True, broadcast_h=True)
        q, k, v = rand(1, 4, L, 16), rand(1, 4, L, 16), rand(1, 4, L, 16)
        base = forward(q, k, v, var.score, bm).out
        d_empty = oracle.max_abs(forward(q, k, v, var.score, force_dense(bm)).out, base)
        d_full = oracle.max_abs(forward(q, k, v, var.score, demote_full(bm)).out, base)
        record(f"skipping/{name}", d_empty <= 1e-6 and d_full <= 1e-6,
               f"force_dense={d_empty:.1e} demote_full={d_full:.1e}")

        # paged execution is bitwise identical
        ok, worst = True, ""
        for ps in (16, 64):
            cache = PagedKVCache(2 * -(-L // ps) + 3, ps, 4, 16, 1, rng=np.random.default_rng(vc.seed + ps))
            cache.assign(0, k[0], v[0])
            pbm = create_block_mask(var.mask, 1, 4, L, L, ps, ps, broadcast_b=True, broadcast_h=True)
            ref = forward(q, k, v, var.score, pbm)
            got = paged_forward(q, cache, pbm, var.score)
            if not (np.array_equal(ref.out, got.out) and np.array_equal(ref.lse, got.lse)):
                ok, worst = False, f"page_size={ps} differs"
        record(f"paged/{name}", ok, worst or "bitwise equal at page_size 16, 64")

        # decode token by token against the full forward rows
        steps = min(L, 128)
        qd = q[:, :, L - steps:]
        full = forward(q, k, v, var.score, bm).out[:, :, L - steps:]
        got = _decode_rows(qd, k, v, var, AttentionConfig(block_size_q=32, block_size_kv=32), None)
        d = oracle.max_abs(got, full)
        record(f"decode/{name}", d <= 1e-5, f"{steps} steps maxabs={d:.2e}")

    # composition laws on an exhaustive grid
    n = 64
    pl = prefix_lm(16).grid(0, 0, n, n)
    composed = or_mask(prefix_mask(16), causal()).grid(0, 0, n, n)
    record("compose/prefix_lm", np.array_equal(pl, composed), "or(prefix, causal) == prefix_lm on 64x64")
    a, b = sliding_window(5), prefix_mask(20)
    laws = (np.array_equal(and_mask(a, b).grid(0, 0, n, n), and_mask(b, a).grid(0, 0, n, n))
            and np.array_equal(or_mask(a, b).grid(0, 0, n, n), or_mask(b, a).grid(0, 0, n, n))
            and np.array_equal(and_mask(a, noop_mask()).grid(0, 0, n, n), a.grid(0, 0, n, n)))
    record("compose/laws", laws, "and/or commutativity, noop identity")

    # neighborhood-attention block counts
    if any(_is_na(v) for v in vc.variants):
        side, bs = vc.na_canvas, vc.na_block
        counts = na_block_counts(side, vc.na_kernel, bs)
        record(f"na_order/{side}x{side}/k={vc.na_kernel}/bs={bs}",
               counts["na_tiled"] < counts["na_naive"] and counts["na_morton"] < counts["na_naive"],
               " ".join(f"{k}={v}" for k, v in counts.items()))

    if vc.block_mask_fixture:
        with open(vc.block_mask_fixture, "rb") as fh:
            fbm = from_bytes(fh.read())
        fvar = build_variant(vc.fixture_variant, fbm.q_len, fbm.kv_len, 1, seed=vc.seed)
        ok, detail = block_mask_soundness(fbm, fvar.mask)
        record(f"fixture/{vc.fixture_variant}", ok, detail)
    return results


def na_block_counts(side: int, kernel: int, block: int, tile: Optional[int] = None) -> Dict[str, int]:
    """Computed-block counts of the three NA layouts on a ``side x side`` canvas.

    ``tile`` defaults to the divisor of ``side`` whose tiled layout computes
    the fewest blocks.
    """
    L = side * side
    g = NAGeometry(side, side, kernel)

    def count(m):
        return sparsity(create_block_mask(m, 1, 1, L, L, block, block)).computed_blocks

    if tile is None:
        tiles = [t for t in range(2, side) if side % t == 0] or [1]
        tiled = min(count(na_tiled(g, t)) for t in tiles)
    else:
        tiled = count(na_tiled(g, tile))
    return {"na_naive": count(na_naive(g)), "na_tiled": tiled, "na_morton": count(na_morton(g))}


# --- render ---------------------------------------------------------------


def render_variant(name: str, q_len: int, kv_len: int, bs: int, fmt: str = "ppm", cell: int = 4,
                   **params) -> bytes:
    var = build_variant(name, q_len, kv_len, 1, **params)
    bm = create_block_mask(var.mask, 1, 1, q_len, kv_len, bs, bs)
    if fmt == "ppm":
        return render_ppm(bm, cell=cell)
    return render_ascii(bm).encode("utf-8")
