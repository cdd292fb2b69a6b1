"""Compiled vs numpy tile kernels: per-tile microbenchmark and end-to-end forward.

    python3 benchmarks/bench_kernels.py [--tile 128] [--seq 2048] [--repeats 7]
"""

import argparse
import time

import numpy as np

from flexattn import alibi, alibi_slopes, causal, create_block_mask, forward, kernels, noop_mask


def median_ns(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times))


def tile_cases(n, d, dtype, rng):
    s0 = rng.normal(scale=2, size=(n, n)).astype(dtype)
    mask = np.tril(np.ones((n, n), dtype=np.uint8))
    m0 = np.full(n, -np.inf, dtype=dtype)
    dp0 = rng.normal(size=(n, n)).astype(dtype)
    lse = np.log(np.exp(s0.astype(np.float64)).sum(axis=1)).astype(dtype)
    delta = rng.normal(size=n).astype(dtype)

    def update(masked):
        def run():
            kernels.current().online_softmax_update(s0.copy(), mask if masked else None, m0.copy(),
                                                    np.zeros(n, dtype), np.zeros((n, d), dtype))
        return run

    def grad():
        kernels.current().softmax_grad(s0.copy(), lse, dp0.copy(), delta, None)

    return {"update": update(False), "update+mask": update(True), "grad": grad}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tile", type=int, default=128)
    ap.add_argument("--seq", type=int, default=2048)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()
    backends = kernels.available()
    print(f"backends: {', '.join(backends)} (active: {kernels.backend_name()})")

    rng = np.random.default_rng(0)
    print(f"\nper-tile kernels, {args.tile}x{args.tile}, median us")
    print(f"{'kernel':<14}{'dtype':<9}" + "".join(f"{b:>10}" for b in backends))
    for dtype in (np.float32, np.float64):
        cases = tile_cases(args.tile, args.dim, dtype, rng)
        for name, fn in cases.items():
            cells = []
            for b in backends:
                with kernels.use_backend(b):
                    cells.append(median_ns(fn, args.repeats * 20) / 1e3)
            print(f"{name:<14}{np.dtype(dtype).name:<9}" + "".join(f"{c:>10.1f}" for c in cells))

    L, D, H = args.seq, args.dim, 2
    q, k, v = (rng.uniform(-1, 1, (1, H, L, D)).astype(np.float32) for _ in range(3))
    print(f"\nforward, L={L} D={D} H={H} block=128 float32, median ms")
    print(f"{'variant':<14}" + "".join(f"{b:>10}" for b in backends))
    for name, mask, smod in (("noop", noop_mask(), None), ("causal", causal(), None),
                             ("causal+alibi", causal(), alibi(alibi_slopes(H)))):
        bm = create_block_mask(mask, 1, H, L, L, 128, 128, broadcast_b=True, broadcast_h=True)
        cells = []
        for b in backends:
            with kernels.use_backend(b):
                cells.append(median_ns(lambda: forward(q, k, v, smod, bm), args.repeats) / 1e6)
        print(f"{name:<14}" + "".join(f"{c:>10.1f}" for c in cells))


if __name__ == "__main__":
    main()
