"""Command line: ``flexattn run | verify | render``.

Exit codes: 0 success, 1 a correctness check failed, 2 bad usage or config.
``FLEXATTN_NUM_WORKERS`` pins the engine's worker threads (``--workers``
sets it for one invocation).
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional

from . import bench, kernels
from .errors import ConfigParse, FlexAttentionError, UnknownVariant


def _cmd_run(args) -> int:
    points = bench.expand_grid(bench.load_config(args.config))
    rows = bench.run_grid(points, jobs=args.jobs)
    text = bench.rows_to_csv(rows)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    failed = [r for r in rows if not r.passed]
    for r in failed:
        print(f"FAIL  {r.variant} {r.mode} qlen={r.qlen} bs={r.bs}: maxabs={r.maxabs_err:.2e} "
              f"rmse={r.rmse:.2e}", file=sys.stderr)
    return 1 if failed else 0


def _cmd_verify(args) -> int:
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                vc = bench.parse_verify_config(fh.read())
        except OSError as e:
            raise ConfigParse(f"cannot read config {args.config}: {e}") from None
    else:
        vc = bench.VerifyConfig()
    results = bench.run_verify(vc, emit=lambda line: print(line, flush=True))
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def _cmd_render(args) -> int:
    fmt = args.format or ("ppm" if args.out.endswith(".ppm") else "ascii")
    params = {"window": args.window, "kernel": args.kernel, "tile": args.tile}
    data = bench.render_variant(args.variant, args.qlen, args.kvlen or args.qlen, args.bs, fmt=fmt,
                                cell=args.cell, **params)
    if args.out == "-":
        if fmt == "ppm":
            sys.stdout.buffer.write(data)
        else:
            sys.stdout.write(data.decode("utf-8"))
    else:
        with open(args.out, "wb") as fh:
            fh.write(data)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexattn", description=__doc__.splitlines()[0])
    p.add_argument("--workers", type=int, help="engine worker threads (overrides FLEXATTN_NUM_WORKERS)")
    p.add_argument("--backend", choices=kernels.available(), help="tile kernel backend")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a benchmark grid and write CSV")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True, help="CSV path, or - for stdout")
    r.add_argument("--jobs", type=int, default=1, help="grid points run concurrently (default 1)")
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("verify", help="run the invariant suite; exit 0 iff all checks pass")
    v.add_argument("--config", help="verify config (default: all variants)")
    v.set_defaults(func=_cmd_verify)

    d = sub.add_parser("render", help="draw a block mask as PPM or text")
    d.add_argument("--variant", required=True)
    d.add_argument("--qlen", type=int, required=True)
    d.add_argument("--kvlen", type=int, default=0)
    d.add_argument("--bs", type=int, required=True)
    d.add_argument("--out", required=True, help="output path (.ppm gives an image), or - for stdout")
    d.add_argument("--format", choices=("ppm", "ascii"))
    d.add_argument("--cell", type=int, default=4, help="pixels per block in PPM output")
    d.add_argument("--window", type=int, default=256)
    d.add_argument("--kernel", type=int, default=5)
    d.add_argument("--tile", type=int, default=4)
    d.set_defaults(func=_cmd_render)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers is not None:
        os.environ["FLEXATTN_NUM_WORKERS"] = str(args.workers)
    if args.backend:
        kernels.set_backend(args.backend)
    try:
        return args.func(args)
    except (ConfigParse, UnknownVariant) as e:
        msg = e.args[0] if e.args else str(e)
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except FlexAttentionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
