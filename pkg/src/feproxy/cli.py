"""Command-line entry point."""
from __future__ import annotations

import argparse
import logging
import sys

from .harness import COLLECTIVES, FORMATS, ConfigError, PhaseError, RunConfig, format_table, run, warmup


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="feproxy",
        description="Assemble and solve the unit-cube heat problem, timing each phase "
                    "and comparing CRS and BCRS sparse kernels.",
    )
    p.add_argument("--nx", type=int, default=100, help="elements along x (default 100)")
    p.add_argument("--ny", type=int, default=100, help="elements along y (default 100)")
    p.add_argument("--nz", type=int, default=100, help="elements along z (default 100)")
    p.add_argument("--ranks", type=int, default=1, help="simulated rank count")
    p.add_argument("--format", choices=FORMATS, default="crs", help="SpMV kernel, or compare-all")
    p.add_argument("--collectives", choices=COLLECTIVES, default="all-collectives")
    p.add_argument("--tol", type=float, default=1e-8, help="relative residual tolerance")
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--reps", type=int, default=1, help="CG repetitions per kernel")
    p.add_argument("--report", metavar="PATH", help="write the JSON report (and a .txt table)")
    p.add_argument("--dump-matrix", metavar="PATH", help="write the constrained matrix as MatrixMarket")
    p.add_argument("--seed", type=int, default=0, help="seed for the diagnostic SpMV input")
    p.add_argument("--recompute-every", type=int, default=None,
                   help="explicit residual every N iterations (0 disables)")
    p.add_argument("--terms", type=int, default=300, help="odd series terms per index")
    p.add_argument("--no-warmup", action="store_true", help="skip kernel compilation warm-up")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = RunConfig(
        nx=args.nx, ny=args.ny, nz=args.nz, ranks=args.ranks, format=args.format,
        collectives=args.collectives, tol=args.tol, max_iters=args.max_iters, reps=args.reps,
        report=args.report, dump_matrix=args.dump_matrix, seed=args.seed,
        recompute_every=args.recompute_every, terms=args.terms,
    )
    try:
        config.validate()
        if not args.no_warmup:
            warmup()
        report = run(config)
    except ConfigError as exc:
        print(f"feproxy: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (PhaseError, OSError) as exc:
        print(f"feproxy: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(format_table(report))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
