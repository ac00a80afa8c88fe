#!/usr/bin/env python3
"""Rate-exponent experiment: fit gradient-norm decay for all five methods.

Runs every momentum variant with its default decreasing schedule on one
heterogeneous quadratic instance (shared across methods and seeds), fits the
log-log slope of the stepsize-weighted gradient average over a geometric grid
of prefix horizons, and reports mean slope +- stderr per method.

Reference targets under compression and noise: -1/4 for sgdm, -2/7 for igt,
-1/3 for mvr/hm/rhm, up to logarithmic factors.

Example:
    python scripts/rate_experiment.py --iters 100000 --seeds 1,2,3,4,5 --out rates.csv
"""

import argparse
import sys
import time

from efmom import schedules
from efmom.compressors import spec_from_fraction
from efmom.engine import ProblemConfig, RunConfig
from efmom.harness import compare_methods


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--methods", default="sgdm,igt,mvr,hm,rhm")
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("--clients", type=int, default=10)
    ap.add_argument("--dim", type=int, default=200)
    ap.add_argument("--iters", type=int, default=100_000)
    ap.add_argument("--sigma-g", type=float, default=1.0)
    ap.add_argument("--heterogeneity", type=float, default=1.0)
    ap.add_argument("--condition", type=float, default=10.0)
    ap.add_argument("--quad-structure", default="diagonal",
                    choices=["diagonal", "rotated"])
    ap.add_argument("--topk-fraction", type=float, default=0.1)
    ap.add_argument("--gamma0", type=float, default=1.0)
    ap.add_argument("--problem-seed", type=int, default=2025)
    ap.add_argument("--eps", type=float, default=None,
                    help="also report iterations/bits to reach this weighted average")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default=None, help="CSV path for per-run rows")
    args = ap.parse_args(argv)

    base = RunConfig(
        kind="sgdm",
        schedule=schedules.for_kind("sgdm", gamma0=args.gamma0),
        compressor=spec_from_fraction("topk", args.dim, args.topk_fraction),
        problem=ProblemConfig(
            family="quadratic", n=args.clients, d=args.dim, seed=args.problem_seed,
            sigma_g=args.sigma_g, heterogeneity=args.heterogeneity,
            condition=args.condition, structure=args.quad_structure,
        ),
        iterations=args.iters,
        record_stride=max(1, args.iters // 100),
    )
    kinds = [k.strip() for k in args.methods.split(",") if k.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]

    t0 = time.time()
    report = compare_methods(base, kinds, seeds, epsilon=args.eps, workers=args.workers)
    print(report.format_table())
    print(f"({len(report.rows)} runs, {time.time() - t0:.1f}s)")
    if args.out:
        report.to_csv(args.out)
        print(f"per-run rows written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
