#!/usr/bin/env python3
"""Monte Carlo reference for the median l1 estimator's relative error.

For any nonzero v, v.R / |v|_1 is standard Cauchy, so the relative error of
the median estimator with r projections is distributed as
(lower median of r |Cauchy| draws) - 1.  This script records reference
quantiles of that error and the spread of each quantile when it is measured
from `trials` draws, which the acceptance check uses as its band.
"""

import argparse
import json

import numpy as np

QUANTILES = {"p5": 0.05, "p50": 0.5, "p95": 0.95}


def errors(rng, r, n):
    draws = np.abs(rng.standard_cauchy((n, r)))
    return np.partition(draws, (r - 1) // 2, axis=1)[:, (r - 1) // 2] - 1.0


def stats(e):
    out = {k: float(np.quantile(e, q)) for k, q in QUANTILES.items()}
    out["p50_abs"] = float(np.quantile(np.abs(e), 0.5))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--trials", type=int, default=10000)
    ap.add_argument("--reference", type=int, default=2000000)
    ap.add_argument("--replicates", type=int, default=300)
    ap.add_argument("--seed", type=int, default=20240611)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    table = {"trials": args.trials, "band_sigmas": 4.0, "r": {}}
    for r in (10, 50, 100):
        ref = stats(np.concatenate([errors(rng, r, 200000) for _ in range(args.reference // 200000)]))
        reps = [stats(errors(rng, r, args.trials)) for _ in range(args.replicates)]
        sd = {k: float(np.std([s[k] for s in reps], ddof=1)) for k in ref}
        table["r"][str(r)] = {"reference": ref, "sd": sd}
    with open(args.out, "w") as f:
        json.dump(table, f, indent=1, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
