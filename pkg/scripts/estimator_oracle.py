"""Reference quantiles for the median Cauchy l1 estimator.

The lower median of r draws |v^T R| over standard Cauchy R is ||v||_1 times the
k-th order statistic (k = ceil(r/2)) of r half-Cauchy variables, whose CDF is
(2/pi) atan(t). The ratio estimate/||v||_1 therefore has the closed-form CDF
BetaCDF((2/pi) atan(t); k, r-k+1). Quantiles of the relative error and of its
magnitude are solved from that CDF; a Monte Carlo run over scipy's Cauchy
sampler (independent of the package generator) cross-checks them.

For each quantile the fixture also stores a band that a sample of n trials
falls in with probability about 1 - 1e-4 (quantile levels q -/+ 4 binomial
standard deviations).

Writes tests/fixtures/median_estimator_bands.json.
"""
import argparse
import json
import os

import numpy as np
from scipy import optimize, stats


def ratio_cdf(r, t):
    k = (r + 1) // 2
    return stats.beta.cdf(2 / np.pi * np.arctan(np.maximum(t, 0.0)), k, r - k + 1)


def rel_quantile(r, q):
    k = (r + 1) // 2
    return float(np.tan(0.5 * np.pi * stats.beta.ppf(q, k, r - k + 1))) - 1.0


def abs_quantile(r, q):
    f = lambda t: ratio_cdf(r, 1 + t) - ratio_cdf(r, 1 - t) - q
    return float(optimize.brentq(f, 0.0, 1e6, xtol=1e-14))


def monte_carlo(r, draws, seed):
    rng = np.random.default_rng(seed)
    k = (r + 1) // 2
    est = np.empty(draws)
    chunk = 20000
    for s in range(0, draws, chunk):
        c = np.abs(stats.cauchy.rvs(size=(min(chunk, draws - s), r), random_state=rng))
        est[s:s + chunk] = np.partition(c, k - 1, axis=1)[:, k - 1]
    e = est - 1.0
    return {"p5": float(np.quantile(e, .05)), "p50": float(np.quantile(e, .5)),
            "p95": float(np.quantile(e, .95)), "p50_abs": float(np.median(np.abs(e)))}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--r", default="10,50,100")
    ap.add_argument("--trials", type=int, default=10_000, help="sample size the bands are built for")
    ap.add_argument("--draws", type=int, default=400_000, help="Monte Carlo cross-check draws")
    ap.add_argument("--seed", type=int, default=12345)
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures",
                                                  "median_estimator_bands.json"))
    args = ap.parse_args()
    n = args.trials
    bands = {}
    for r in (int(v) for v in args.r.split(",")):
        entry = {}
        for name, q, fn in (("p5", .05, rel_quantile), ("p50", .5, rel_quantile),
                            ("p95", .95, rel_quantile), ("p50_abs", .5, abs_quantile)):
            sd = 4 * np.sqrt(q * (1 - q) / n)
            entry[name] = {"value": fn(r, q), "lo": fn(r, q - sd), "hi": fn(r, q + sd)}
        mc = monte_carlo(r, args.draws, args.seed + r)
        for name in entry:
            entry[name]["monte_carlo"] = mc[name]
            assert entry[name]["lo"] <= mc[name] <= entry[name]["hi"], (r, name, mc[name], entry[name])
        bands[str(r)] = entry
    out = {"estimator": "lower median of |v^T R| / ||v||_1 - 1, R standard Cauchy",
           "trials": n, "draws": args.draws, "seed": args.seed, "bands": bands}
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for r, b in bands.items():
        print(r, {k: round(v["value"], 4) for k, v in b.items()})


if __name__ == "__main__":
    main()
