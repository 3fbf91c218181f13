#!/usr/bin/env python3
"""Token-budget rate study with the batch scale pinned at the critical value.

Estimates the problem constants from a pilot run of the logistic objective,
then trains once per budget with BS = critical(T) and the 1/K stepsize rule.
Writes (T, BS, K, mean loss) rows and prints the fitted log-log slope; the
flat-regime prediction decays as the cube root of the budget.
"""

import argparse
import csv

import numpy as np

from scgscale import experiments

FMT = "{:.17g}".format


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="middle_regime_rate.csv")
    ap.add_argument("--repetitions", type=int, default=5)
    ap.add_argument("--seed-base", type=int, default=77)
    ap.add_argument("--log2-budgets", default="14:23", help="start:stop exponents")
    args = ap.parse_args()

    lo, hi = (int(v) for v in args.log2_budgets.split(":"))
    out = experiments.middle_regime_rates(
        t_exponents=tuple(range(lo, hi)),
        repetitions=args.repetitions,
        seed_base=args.seed_base,
    )
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "BS", "K", "final_loss_mean"])
        for T, bs, m in zip(out["budgets"], out["critical_scales"], out["mean_losses"]):
            w.writerow([FMT(T), FMT(bs), int(T // bs), FMT(m)])
    c = out["constants"]
    print(f"wrote {args.out}")
    print(f"estimated constants: L={c.L:.4g} mu={c.mu:.4g} rho={c.rho:.4g}")
    print(f"log-log slope of final loss vs budget: {out['slope']:.3f} (predicted -1/3)")


if __name__ == "__main__":
    main()
