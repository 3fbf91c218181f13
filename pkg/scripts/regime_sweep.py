#!/usr/bin/env python3
"""Batch-scale sweep at a fixed token budget on the calibrated quadratic.

Sweeps the effective batch-sequence scale over powers of two, repeats each
point over seeds, and writes the measured-vs-predicted curve to CSV. The
printed summary locates the interior loss minimum relative to the predicted
critical scale and reports the log-log slope of the large-batch tail.
"""

import argparse
import math

import numpy as np

from scgscale import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="regime_sweep.csv")
    ap.add_argument("--repetitions", type=int, default=5)
    ap.add_argument("--seed-base", type=int, default=2024)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--log2-budget", type=int, default=20)
    args = ap.parse_args()

    result, consts, bs_star = experiments.regime_sweep(
        T=float(2**args.log2_budget),
        exponents=tuple(range(0, min(19, args.log2_budget - 1))),
        repetitions=args.repetitions,
        seed_base=args.seed_base,
        jobs=args.jobs,
    )
    experiments.sweep_rows_to_csv(result, args.out)

    bs = np.array([r.B * r.S for r in result.rows])
    losses = np.array([r.final_loss_mean for r in result.rows])
    idx = int(np.argmin(losses))
    window = bs > 8.0 * bs_star
    slope = float(np.polyfit(np.log(bs[window]), np.log(losses[window]), 1)[0])
    print(f"wrote {args.out}")
    print(
        f"constants: L={consts.L:.4g} mu={consts.mu:.4g} rho={consts.rho:.4g} "
        f"sigma*={consts.sigma_star:.4g}"
    )
    print(
        f"critical scale 2^{math.log2(bs_star):.2f}, measured minimum at "
        f"2^{math.log2(bs[idx]):.0f} (factor {max(bs[idx]/bs_star, bs_star/bs[idx]):.2f})"
    )
    print(f"large-batch slope beyond 8x critical: {slope:.2f}")


if __name__ == "__main__":
    main()
