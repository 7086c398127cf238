#!/usr/bin/env python3
"""Second-moment regimes of the degenerate (d=0) explosive condensation kernel.

Scans the exchange exponent through the four regimes: power-law growth,
exponential growth, finite-time blow-up (flag time stable under truncation
doubling) and instantaneous blow-up (flag time decreasing under doubling).
"""

import argparse

import numpy as np

from misanthrope import diagnostics as D
from misanthrope import initial as I
from misanthrope import kernels as K
from misanthrope import meanfield as M


def run(lam, horizon, max_K, threshold, f0):
    f00 = f0[: max_K + 1] / f0[: max_K + 1].sum()
    return M.integrate(
        f00,
        K.ecp(lam, 0.0),
        horizon,
        M.SolverConfig(max_K=max_K, K_init=min(64, max_K), blowup_m2_threshold=threshold),
        record_times=np.linspace(horizon / 100, horizon, 60).tolist(),
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rho", type=float, default=1.0)
    args = ap.parse_args()
    f0 = I.poisson_pmf(args.rho)

    sol = run(1.0, 30.0, 256, 1e18, f0)
    rep = D.coarsening_fit(sol.times, sol.moments(2), window=(5.0, 30.0))
    print(f"lam=1.00: m2 regime {rep.regime}, exponent {rep.exponent:.3f} (expect 1)")

    sol = run(1.5, 6.0, 128, 15.0, f0)
    keep = sol.times <= (sol.blowup_time or 6.0)
    rep = D.coarsening_fit(
        sol.times[keep], sol.moments(2)[keep], window=(0.15, float(sol.times[keep][-1]))
    )
    print(f"lam=1.50: m2 regime {rep.regime} (expect exponential)")

    for lam, ks, threshold in ((1.75, (128, 256, 512), 10.0), (2.5, (64, 128, 256), 4.0)):
        flags = []
        for max_K in ks:
            sol = M.integrate(
                f0[: max_K + 1] / f0[: max_K + 1].sum(),
                K.ecp(lam, 0.0),
                3.0,
                M.SolverConfig(
                    max_K=max_K,
                    K_init=max_K if lam > 2 else min(64, max_K),
                    blowup_m2_threshold=threshold,
                ),
                record_times=[3.0],
            )
            flags.append(sol.blowup_time)
        tag = "stable t_c" if lam < 2 else "decreasing (instantaneous)"
        print(
            f"lam={lam:.2f}: blow-up flag vs truncation {list(ks)}: "
            + ", ".join("none" if f is None else f"{f:.4f}" for f in flags)
            + f"  ({tag})"
        )


if __name__ == "__main__":
    main()
