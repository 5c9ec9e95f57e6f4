"""Solve the bimodal-to-bimodal bridge on the diagonal system and print marginal moments."""

import argparse

import numpy as np

from lqbridge.ltv_system import diagonal_case
from lqbridge.sinkhorn import GaussianMixture, solve_bridge


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--D", type=float, default=0.25)
    ap.add_argument("--slices", type=int, default=11)
    args = ap.parse_args()

    rho0 = GaussianMixture([0.5, 0.5], [[-1.5], [1.5]], [[[0.25]], [[0.25]]])
    rho1 = GaussianMixture([0.3, 0.7], [[-0.5], [2.5]], [[[0.2]], [[0.4]]])
    br = solve_bridge(diagonal_case([args.D]), rho0, rho1, slices=args.slices)
    st = br.state
    print(f"iterations {st.iteration}, residuals {st.residuals[0]:.2e} / {st.residuals[1]:.2e}")
    print(f"{'t':>6} {'mass':>12} {'mean':>10} {'var':>10} {'max|u|':>10}")
    for t, m, u in zip(br.times, br.marginals, br.control):
        mu, cov = m.moments()
        print(f"{t:6.2f} {m.mass():12.9f} {mu[0]:10.5f} {cov[0, 0]:10.5f} {np.nanmax(np.abs(u)):10.4f}")


if __name__ == "__main__":
    main()
