"""Compare the general kernel pipeline with the heat, linear and diagonal closed forms."""

import argparse

import numpy as np

from lqbridge.kernel import build_kernel, closed_form_kernel
from lqbridge.ltv_system import diagonal_case, heat, linear_example


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--points", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    cases = [
        ("heat n=2", heat(2), "heat", {}),
        ("linear", linear_example(), "linear", None),
        ("diagonal D=(0.25, 1)", diagonal_case([0.25, 1.0]), "diagonal", {"D": [0.25, 1.0]}),
    ]
    for label, sys, case, params in cases:
        params = {"sys": sys} if params is None else params
        K = build_kernel(sys, case="general")
        X, Y = rng.normal(size=(args.points, sys.n)), rng.normal(size=(args.points, sys.n))
        ref = np.array([closed_form_kernel(case, params, 0.0, x, 1.0, y) for x, y in zip(X, Y)])
        err = np.max(np.abs(K(X, Y) - ref) / ref)
        print(f"{label:<22} max rel err {err:.2e}   a = {K.a:.10f}   c = {K.c:.10f}")


if __name__ == "__main__":
    main()
