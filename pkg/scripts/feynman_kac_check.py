"""Monte Carlo check of the backward transform against kernel quadrature."""

import argparse
import time

import numpy as np

from lqbridge.kernel import build_kernel
from lqbridge.ltv_system import BUILTINS
from lqbridge.oracle import feynman_kac


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--system", default="diagonal_case", choices=sorted(BUILTINS))
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    sys = BUILTINS[args.system]()
    if sys.n != 1:
        ap.error("this script handles scalar systems")
    K = build_kernel(sys)

    def phi1(Y):
        return np.exp(-0.5 * (Y[:, 0] - 0.5) ** 2) + 0.5

    ys = np.linspace(-14.0, 14.0, 8001)
    w = np.full(ys.size, ys[1] - ys[0])
    w[[0, -1]] *= 0.5
    for k, x in enumerate((-1.0, 0.0, 1.0)):
        ref = float(np.sum(K(np.full((ys.size, 1), x), ys[:, None]) * phi1(ys[:, None]) * w))
        t = time.perf_counter()
        est = feynman_kac(sys, phi1, sys.t0, [x], sys.t1, paths=args.paths, dt=args.dt, seed=args.seed + k)
        z = (est.mean - ref) / est.std_error
        print(f"x={x:+.1f}  quadrature {ref:.6f}  MC {est.mean:.6f} +- {est.std_error:.1e}  z={z:+.2f}  "
              f"({time.perf_counter() - t:.1f} s)")


if __name__ == "__main__":
    main()
