"""Compare the compiled kernel extension against the pure-NumPy fallback.

Times each low-level kernel plus one end-to-end expected-risk call on
both backends and prints a speedup table. The two backends are imported
side by side, so the numbers come from one process and one NumPy.

Usage: python benchmarks/bench_kernels.py [--points N] [--data M]
       [--repeats R]
"""

import argparse
import time

import numpy as np

from ldaf import _kernels_py
from ldaf.manifold import basis_embed
from ldaf.quadrature import _direction_table

try:
    from ldaf import _kernels as _compiled
except ImportError:
    _compiled = None


def best_of(repeats, fn):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(n_points, m_data, seed=0):
    rng = np.random.default_rng(seed)
    table = _direction_table(2)
    u = rng.random(n_points * 2)
    z = rng.standard_normal((n_points, 2))
    marginals = []
    for _ in range(m_data):
        mean = rng.standard_normal(2)
        a = rng.standard_normal((2, 2))
        chol = np.linalg.cholesky(a @ a.T + 0.1 * np.eye(2))
        shift = basis_embed(rng.standard_normal(2))
        marginals.append((mean, chol, shift, int(rng.integers(3))))
    return table, u, z, marginals


def kernel_timings(backend, table, u, z, marginals, repeats):
    mean, chol, shift, label = marginals[0]

    def risk_sweep(kern):
        def run():
            for mn, ch, sh, lb in marginals:
                kern(z, mn, ch, sh, lb)

        return run

    return {
        "sobol_fill": best_of(
            repeats, lambda: backend.sobol_fill(table, 1, z.shape[0])
        ),
        "gauss_icdf": best_of(repeats, lambda: backend.gauss_icdf(u)),
        "zero_one_risk": best_of(repeats, risk_sweep(backend.zero_one_risk)),
        "cross_entropy_risk": best_of(
            repeats, risk_sweep(backend.cross_entropy_risk)
        ),
        "cross_entropy_grad": best_of(
            repeats,
            lambda: [
                backend.cross_entropy_grad(z, mn, ch, sh, lb)
                for mn, ch, sh, lb in marginals
            ],
        ),
    }


def check_agreement(table, u, z, marginals):
    """The two backends must agree before their timings mean anything."""
    worst = 0.0
    pairs = [
        (_compiled.sobol_fill(table, 1, 128), _kernels_py.sobol_fill(table, 1, 128)),
        (_compiled.gauss_icdf(u[:256]), _kernels_py.gauss_icdf(u[:256])),
    ]
    for got, want in pairs:
        worst = max(worst, float(np.max(np.abs(got - want))))
    for mean, chol, shift, label in marginals[:4]:
        for kern in ("zero_one_risk", "cross_entropy_risk"):
            vc = getattr(_compiled, kern)(z, mean, chol, shift, label)
            vp = getattr(_kernels_py, kern)(z, mean, chol, shift, label)
            worst = max(worst, abs(vc - vp))
    return worst


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--points", type=int, default=8192, help="QMC points")
    parser.add_argument("--data", type=int, default=64, help="marginals per sweep")
    parser.add_argument("--repeats", type=int, default=5, help="best-of repeats")
    args = parser.parse_args()

    if _compiled is None:
        print("compiled extension not importable; nothing to compare")
        return 1

    table, u, z, marginals = make_cases(args.points, args.data)
    gap = check_agreement(table, u, z, marginals)
    print(
        "agreement check: max |compiled - pure| = %.3e over shared inputs" % gap
    )
    print(
        "timing: %d points, %d marginals, best of %d runs"
        % (args.points, args.data, args.repeats)
    )

    fast = kernel_timings(_compiled, table, u, z, marginals, args.repeats)
    slow = kernel_timings(_kernels_py, table, u, z, marginals, args.repeats)
    header = "%-20s %12s %12s %9s" % ("kernel", "compiled", "pure", "speedup")
    print(header)
    print("-" * len(header))
    for name in fast:
        print(
            "%-20s %10.3f ms %10.3f ms %8.1fx"
            % (name, 1e3 * fast[name], 1e3 * slow[name], slow[name] / fast[name])
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
