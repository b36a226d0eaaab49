"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_backends.py [--sizes 500,5000,50000] [--repeat 5]

Kernels are warmed up (compiled) before timing; each figure is the best
of ``--repeat`` runs. The last block times a complete t fit.
"""

import argparse
import time

import numpy as np

from moe_robust import _accel
from moe_robust.em import FitConfig, fit
from moe_robust.kernels import FAMILY_T, estep_arrays, log_gate_probs, q1_derivatives
from moe_robust.simulate import SimSpec, simulate, table1_params


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(n, K=3):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, n)
    X = R = np.column_stack([np.ones(n), x])
    y = rng.normal(size=n)
    alpha = rng.normal(size=(K - 1, 2))
    beta = rng.normal(size=(K, 2))
    sigma2 = rng.uniform(0.1, 1, K)
    nu = rng.uniform(2, 30, K)
    tau = rng.dirichlet(np.ones(K), size=n)
    return {
        "gate softmax": lambda: log_gate_probs(R, alpha),
        "t E-step": lambda: estep_arrays(y, X, R, alpha, beta, sigma2, nu, FAMILY_T),
        "Q1 grad+Hessian": lambda: q1_derivatives(tau, R, alpha),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="500,5000,50000")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--fit-n", type=int, default=1000)
    args = ap.parse_args()
    if not _accel.NUMBA_ENABLED:
        raise SystemExit("numba is disabled (MOE_ROBUST_NUMBA=0); nothing to compare")

    print(f"{'kernel':<18}{'n':>8}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for n in (int(s) for s in args.sizes.split(",")):
        for name, fn in kernel_cases(n).items():
            row = {}
            for backend in ("numpy", "numba"):
                with _accel.backend(backend):
                    fn()  # warm-up / compile
                    row[backend] = best_of(fn, args.repeat)
            print(
                f"{name:<18}{n:>8}{1e3 * row['numpy']:>12.3f}{1e3 * row['numba']:>12.3f}"
                f"{row['numpy'] / row['numba']:>10.1f}"
            )

    data = simulate(SimSpec(table1_params("TMoE"), args.fit_n, rng_seed=1)).data
    cfg = FitConfig(n_restarts=3)
    row = {}
    for backend in ("numpy", "numba"):
        with _accel.backend(backend):
            fit(data, "TMoE", 2, FitConfig(n_restarts=1, max_em_iters=5))
            row[backend] = best_of(lambda: fit(data, "TMoE", 2, cfg), max(1, args.repeat // 2))
    print(
        f"{'TMoE fit, 3 runs':<18}{args.fit_n:>8}{1e3 * row['numpy']:>12.1f}{1e3 * row['numba']:>12.1f}"
        f"{row['numpy'] / row['numba']:>10.1f}"
    )


if __name__ == "__main__":
    main()
