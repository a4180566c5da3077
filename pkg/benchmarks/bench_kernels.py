"""Compare the numba and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--grid 64] [--species 5] [--repeats 20]

Times the periodic stencil, mass-action forward and backward, and one full
differentiable rollout (forward + backward) under each backend, and reports
the largest elementwise disagreement between the two, relative to the
largest magnitude in the numpy result.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from dense_rdn.crn import build_dense_crn
from dense_rdn.diffcore import Tape, backward, kernels
from dense_rdn.optim import init_parameters
from dense_rdn.reactor import laplacian_kernel, rollout


def best_of(fn, repeats: int) -> float:
    fn()  # warm-up (includes JIT compilation for numba)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def rollout_grad(x0, params, T):
    tape = Tape()
    x = tape.leaf(x0)
    traj = rollout(x, params, T)
    return backward(traj.final.sum())[x]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--grid", type=int, default=64)
    ap.add_argument("--species", type=int, default=5)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--T", type=int, default=16, help="rollout length for the end-to-end case")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    crn = build_dense_crn(args.species)
    params = init_parameters(crn, rng)
    k = params.rate_vector().value
    n, g = args.species, args.grid
    x = rng.uniform(0.0, 1.0, (1, n, g, g))
    grad_out = rng.normal(size=(1, crn.n_directed, g, g))
    lap = laplacian_kernel(1.0)

    cases = {
        "conv2d_periodic": lambda: kernels.conv2d_periodic(x, lap),
        "mass_action": lambda: kernels.mass_action(x, k, crn.table),
        "mass_action_backward": lambda: kernels.mass_action_backward(x, k, crn.table, grad_out),
        f"rollout T={args.T} fwd+bwd": lambda: rollout_grad(x, params, args.T),
    }

    print(f"grid {g}x{g}, {n} species, {crn.n_directed} directed reactions, best of {args.repeats}")
    print(f"{'case':<28}{'numpy [ms]':>12}{'numba [ms]':>12}{'speed-up':>10}{'rel diff':>12}")
    previous = kernels.backend()
    try:
        for name, fn in cases.items():
            timing, results = {}, {}
            for be in ("numpy", "numba"):
                kernels.set_backend(be)
                timing[be] = best_of(fn, args.repeats if "rollout" not in name else max(2, args.repeats // 10))
                results[be] = fn()
            a, b = results["numpy"], results["numba"]
            pairs = zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,))
            diff = max(float(np.max(np.abs(np.asarray(u) - np.asarray(v))) / max(np.max(np.abs(u)), 1e-300))
                       for u, v in pairs)
            print(f"{name:<28}{1e3 * timing['numpy']:>12.3f}{1e3 * timing['numba']:>12.3f}"
                  f"{timing['numpy'] / timing['numba']:>10.2f}{diff:>12.2e}")
    finally:
        kernels.set_backend(previous)


if __name__ == "__main__":
    main()
