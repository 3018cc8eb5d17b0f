"""Time the hot kernels under both backends.

    python benchmarks/bench_kernels.py [--scale desk|full] [--repeat N]

Prints one row per (kernel, backend) with the best wall time over the
repeats and the numba/numpy speedup. The first numba call per kernel is a
compile and is excluded.
"""
import argparse
import time

import numpy as np

from mjlspo import kernels
from mjlspo.model import Policy, generate_random_model
from mjlspo.oracle import _cumulative
from mjlspo.policy_opt import evaluate

SCALES = {"desk": (10, 20, 4), "full": (100, 100, 20), "mid": (50, 50, 10)}


def _args(m, n_rollouts=2000, horizon=100):
    rng = np.random.default_rng(0)
    pi = Policy.zeros(m)
    phi = m.closed_loop(pi)
    P = np.ascontiguousarray(np.broadcast_to(np.eye(m.d), (m.n_s, m.d, m.d)))
    base = m.stage_weight(pi)
    return {
        "expectation": (m.trans, P),
        "lyapunov_sweep": (phi, m.trans, P, base),
        "correlation_sweep": (phi, m.trans, P, base),
        "riccati_sweep": (m.A, m.B, m.Q, m.R, m.trans, P),
        "rollout_costs": (
            phi, base, _cumulative(m.rho), _cumulative(m.trans),
            rng.standard_normal((n_rollouts, m.d)), rng.random(n_rollouts), rng.random((n_rollouts, horizon)),
        ),
    }


def _best(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", choices=sorted(SCALES), default="desk")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    n_s, d, k = SCALES[args.scale]
    m = generate_random_model(n_s, d, k, seed=0)
    backends = kernels.available_backends()
    print("scale %s (n_s=%d, d=%d, k=%d), backends: %s" % (args.scale, n_s, d, k, ", ".join(backends)))
    print("%-18s %12s %12s %9s" % ("kernel", "numpy [ms]", "numba [ms]", "speedup"))
    for name, kargs in _args(m).items():
        times = {}
        for b in backends:
            fn = kernels.get_kernel(name, b)
            fn(*kargs)  # warm-up / compile
            times[b] = _best(fn, kargs, args.repeat)
        nb = times.get("numba")
        print(
            "%-18s %12.3f %12s %9s"
            % (name, 1e3 * times["numpy"], "-" if nb is None else "%.3f" % (1e3 * nb),
               "-" if nb is None else "%.2fx" % (times["numpy"] / nb))
        )

    # one full policy evaluation (Lyapunov + correlation solves) end to end
    for b in backends:
        with kernels.using_backend(b):
            evaluate(m, Policy.zeros(m))
            t0 = time.perf_counter()
            evaluate(m, Policy.zeros(m))
            print("evaluate at K=0 with %-5s: %.3f s" % (b, time.perf_counter() - t0))


if __name__ == "__main__":
    main()
