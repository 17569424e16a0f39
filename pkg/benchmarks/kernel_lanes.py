"""Benchmark the two kernel lanes (numba vs pure numpy).

Runs the hot kernels on representative shapes in the current lane, then
re-invokes itself with TUBE_NMPC_BACKEND=numpy for the fallback lane and
prints a side-by-side table.

Usage: python3 benchmarks/kernel_lanes.py [--repeats N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from tube_nmpc import kernels
from tube_nmpc.config import load_params

HP = 10        # shooting horizon
N_SUB = 10     # substeps per control interval
DT = 0.025     # substep, d


def make_inputs():
    cfg, p = load_params()
    rng = np.random.default_rng(7)
    x = np.array([5.0, 10.0, 12.0, 0.5, 1.0, 2.0, 8.0, 60.0, 50.0])
    x_starts = x * rng.uniform(0.8, 1.2, size=(HP, cfg.n))
    flows = rng.uniform(0.05, 0.2, size=(HP, N_SUB, cfg.m))
    mu2f = np.ones((HP, N_SUB))
    return cfg, p, x_starts, flows, mu2f


def bench(repeats):
    cfg, p, x_starts, flows, mu2f = make_inputs()
    kin = p.pack()
    args = (DT, cfg.theta_u_matrix, p.k_hyd, kin, cfg.volume)
    cases = {
        "rk4_horizon_sens": lambda: kernels.rk4_horizon_sens(
            x_starts, flows, mu2f, *args),
        "rk4_horizon": lambda: kernels.rk4_horizon(
            x_starts, flows, mu2f, *args),
        "rk4_chain_sens": lambda: kernels.rk4_chain_sens(
            x_starts[0], flows, mu2f, *args),
        "rk4_interval": lambda: kernels.rk4_interval(
            x_starts[0], flows[0], mu2f[0], *args, True),
        "output_traj_jac": lambda: kernels.output_traj_jac(
            x_starts, kin, cfg.m, mu2f[:, 0]),
    }
    out = {}
    for name, fn in cases.items():
        fn()  # warm-up (jit compile on the numba lane)
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        out[name] = (time.perf_counter() - t0) / repeats * 1e6  # us
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--emit-json", action="store_true",
                    help="print raw timings as JSON (used by the re-exec)")
    args = ap.parse_args()

    timings = bench(args.repeats)
    if args.emit_json:
        print(json.dumps({"backend": kernels.backend_name(),
                          "timings": timings}))
        return

    env = dict(os.environ, TUBE_NMPC_BACKEND="numpy")
    other = json.loads(subprocess.run(
        [sys.executable, os.path.abspath(__file__),
         "--repeats", str(max(args.repeats // 10, 1)), "--emit-json"],
        env=env, check=True, capture_output=True, text=True).stdout)

    here = kernels.backend_name()
    print(f"kernel timings, microseconds per call "
          f"(hp={HP}, n_sub={N_SUB}, n={9})")
    print(f"{'kernel':<20}{here:>12}{other['backend']:>12}{'speedup':>10}")
    for name, t in timings.items():
        t2 = other["timings"][name]
        print(f"{name:<20}{t:>12.1f}{t2:>12.1f}{t2 / t:>10.1f}x")


if __name__ == "__main__":
    main()
