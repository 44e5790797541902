"""Compare the compiled and pure-Python batched Newton kernels.

    python benchmarks/bench_kernels.py [--days 3] [--repeat 3]

Solves ``days * 96`` operating points of the reference feeder with each
backend, checks that both return the same voltages, and prints timings.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from dpphasor import kernels
from dpphasor.evaluation import panel_loads
from dpphasor.grid import reduce_network
from dpphasor.powerflow import InjectionSpec, solve_powerflow_batch
from dpphasor.reference import reference_feeder, reference_irradiance, reference_panel


def _time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--days", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    net = reference_feeder()
    red = reduce_network(net)
    panel = reference_panel(net, days=args.days)
    loads = panel_loads(panel, net.retained_ids)
    T = panel.steps_per_day
    spec = InjectionSpec.for_network(net).replace(
        p=loads.reshape(-1, red.n), h=np.tile(reference_irradiance(T), args.days)
    )
    m = spec.p.shape[0]
    print(f"{m} operating points, n = {red.n} retained buses")
    results = {}
    for backend in ("python", "cython"):
        if backend == "cython" and not kernels.HAVE_COMPILED:
            print("cython: extension not built, skipped")
            continue
        t, traj = _time(lambda: solve_powerflow_batch(red, spec, backend=backend), args.repeat)
        results[backend] = traj
        print(f"{backend:>7}: {t * 1e3:9.1f} ms total, {t / m * 1e6:8.1f} us/solve, "
              f"converged {traj.converged.sum()}/{m}")
    if len(results) == 2:
        dv = np.max(np.abs(results["python"].v - results["cython"].v))
        print(f"max |v_python - v_cython| = {dv:.3e}")


if __name__ == "__main__":
    main()
