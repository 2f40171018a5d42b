"""Compiled vs numpy integration kernel on a fan of geodesics (+ Jacobi fields).

    python3 benchmarks/bench_kernels.py --rays 256 --length 2 --repeat 3
"""

import argparse
import json
import time

import numpy as np

from geoblock import kernels
from geoblock import geodesicflow as gf
from geoblock.metricfield import Bump, ConformalBumpMetric


def fan(g, x, n, ncols):
    theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    V = np.stack([gf.direction_from_angle(g, x, th) for th in theta])
    y0 = np.zeros((n, 4 + 4 * ncols))
    y0[:, :2] = x
    y0[:, 2:4] = V
    if ncols:
        y0[:, 4 + 2 * ncols:4 + 4 * ncols] = np.column_stack([-V[:, 1], V[:, 0]])
    return y0


def timed(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rays", type=int, default=256)
    ap.add_argument("--length", type=float, default=2.0)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--jacobi", action="store_true", help="carry one Jacobi field per ray")
    args = ap.parse_args(argv)

    g = ConformalBumpMetric([Bump((0.5, 0.5), 0.5, 0.3), Bump((0.1, 0.8), -0.3, 0.2)])
    x = np.array([0.2, 0.3])
    ncols = 1 if args.jacobi else 0
    y0 = fan(g, x, args.rays, ncols)
    t_eval = gf.sample_times(args.length)
    bumps = gf._bump_array(g)
    cap = gf.step_cap(g)

    def run(backend):
        return lambda: kernels.integrate_conformal(bumps, y0, t_eval, ncols, gf.RTOL, gf.ATOL, hmax=cap,
                                                   backend=backend)

    t_py, out_py = timed(run("python"), args.repeat)
    report = {"rays": args.rays, "length": args.length, "jacobi": bool(ncols), "python_s": t_py}
    if kernels.BACKEND == "cython":
        t_cy, out_cy = timed(run("cython"), args.repeat)
        report.update(cython_s=t_cy, speedup=t_py / t_cy, max_abs_diff=float(np.max(np.abs(out_py - out_cy))))
    else:
        report["cython_s"] = None
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
