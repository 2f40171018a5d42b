import os
import subprocess
import sys

import numpy as np
import pytest

from geoblock import geodesicflow as gf
from geoblock import kernels


def fan(g, x, n, jacobi):
    theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    V = np.stack([gf.direction_from_angle(g, x, th) for th in theta])
    ncols = 1 if jacobi else 0
    y0 = np.zeros((n, 4 + 4 * ncols))
    y0[:, :2] = x
    y0[:, 2:4] = V
    if jacobi:
        y0[:, 6:8] = np.column_stack([-V[:, 1], V[:, 0]])
    return y0, ncols


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernel not built")
@pytest.mark.parametrize("jacobi", [False, True])
def test_backends_agree(two_bumps, jacobi):
    y0, ncols = fan(two_bumps, np.array([0.2, 0.3]), 16, jacobi)
    t = gf.sample_times(1.5)
    args = (gf._bump_array(two_bumps), y0, t, ncols, gf.RTOL, gf.ATOL)
    a = kernels.integrate_conformal(*args, hmax=gf.step_cap(two_bumps), backend="python")
    b = kernels.integrate_conformal(*args, hmax=gf.step_cap(two_bumps), backend="cython")
    assert np.max(np.abs(a - b)) <= 1e-9


def test_generic_path_matches_conformal(two_bumps):
    """The per-row numpy DP5 on the analytic right-hand side agrees with the conformal kernel."""
    y0, _ = fan(two_bumps, np.array([0.2, 0.3]), 8, False)
    t = gf.sample_times(1.0)
    a = kernels.integrate_conformal(gf._bump_array(two_bumps), y0, t, 0, gf.RTOL, gf.ATOL,
                                    hmax=gf.step_cap(two_bumps), backend="python")
    b = kernels.dp5_integrate(two_bumps.accel, two_bumps.norm2, y0, t, 0, gf.RTOL, gf.ATOL,
                              h_max=gf.step_cap(two_bumps))
    assert np.max(np.abs(a - b)) <= 1e-9


def test_env_forces_fallback():
    out = subprocess.run([sys.executable, "-c", "from geoblock import kernels; print(kernels.BACKEND)"],
                         env=dict(os.environ, GEOBLOCK_KERNEL="python"), capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
