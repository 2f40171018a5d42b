# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Dormand-Prince 5(4) for geodesic + Jacobi systems of conformal-bump metrics.

Same contract as ``geoblock._pykernels.integrate_conformal`` except that every
ray gets its own adaptive step sequence.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs, round as cround, pow, isfinite, INFINITY

cnp.import_array()

DEF MAXD = 12

cdef double C2 = 1.0 / 5, C3 = 3.0 / 10, C4 = 4.0 / 5, C5 = 8.0 / 9

cdef double A21 = 1.0 / 5
cdef double A31 = 3.0 / 40, A32 = 9.0 / 40
cdef double A41 = 44.0 / 45, A42 = -56.0 / 15, A43 = 32.0 / 9
cdef double A51 = 19372.0 / 6561, A52 = -25360.0 / 2187, A53 = 64448.0 / 6561, A54 = -212.0 / 729
cdef double A61 = 9017.0 / 3168, A62 = -355.0 / 33, A63 = 46732.0 / 5247, A64 = 49.0 / 176, A65 = -5103.0 / 18656
cdef double B1 = 35.0 / 384, B3 = 500.0 / 1113, B4 = 125.0 / 192, B5 = -2187.0 / 6784, B6 = 11.0 / 84
cdef double E1 = 35.0 / 384 - 5179.0 / 57600
cdef double E3 = 500.0 / 1113 - 7571.0 / 16695
cdef double E4 = 125.0 / 192 - 393.0 / 640
cdef double E5 = -2187.0 / 6784 + 92097.0 / 339200
cdef double E6 = 11.0 / 84 - 187.0 / 2100
cdef double E7 = -1.0 / 40


cdef void lam_parts(double[:, ::1] bumps, double q0, double q1, int order,
                    double* lam, double* g, double* hs) nogil:
    cdef Py_ssize_t b
    cdef double dx, dy, r2, s, u, p, p1, p2, a, ds0, ds1
    lam[0] = 0.0
    g[0] = 0.0
    g[1] = 0.0
    hs[0] = 0.0
    hs[1] = 0.0
    hs[2] = 0.0
    for b in range(bumps.shape[0]):
        dx = q0 - bumps[b, 0]
        dy = q1 - bumps[b, 1]
        dx -= cround(dx)
        dy -= cround(dy)
        r2 = bumps[b, 3] * bumps[b, 3]
        s = (dx * dx + dy * dy) / r2
        if s >= 1.0:
            continue
        a = bumps[b, 2]
        u = 1.0 - s
        p = exp(1.0 - 1.0 / u)
        lam[0] += a * p
        if order == 0:
            continue
        p1 = -p / (u * u)
        ds0 = 2.0 * dx / r2
        ds1 = 2.0 * dy / r2
        g[0] += a * p1 * ds0
        g[1] += a * p1 * ds1
        if order == 2:
            p2 = p * (1.0 / (u * u * u * u) - 2.0 / (u * u * u))
            hs[0] += a * (p2 * ds0 * ds0 + p1 * 2.0 / r2)
            hs[1] += a * (p2 * ds0 * ds1)
            hs[2] += a * (p2 * ds1 * ds1 + p1 * 2.0 / r2)


cdef void rhs(double[:, ::1] bumps, int ncols, double* y, double* f) nogil:
    cdef double lam, g[2]
    cdef double hs[3]
    cdef double v0 = y[2], v1 = y[3]
    cdef double gv, vv, hv0, hv1
    cdef double aq[4]
    cdef double av[4]
    cdef int c, n = 2 * ncols
    cdef double J0, J1, P0, P1
    lam_parts(bumps, y[0], y[1], 2 if ncols > 0 else 1, &lam, g, hs)
    gv = g[0] * v0 + g[1] * v1
    vv = v0 * v0 + v1 * v1
    f[0] = v0
    f[1] = v1
    f[2] = -2.0 * gv * v0 + vv * g[0]
    f[3] = -2.0 * gv * v1 + vv * g[1]
    if ncols == 0:
        return
    hv0 = hs[0] * v0 + hs[1] * v1
    hv1 = hs[1] * v0 + hs[2] * v1
    aq[0] = -2.0 * v0 * hv0 + vv * hs[0]
    aq[1] = -2.0 * v0 * hv1 + vv * hs[1]
    aq[2] = -2.0 * v1 * hv0 + vv * hs[1]
    aq[3] = -2.0 * v1 * hv1 + vv * hs[2]
    av[0] = -2.0 * gv
    av[1] = -2.0 * v0 * g[1] + 2.0 * g[0] * v1
    av[2] = -2.0 * v1 * g[0] + 2.0 * g[1] * v0
    av[3] = -2.0 * gv
    # J stored row-major (2 x ncols) at y[4:4+n], J' at y[4+n:4+2n]
    for c in range(ncols):
        J0 = y[4 + c]
        J1 = y[4 + ncols + c]
        P0 = y[4 + n + c]
        P1 = y[4 + n + ncols + c]
        f[4 + c] = P0
        f[4 + ncols + c] = P1
        f[4 + n + c] = aq[0] * J0 + aq[1] * J1 + av[0] * P0 + av[1] * P1
        f[4 + n + ncols + c] = aq[2] * J0 + aq[3] * J1 + av[2] * P0 + av[3] * P1


cdef double speed(double[:, ::1] bumps, double* y) nogil:
    cdef double lam, g[2]
    cdef double hs[3]
    lam_parts(bumps, y[0], y[1], 0, &lam, g, hs)
    return exp(lam) * sqrt(y[2] * y[2] + y[3] * y[3])


cdef int integrate_one(double[:, ::1] bumps, int ncols, double* y, double[::1] t_eval,
                       double[:, ::1] out, double rtol, double atol, double h0, double hmax) nogil:
    cdef int D = 4 + 4 * ncols
    cdef double k1[MAXD]
    cdef double k2[MAXD]
    cdef double k3[MAXD]
    cdef double k4[MAXD]
    cdef double k5[MAXD]
    cdef double k6[MAXD]
    cdef double k7[MAXD]
    cdef double yi[MAXD]
    cdef double yn[MAXD]
    cdef double t = 0.0, h = h0, step, err, sc, e, fac, target, sp, s0
    cdef int i, idx = 0, nt = t_eval.shape[0]
    s0 = speed(bumps, y)
    # hmax is an arc-length cap; convert to parameter time
    if s0 > 0:
        hmax = hmax / s0
    if h > hmax:
        h = hmax
    while idx < nt and t_eval[idx] <= t + 1e-15:
        for i in range(D):
            out[idx, i] = y[i]
        idx += 1
    if idx < nt:
        rhs(bumps, ncols, y, k1)
    while idx < nt:
        target = t_eval[idx]
        step = h if h < target - t else target - t
        for i in range(D):
            yi[i] = y[i] + step * A21 * k1[i]
        rhs(bumps, ncols, yi, k2)
        for i in range(D):
            yi[i] = y[i] + step * (A31 * k1[i] + A32 * k2[i])
        rhs(bumps, ncols, yi, k3)
        for i in range(D):
            yi[i] = y[i] + step * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i])
        rhs(bumps, ncols, yi, k4)
        for i in range(D):
            yi[i] = y[i] + step * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i])
        rhs(bumps, ncols, yi, k5)
        for i in range(D):
            yi[i] = y[i] + step * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i])
        rhs(bumps, ncols, yi, k6)
        for i in range(D):
            yn[i] = y[i] + step * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i])
        rhs(bumps, ncols, yn, k7)
        err = 0.0
        for i in range(D):
            e = step * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i])
            sc = atol + rtol * (fabs(y[i]) if fabs(y[i]) > fabs(yn[i]) else fabs(yn[i]))
            e = fabs(e) / sc
            if e > err:
                err = e
        if not isfinite(err):
            err = 1e10
        if err <= 1.0:
            t += step
            if target - t < 1e-14:
                t = target
            sp = speed(bumps, yn)
            yn[2] *= s0 / sp
            yn[3] *= s0 / sp
            for i in range(D):
                y[i] = yn[i]
            while idx < nt and t_eval[idx] - t < 1e-14:
                for i in range(D):
                    out[idx, i] = y[i]
                idx += 1
            if idx < nt:
                rhs(bumps, ncols, y, k1)
            if err == 0.0:
                fac = 5.0
            else:
                fac = 0.9 * pow(err, -0.2)
                if fac > 5.0:
                    fac = 5.0
                if fac < 0.2:
                    fac = 0.2
            if step == h or fac < 1.0:
                h = step * fac
            if h > hmax:
                h = hmax
        else:
            fac = 0.9 * pow(err, -0.2)
            if fac < 0.2:
                fac = 0.2
            h = step * fac
            if h < 1e-12:
                return 1
    return 0


def integrate_conformal(bump_arr, y0, t_eval, int ncols=0, double rtol=1e-11, double atol=1e-12, double h0=1e-2,
                        double hmax=INFINITY):
    cdef double[:, ::1] bumps = np.ascontiguousarray(np.asarray(bump_arr, dtype=float).reshape(-1, 4))
    cdef double[:, ::1] ys = np.array(np.atleast_2d(y0), dtype=float, order="C")
    cdef double[::1] te = np.ascontiguousarray(t_eval, dtype=float)
    cdef Py_ssize_t B = ys.shape[0], b
    cdef int D = 4 + 4 * ncols
    if ys.shape[1] != D or ncols > 2:
        raise ValueError("state width does not match ncols")
    out = np.empty((B, te.shape[0], D))
    cdef double[:, :, ::1] o = out
    cdef int status
    for b in range(B):
        with nogil:
            status = integrate_one(bumps, ncols, &ys[b, 0], te, o[b], rtol, atol, h0, hmax)
        if status:
            from .errors import StepFailure
            raise StepFailure(f"step size underflow on ray {b}")
    return out
