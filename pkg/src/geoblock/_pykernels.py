"""Pure-numpy Dormand-Prince 5(4) integration of geodesic + Jacobi systems.

Rays are integrated as a batch in which every row keeps its own adaptive
step.  Steps are clipped so that every requested output time is hit exactly.
"""

import numpy as np

from .errors import StepFailure

C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = np.array(A[6] + [0.0])
B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
E = B5 - B4

H_MIN = 1e-12


def make_rhs(accel, ncols):
    """Right-hand side for y = [q, v, J (2 x ncols), J' (2 x ncols)] rows."""

    def rhs(y):
        q, v = y[:, 0:2], y[:, 2:4]
        out = np.empty_like(y)
        out[:, 0:2] = v
        if ncols == 0:
            out[:, 2:4] = accel(q, v, False)
            return out
        a, a_q, a_v = accel(q, v, True)
        out[:, 2:4] = a
        n = 2 * ncols
        J = y[:, 4:4 + n].reshape(-1, 2, ncols)
        Jp = y[:, 4 + n:4 + 2 * n].reshape(-1, 2, ncols)
        out[:, 4:4 + n] = Jp.reshape(-1, n)
        out[:, 4 + n:] = (a_q @ J + a_v @ Jp).reshape(-1, n)
        return out

    return rhs


def dp5_integrate(accel, norm2, y0, t_eval, ncols=0, rtol=1e-11, atol=1e-12, h0=1e-2, h_max=None, cap=None):
    """Integrate rows of ``y0`` and return states at ``t_eval``, shape (B, T, D).

    Every row carries its own time and step size (the system is autonomous),
    so a row crossing a small feature does not slow the others down.
    ``norm2(q, v)`` is the squared metric speed; after every accepted step each
    velocity is rescaled back to its initial speed.  ``h_max`` caps the step in
    arc length; ``cap(q, v)``, if given, returns a per-row cap in time units.
    """
    y = np.array(y0, dtype=float, copy=True)
    if y.ndim == 1:
        y = y[None, :]
    t_eval = np.asarray(t_eval, dtype=float)
    B, D = y.shape
    nT = t_eval.size
    out = np.empty((B, nT, D))
    if B == 0 or nT == 0:
        return out
    rhs = make_rhs(accel, ncols)
    speed0 = np.sqrt(norm2(y[:, 0:2], y[:, 2:4]))
    hcap = np.full(B, np.inf)
    if h_max is not None:
        with np.errstate(divide="ignore"):
            hcap = np.where(speed0 > 0, h_max / speed0, np.inf)
    t = np.zeros(B)
    h = np.full(B, float(h0))
    idx = np.zeros(B, dtype=int)
    while True:
        hit = (idx < nT) & (t_eval[np.minimum(idx, nT - 1)] <= t + 1e-15)
        if not np.any(hit):
            break
        r = np.flatnonzero(hit)
        out[r, idx[r]] = y[r]
        idx[r] += 1
    act = np.flatnonzero(idx < nT)
    k1 = np.empty_like(y)
    if act.size:
        k1[act] = rhs(y[act])
    while act.size:
        ya, ta = y[act], t[act]
        target = t_eval[idx[act]]
        lim = hcap[act]
        if cap is not None:
            lim = np.minimum(lim, cap(ya[:, 0:2], ya[:, 2:4]))
        ha = np.minimum(h[act], lim)
        step = np.minimum(ha, target - ta)
        sc = step[:, None]
        ks = [k1[act]]
        for st in range(1, 7):
            yi = ya + sc * sum(A[st][j] * ks[j] for j in range(st) if A[st][j] != 0.0)
            ks.append(rhs(yi))
        y_new = ya + sc * sum(B5[j] * ks[j] for j in range(6) if B5[j] != 0.0)
        err_vec = sc * sum(E[j] * ks[j] for j in range(7))
        scale = atol + rtol * np.maximum(np.abs(ya), np.abs(y_new))
        err = np.max(np.abs(err_vec) / scale, axis=1)
        err = np.where(np.isfinite(err), err, 1e10)
        ok = err <= 1.0
        with np.errstate(divide="ignore"):
            fac = np.where(err == 0, 5.0, np.minimum(5.0, np.maximum(0.2, 0.9 * err ** -0.2)))
        # accepted rows
        a_ok = act[ok]
        if a_ok.size:
            tn = ta[ok] + step[ok]
            tn = np.where(target[ok] - tn < 1e-14, target[ok], tn)
            yn = y_new[ok]
            sp = np.sqrt(norm2(yn[:, 0:2], yn[:, 2:4]))
            yn[:, 2:4] *= (speed0[a_ok] / sp)[:, None]
            y[a_ok] = yn
            t[a_ok] = tn
            grow = (step[ok] == ha[ok]) | (fac[ok] < 1.0)
            h[a_ok] = np.where(grow, step[ok] * fac[ok], h[a_ok])
            while True:
                hit = (idx[a_ok] < nT) & (t_eval[np.minimum(idx[a_ok], nT - 1)] - t[a_ok] < 1e-14)
                if not np.any(hit):
                    break
                r = a_ok[hit]
                out[r, idx[r]] = y[r]
                idx[r] += 1
            more = a_ok[idx[a_ok] < nT]
            if more.size:
                k1[more] = rhs(y[more])
        # rejected rows
        a_bad = act[~ok]
        if a_bad.size:
            h[a_bad] = step[~ok] * np.maximum(0.2, 0.9 * err[~ok] ** -0.2)
            if np.any(h[a_bad] < H_MIN):
                raise StepFailure(f"step size underflow at t={float(np.min(t[a_bad])):.6g}")
        act = np.flatnonzero(idx < nT)
    return out


def conformal_accel(bump_arr):
    """Vectorised accel for exp(2 lambda) * identity, bumps given as rows (cx, cy, amp, r)."""
    bump_arr = np.asarray(bump_arr, dtype=float).reshape(-1, 4)

    def parts(q, order):
        lam = np.zeros(q.shape[0])
        grad = np.zeros((q.shape[0], 2))
        hess = np.zeros((q.shape[0], 2, 2))
        for cx, cy, amp, r in bump_arr:
            d = q - np.array([cx, cy])
            d -= np.round(d)
            r2 = r * r
            s = np.sum(d * d, axis=1) / r2
            inside = s < 1.0
            if not np.any(inside):
                continue
            u = np.where(inside, 1.0 - s, 1.0)
            p = np.where(inside, np.exp(1.0 - 1.0 / u), 0.0)
            p1 = -p / u**2
            lam += amp * p
            ds = 2.0 * d / r2
            grad += amp * p1[:, None] * ds
            if order == 2:
                p2 = p * (1.0 / u**4 - 2.0 / u**3)
                hess += amp * (p2[:, None, None] * ds[:, :, None] * ds[:, None, :]
                               + p1[:, None, None] * (2.0 / r2) * np.eye(2))
        return lam, grad, hess

    def accel(q, v, jac):
        _, grad, hess = parts(q, 2 if jac else 1)
        gv = np.sum(grad * v, axis=1)
        vv = np.sum(v * v, axis=1)
        a = -2.0 * gv[:, None] * v + vv[:, None] * grad
        if not jac:
            return a
        hv = np.einsum("bij,bj->bi", hess, v)
        a_q = -2.0 * v[:, :, None] * hv[:, None, :] + vv[:, None, None] * hess
        a_v = (-2.0 * gv[:, None, None] * np.eye(2) - 2.0 * v[:, :, None] * grad[:, None, :]
               + 2.0 * grad[:, :, None] * v[:, None, :])
        return a, a_q, a_v

    def norm2(q, v):
        lam = parts(q, 0)[0]
        return np.exp(2.0 * lam) * np.sum(v * v, axis=1)

    return accel, norm2


def integrate_conformal(bump_arr, y0, t_eval, ncols=0, rtol=1e-11, atol=1e-12, h0=1e-2, hmax=np.inf):
    accel, norm2 = conformal_accel(bump_arr)
    return dp5_integrate(accel, norm2, y0, t_eval, ncols, rtol, atol, h0, None if np.isinf(hmax) else hmax)
