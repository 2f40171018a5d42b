"""Fermi patches f(t, p) = exp_x~((t + T) * (p E1 + sqrt(1 - p^2) E2)).

(E1, E2) is a g-orthonormal frame at the apex x~; E2 points along the center
geodesic, so f(t, 0) runs along it and f(0, 0) sits at distance T from x~.
The t-curves are unit-speed geodesics and (Gauss lemma) the t-slices are
orthogonal to them.

Two realisations share one interface: a closed form when the metric is flat
on a disc containing the fan, and a Chebyshev tensor interpolant of rays and
their Jacobi fields otherwise.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy.spatial import cKDTree

from . import geodesicflow as gf
from .errors import ConjugateBasepoint, InjectivityFailure
from .metricfield import (
    CompositeMetric,
    ConformalBumpMetric,
    ConformalScaledMetric,
    normalize,
    torus_distance,
    wrap_delta,
)

TAU_JAC = 1e-8
N_NODES = 24
NEWTON_ITERS = 50


def flat_on_disc(g, center, radius):
    """True if g is exactly the identity on the disc (decided from the metric's structure)."""
    center = np.asarray(center, float)
    if isinstance(g, ConformalBumpMetric):
        return all(torus_distance(b.center, center) >= b.radius + radius for b in g.bumps)
    if isinstance(g, ConformalScaledMetric):
        return flat_on_disc(g.inner, center, radius) and all(
            torus_distance(b.center, center) >= b.radius + radius for b in g.bumps)
    if isinstance(g, CompositeMetric):
        if not flat_on_disc(g.base, center, radius):
            return False
        for p in g.patches:
            c, r = p.support_disc()
            if torus_distance(c, center) < r + radius:
                return False
        return True
    return False


def unit_direction(p, rot=0.0):
    """Frame coordinates of R(rot) (p, sqrt(1 - p^2)) and their p-derivative."""
    p = np.asarray(p, float)
    s = np.sqrt(1.0 - p * p)
    d = np.empty(p.shape + (2,))
    dd = np.empty(p.shape + (2,))
    if rot:
        c, sn = math.cos(rot), math.sin(rot)
        d[..., 0] = c * p - sn * s
        d[..., 1] = sn * p + c * s
        dp = -p / s
        dd[..., 0] = c - sn * dp
        dd[..., 1] = sn + c * dp
    else:
        d[..., 0] = p
        d[..., 1] = s
        dd[..., 0] = 1.0
        dd[..., 1] = -p / s
    return d, dd


def solve2(M, r):
    """Solve batched 2 x 2 systems M x = r (r of shape (..., 2) or (..., 2, k))."""
    a, b, c, d = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    det = a * d - b * c
    if r.ndim == M.ndim - 1:
        x0 = (d * r[..., 0] - b * r[..., 1]) / det
        x1 = (a * r[..., 1] - c * r[..., 0]) / det
        return np.stack([x0, x1], axis=-1)
    det = det[..., None]
    out = np.empty(np.broadcast_shapes(M.shape[:-2], r.shape[:-2]) + r.shape[-2:])
    out[..., 0, :] = (d[..., None] * r[..., 0, :] - b[..., None] * r[..., 1, :]) / det
    out[..., 1, :] = (a[..., None] * r[..., 1, :] - c[..., None] * r[..., 0, :]) / det
    return out


def inv2(M):
    a, b, c, d = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    det = a * d - b * c
    out = np.empty_like(M)
    out[..., 0, 0] = d / det
    out[..., 0, 1] = -b / det
    out[..., 1, 0] = -c / det
    out[..., 1, 1] = a / det
    return out


class FermiPatch:
    """Common interface; see :func:`build_fermi_patch`."""

    kind = "abstract"

    def __init__(self, apex, E1, E2, T, a, b, rot=0.0, meta=None):
        self.apex = np.asarray(apex, float)
        self.E = np.column_stack([E1, E2])
        self._Einv = np.linalg.inv(self.E)
        self.T = float(T)
        self.a = float(a)
        self.b = float(b)
        self.rot = float(rot)
        self.meta = dict(meta or {})
        self._center = None

    # -- interface ------------------------------------------------------
    def f(self, tp):
        raise NotImplementedError

    def jac(self, tp):
        raise NotImplementedError

    def _inv_lifted(self, ql, guess=None):
        raise NotImplementedError

    def f_jac(self, tp):
        return self.f(tp), self.jac(tp)

    # -- shared ---------------------------------------------------------
    @property
    def center(self):
        if self._center is None:
            self._center = self.f(np.zeros((1, 2)))[0]
        return self._center

    def lift(self, q):
        q = np.asarray(q, float)
        return self.center + wrap_delta(q - self.center)

    def inv(self, q):
        """(t, p) with f(t, p) = q (chart point, any lift); NaN where Newton fails."""
        q = np.atleast_2d(np.asarray(q, float))
        return self._inv_lifted(self.lift(q))

    def in_domain(self, tp, a=None, b=None, strict=True):
        a = self.a if a is None else a
        b = self.b if b is None else b
        tp = np.asarray(tp, float)
        with np.errstate(invalid="ignore"):
            if strict:
                return (np.abs(tp[..., 0]) < a) & (np.abs(tp[..., 1]) < b)
            return (np.abs(tp[..., 0]) <= a) & (np.abs(tp[..., 1]) <= b)

    def center_curve(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        return self.f(np.column_stack([t, np.zeros_like(t)]))

    def boundary(self, a, b, n=32):
        """Parameter samples on the boundary of [-a, a] x [-b, b]."""
        s = np.linspace(-1.0, 1.0, n)
        top = np.column_stack([a * s, np.full(n, b)])
        bot = np.column_stack([a * s, np.full(n, -b)])
        lef = np.column_stack([np.full(n, -a), b * s])
        rig = np.column_stack([np.full(n, a), b * s])
        return np.concatenate([top, bot, lef, rig])

    def grid(self, a=None, b=None, n=5):
        a = self.a if a is None else a
        b = self.b if b is None else b
        T, P = np.meshgrid(np.linspace(-a, a, n), np.linspace(-b, b, n), indexing="ij")
        return np.column_stack([T.ravel(), P.ravel()])

    def support_disc(self, a=None, b=None, n=48):
        """Chart disc (center, radius) containing f([-a, a] x [-b, b])."""
        a = self.a if a is None else a
        b = self.b if b is None else b
        pts = self.f(self.boundary(a, b, n))
        r = float(np.max(np.linalg.norm(pts - self.center, axis=1)))
        # curvature of the edges between samples: add a generous chord allowance
        return self.center, r * 1.02 + 1e-9

    def pullback(self, g, tp):
        """f*g at tp as 2x2 matrices in (t, p) coordinates."""
        D = self.jac(tp)
        G = g.eval(normalize(self.f(tp)))
        return np.einsum("nki,nkl,nlj->nij", D, G, D)

    def validate(self, g, n=5, tau_jac=TAU_JAC):
        """Jacobian, injectivity and Gauss-lemma checks on an n x n grid; returns margins."""
        tp = self.grid(n=n)
        D = self.jac(tp)
        det = np.linalg.det(D)
        if np.min(det) < tau_jac:
            raise InjectivityFailure(f"Fermi Jacobian determinant {np.min(det):.3e} < {tau_jac}")
        pts = self.f(tp)
        dmin = float(np.min([np.min(np.linalg.norm(np.delete(pts, i, 0) - pts[i], axis=1))
                             for i in range(len(pts))]))
        if dmin <= 0:
            raise InjectivityFailure("Fermi map is not injective on its grid")
        F = self.pullback(g, tp)
        return {"min_det": float(np.min(det)), "min_separation": dmin,
                "gauss_offdiag": float(np.max(np.abs(F[:, 0, 1]))),
                "unit_speed": float(np.max(np.abs(F[:, 0, 0] - 1.0)))}

    def params(self):
        return {"apex": self.apex.tolist(), "E1": self.E[:, 0].tolist(), "E2": self.E[:, 1].tolist(),
                "T": self.T, "a": self.a, "b": self.b, "rot": self.rot}

    def to_dict(self):
        return dict(self.params(), kind=self.kind)


class FlatFermiPatch(FermiPatch):
    """Closed form: f(t, p) = apex + (t + T) * E R(rot) (p, sqrt(1 - p^2))."""

    kind = "flat"

    def f(self, tp):
        tp = np.atleast_2d(np.asarray(tp, float))
        d, _ = unit_direction(tp[:, 1], self.rot)
        return self.apex + (tp[:, 0] + self.T)[:, None] * (d @ self.E.T)

    def jac(self, tp):
        tp = np.atleast_2d(np.asarray(tp, float))
        d, dd = unit_direction(tp[:, 1], self.rot)
        out = np.empty((len(tp), 2, 2))
        out[:, :, 0] = d @ self.E.T
        out[:, :, 1] = (tp[:, 0] + self.T)[:, None] * (dd @ self.E.T)
        return out

    def _inv_lifted(self, ql, guess=None):
        z = (ql - self.apex) @ self._Einv.T
        if self.rot:
            c, s = math.cos(self.rot), math.sin(self.rot)
            z = z @ np.array([[c, -s], [s, c]])
        r = np.hypot(z[:, 0], z[:, 1])
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.where(z[:, 1] > 0, z[:, 0] / r, np.nan)
        return np.column_stack([r - self.T, p])


class ChebyshevFermiPatch(FermiPatch):
    """Tensor Chebyshev interpolant of f on [-a, a] x [-b, b].

    Node values come from integrating the rays and their p-Jacobi fields.
    """

    kind = "chebyshev"

    def __init__(self, g, apex, E1, E2, T, a, b, rot=0.0, n=N_NODES, meta=None):
        super().__init__(apex, E1, E2, T, a, b, rot, meta)
        if T - a <= 0:
            raise ValueError("need T > a so the fan stays away from its apex")
        self.n = int(n)
        k = np.arange(self.n)
        nodes = -np.cos(np.pi * (k + 0.5) / self.n)  # Chebyshev-Gauss nodes in (-1, 1), increasing
        self.t_nodes = a * nodes
        self.p_nodes = b * nodes
        d, dd = unit_direction(self.p_nodes, self.rot)
        V = d @ self.E.T
        dV = dd @ self.E.T
        y0 = np.zeros((self.n, 8))
        y0[:, 0:2] = self.apex
        y0[:, 2:4] = V
        y0[:, 6:8] = dV
        t_eval = np.concatenate([[0.0], self.T + self.t_nodes])
        out = gf.integrate_states(g, y0, t_eval, ncols=1)[:, 1:]  # (p, t, D)
        X = np.transpose(out[:, :, 0:2], (1, 0, 2))  # (t, p, 2)
        self._node_vel = np.transpose(out[:, :, 2:4], (1, 0, 2))
        self._node_jac = np.transpose(out[:, :, 4:6], (1, 0, 2))
        self._node_x = X
        Vt = C.chebvander(nodes, self.n - 1)
        Vi = np.linalg.inv(Vt)
        # coefficient tensor c[i, j, comp] with f = sum c_ij T_i(t/a) T_j(p/b)
        self.coef_full = np.einsum("ik,klc,jl->ijc", Vi, X, Vi)
        self._coef_j = np.ascontiguousarray(self.coef_full.transpose(1, 0, 2).reshape(self.n, -1))
        self._tree = cKDTree(X.reshape(-1, 2))
        self._tp_nodes = np.stack(np.meshgrid(self.t_nodes, self.p_nodes, indexing="ij"), -1).reshape(-1, 2)
        # interpolation self-check against the integrated derivatives
        tp = self._tp_nodes
        D = self.jac(tp)
        self.meta["interp_err"] = float(max(
            np.max(np.abs(D[:, :, 0] - self._node_vel.reshape(-1, 2))),
            np.max(np.abs(D[:, :, 1] - self._node_jac.reshape(-1, 2))),
        ))

    def _basis(self, u):
        """T_k(u) and T_k'(u) for k < n (trigonometric form on [-1, 1], recurrence outside)."""
        n = self.n
        k = np.arange(n)
        if np.all(np.abs(u) < 1.0):
            th = np.arccos(u)[:, None]
            st = np.sin(th)
            T = np.cos(k * th)
            dT = k * np.sin(k * th) / st
            return T, dT
        T = np.empty(u.shape + (n,))
        dT = np.empty(u.shape + (n,))
        T[..., 0], dT[..., 0] = 1.0, 0.0
        if n > 1:
            T[..., 1], dT[..., 1] = u, 1.0
        for j in range(1, n - 1):
            T[..., j + 1] = 2 * u * T[..., j] - T[..., j - 1]
            dT[..., j + 1] = 2 * T[..., j] + 2 * u * dT[..., j] - dT[..., j - 1]
        return T, dT

    def f_jac(self, tp, need_jac=True):
        tp = np.atleast_2d(np.asarray(tp, float))
        Tt, dTt = self._basis(tp[:, 0] / self.a)
        Tp, dTp = self._basis(tp[:, 1] / self.b)
        n = self.n
        W = (Tp @ self._coef_j).reshape(-1, n, 2)  # sum over the p index
        val = np.sum(Tt[:, :, None] * W, axis=1)
        if not need_jac:
            return val, None
        ft = np.sum(dTt[:, :, None] * W, axis=1) / self.a
        Wp = (dTp @ self._coef_j).reshape(-1, n, 2)
        fp = np.sum(Tt[:, :, None] * Wp, axis=1) / self.b
        return val, np.stack([ft, fp], axis=-1)

    def f(self, tp):
        return self.f_jac(tp, need_jac=False)[0]

    def jac(self, tp):
        return self.f_jac(tp)[1]

    def _inv_lifted(self, ql, guess=None):
        if guess is None:
            _, idx = self._tree.query(ql)
            tp = self._tp_nodes[idx].copy()
        else:
            tp = np.array(guess, float, copy=True)
        done = np.zeros(len(ql), bool)
        lim = np.array([0.5 * self.a, 0.5 * self.b])
        for _ in range(NEWTON_ITERS):
            act = np.flatnonzero(~done)
            if len(act) == 0:
                break
            F, D = self.f_jac(tp[act])
            step = solve2(D, ql[act] - F)
            sc = np.minimum(1.0, np.min(lim / np.maximum(np.abs(step), 1e-300), axis=1))
            tp[act] += sc[:, None] * step
            small = np.max(np.abs(step) / lim, axis=1) <= 1e-12
            done[act[small]] = True
        res = np.linalg.norm(self.f(tp) - ql, axis=1)
        tp[~(res <= 1e-11)] = np.nan
        return tp

    def to_dict(self):
        return dict(self.params(), kind=self.kind, n=self.n)


def fermi_from_dict(d, g):
    args = (d["apex"], d["E1"], d["E2"], d["T"], d["a"], d["b"], d.get("rot", 0.0))
    if d["kind"] == "flat":
        return FlatFermiPatch(*args)
    return ChebyshevFermiPatch(g, *args, n=d.get("n", N_NODES))


def make_fermi(g, apex, E1, E2, T, a, b, rot=0.0, n=N_NODES, force=None):
    """Closed form when g is flat on a disc holding the whole fan, else Chebyshev."""
    apex = np.asarray(apex, float)
    kind = force
    if kind is None:
        kind = "flat" if flat_on_disc(g, normalize(apex), T + a + 1e-9) else "chebyshev"
    if kind == "flat":
        return FlatFermiPatch(apex, E1, E2, T, a, b, rot)
    return ChebyshevFermiPatch(g, apex, E1, E2, T, a, b, rot, n=n)


def build_fermi_patch(g, seg, t0, T, a, b, rot=0.0, n=N_NODES, check_conjugacy=True, force=None):
    """Fermi patch around seg(t0) with apex seg(t0 - T); f(t, 0) = seg(t0 + t)."""
    x0, v0 = seg.q[0], seg.v[0]
    s = t0 - T
    if s > 0:
        st = gf.endpoints_batch(g, x0, v0, s)[0]
        apex, v = st[:2], st[2:4]
    elif s < 0:
        st = gf.endpoints_batch(g, x0, -v0, -s)[0]
        apex, v = st[:2], -st[2:4]
    else:
        apex, v = np.asarray(x0, float), np.asarray(v0, float)
    if check_conjugacy:
        ct = gf.conjugate_times(g, apex, v, T + a)
        if ct:
            raise ConjugateBasepoint(f"apex is conjugate along the center line at distance {ct[0]:.6g}")
    E2, E1 = gf.orthonormal_frame(g, apex, v)
    fp = make_fermi(g, apex, E1, E2, T, a, b, rot, n, force)
    fp.meta.update(t0=float(t0), seg_start=[float(c) for c in x0])
    return fp
