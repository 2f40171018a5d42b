"""Geodesics, Jacobi fields, exponential maps and conjugacy along them.

Positions inside a :class:`GeodesicSegment` are kept in the universal cover
(unwrapped); use :func:`~geoblock.metricfield.normalize` to get chart points.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize
from scipy.spatial import cKDTree

from . import kernels
from .errors import Inconclusive
from .metricfield import CompositeMetric, ConformalBumpMetric, MetricField, christoffel_from, normalize, torus_distance

TAU_UNIT = 1e-8
TAU_CONJ = 1e-6
TAU_ZERO = 1e-9
DT_SAMPLE = 1.0 / 256
# residual checks need finer tables: the stencil error near a bump edge is ~dt^5
DT_FINE = 1.0 / 1024
H_MAX_GENERIC = 0.01
RTOL = 1e-11
ATOL = 1e-12


def _bump_array(g):
    return np.array([[b.center[0], b.center[1], b.amplitude, b.radius] for b in g.bumps]).reshape(-1, 4)


def step_cap(g):
    """Arc-length step cap: a fraction of the smallest feature, shrunk by the conformal range."""
    if isinstance(g, _Shifted):
        return g.hmax
    if isinstance(g, ConformalBumpMetric):
        if not g.bumps:
            return math.inf
        r = min(b.radius for b in g.bumps)
        return 0.1 * r * math.exp(-sum(abs(b.amplitude) for b in g.bumps))
    if isinstance(g, CompositeMetric):
        caps = [step_cap(g.base)] + [0.1 * p.support_disc()[1] for p in g.patches]
        return min(min(caps), H_MAX_GENERIC) if g.patches else step_cap(g.base)
    return H_MAX_GENERIC


def feature_cap(g):
    """Per-row step cap (time units) that never steps over a patch or bump disc.

    Far from every feature the cap is the chart distance to the nearest one;
    inside, a tenth of its radius.
    """
    discs = []
    base = g.base if isinstance(g, CompositeMetric) else g
    if isinstance(base, ConformalBumpMetric) and base.bumps:
        shrink = math.exp(-sum(abs(b.amplitude) for b in base.bumps))
        discs += [(np.asarray(b.center, float), b.radius, 0.1 * b.radius * shrink) for b in base.bumps]
    for p in getattr(g, "patches", ()):
        c, r = p.support_disc()
        discs.append((np.asarray(c, float), r, 0.1 * r))
    if not discs:
        return None

    def cap(q, v):
        allow = np.full(q.shape[0], np.inf)
        for c, r, floor in discs:
            allow = np.minimum(allow, np.maximum(torus_distance(q, c) - r, floor))
        speed = np.linalg.norm(v, axis=1)
        with np.errstate(divide="ignore"):
            return np.where(speed > 0, allow / speed, np.inf)

    return cap


def integrate_states(g, y0, t_eval, ncols=0, rtol=RTOL, atol=ATOL):
    """Low-level batch integration; rows of ``y0`` are [q, v, J, J'] (see kernels)."""
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    t_eval = np.asarray(t_eval, dtype=float)
    if isinstance(g, ConformalBumpMetric):
        return kernels.integrate_conformal(_bump_array(g), y0, t_eval, ncols, rtol, atol, hmax=step_cap(g))
    if isinstance(g, CompositeMetric) and g.patches:
        return kernels.dp5_integrate(g.accel, g.norm2, y0, t_eval, ncols, rtol, atol, h_max=H_MAX_GENERIC,
                                     cap=feature_cap(g))
    return kernels.dp5_integrate(g.accel, g.norm2, y0, t_eval, ncols, rtol, atol, h_max=step_cap(g))


def sample_times(L, dt=DT_SAMPLE):
    n = max(2, int(math.ceil(abs(L) / dt)) + 1)
    return np.linspace(0.0, L, n)


def unit_vector(g, x, direction):
    """Rescale a chart direction to unit g-length at x."""
    d = np.asarray(direction, dtype=float)
    return d / math.sqrt(float(g.norm2(np.asarray(x, dtype=float), d)))


def direction_from_angle(g, x, theta):
    return unit_vector(g, x, (math.cos(theta), math.sin(theta)))


def orthonormal_frame(g, x, v):
    """(v, n): n is the g-unit normal to v with det[v, n] > 0."""
    G = g.eval(np.asarray(x, dtype=float))
    v = np.asarray(v, dtype=float)
    v = v / math.sqrt(v @ G @ v)
    # G-orthogonal complement of v: rotate G v by 90 degrees
    w = G @ v
    n = np.array([-w[1], w[0]])
    n = n / math.sqrt(n @ G @ n)
    if v[0] * n[1] - v[1] * n[0] < 0:
        n = -n
    return v, n


# --------------------------------------------------------------------------


@dataclass
class GeodesicSegment:
    metric_id: str
    t: np.ndarray
    q: np.ndarray
    v: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def length(self):
        return float(self.t[-1])

    @property
    def start(self):
        return self.q[0]

    @property
    def end(self):
        return self.q[-1]

    @property
    def start_velocity(self):
        return self.v[0]

    @property
    def end_velocity(self):
        return self.v[-1]

    @property
    def theta0(self):
        return float(math.atan2(self.v[0, 1], self.v[0, 0]) % (2 * math.pi))

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    def position(self, s):
        """Cubic Hermite interpolation of the lifted position at times ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        i = np.clip(np.searchsorted(self.t, s, side="right") - 1, 0, self.t.size - 2)
        h = self.t[i + 1] - self.t[i]
        u = ((s - self.t[i]) / h)[:, None]
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        return (h00 * self.q[i] + h10 * h[:, None] * self.v[i]
                + h01 * self.q[i + 1] + h11 * h[:, None] * self.v[i + 1])

    def velocity(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        i = np.clip(np.searchsorted(self.t, s, side="right") - 1, 0, self.t.size - 2)
        h = self.t[i + 1] - self.t[i]
        u = ((s - self.t[i]) / h)[:, None]
        d00 = (6 * u**2 - 6 * u) / h[:, None]
        d10 = 3 * u**2 - 4 * u + 1
        d01 = (-6 * u**2 + 6 * u) / h[:, None]
        d11 = 3 * u**2 - 2 * u
        return d00 * self.q[i] + d10 * self.v[i] + d01 * self.q[i + 1] + d11 * self.v[i + 1]

    def reversed(self):
        L = self.length
        return GeodesicSegment(self.metric_id, L - self.t[::-1], self.q[::-1].copy(), -self.v[::-1],
                               dict(self.meta, reversed=True))

    def rows(self):
        return np.column_stack([self.t, self.q, self.v])


def integrate_geodesic(g, x, v, L, dt=DT_SAMPLE, check_unit=True, rtol=RTOL, atol=ATOL):
    """Unit-speed geodesic from ``x`` with initial velocity ``v`` for arc length ``L``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if L <= 0:
        raise ValueError("length must be positive")
    if check_unit:
        n2 = float(g.norm2(x, v))
        if abs(n2 - 1.0) > TAU_UNIT:
            raise ValueError(f"initial velocity is not unit (g(v,v) = {n2:.12g})")
    t = sample_times(L, dt)
    out = integrate_states(g, np.concatenate([x, v]), t, 0, rtol, atol)[0]
    return GeodesicSegment(g.metric_id, t, out[:, :2], out[:, 2:4])


def integrate_from_angle(g, x, theta, L, **kw):
    return integrate_geodesic(g, x, direction_from_angle(g, x, theta), L, **kw)


def endpoints_batch(g, x, V, L, ncols=0, J0p=None, rtol=RTOL, atol=ATOL):
    """Final states for a batch of unit initial velocities (all from ``x``, common length)."""
    V = np.atleast_2d(V)
    B = V.shape[0]
    y0 = np.zeros((B, 4 + 4 * ncols))
    y0[:, 0:2] = x
    y0[:, 2:4] = V
    if ncols:
        y0[:, 4 + 2 * ncols:] = np.asarray(J0p).reshape(B, 2 * ncols)
    return integrate_states(g, y0, np.array([0.0, L]), ncols, rtol, atol)[:, -1]


def unit_speed_deviation(g, seg):
    return float(np.max(np.abs(g.norm2(seg.q, seg.v) - 1.0)))


_D2 = np.array([2.0, -27.0, 270.0, -490.0, 270.0, -27.0, 2.0]) / 180.0


def _residual_array(g, seg):
    """|q'' + Gamma(q)(v, v)| at the interior samples seg.t[3:-3]."""
    q, v = seg.q, seg.v
    if q.shape[0] < 8:
        return np.zeros(0)
    dt = seg.dt
    acc = sum(_D2[k] * q[k:q.shape[0] - 6 + k] for k in range(7)) / dt**2
    qi, vi = q[3:-3], v[3:-3]
    g0, dg = g.derivs(qi, 1)[:2]
    gam = christoffel_from(g0, dg)
    res = acc + np.einsum("...kij,...i,...j->...k", gam, vi, vi)
    return np.linalg.norm(res, axis=-1)


def geodesic_residual(g, seg):
    """max |q'' + Gamma(q)(v, v)| on interior samples.

    q'' uses the sixth-order seven-point stencil on the sample table; v is the
    stored velocity.
    """
    r = _residual_array(g, seg)
    return float(np.max(r)) if r.size else 0.0


class _Shifted(MetricField):
    """g read in a translated chart, q -> g(q + offset); keeps coordinates small near a window."""

    kind = "shifted"

    def __init__(self, g, offset):
        self.inner = g
        self.offset = np.asarray(offset, float)
        self.hmax = step_cap(g)

    def _eval(self, q):
        return self.inner._eval(np.asarray(q, float) + self.offset)

    def derivs(self, q, order=1):
        return self.inner.derivs(np.asarray(q, float) + self.offset, order)

    def to_dict(self):
        return {"kind": self.kind, "inner": self.inner.to_dict(), "offset": self.offset.tolist()}


def _patch_windows(g, seg, pad):
    """Parameter windows where seg comes within pad of a patch support disc."""
    wins = []
    for p in getattr(g, "patches", ()):
        c, r = p.support_disc()
        near = torus_distance(seg.q, c) < r + pad
        if not np.any(near):
            continue
        idx = np.flatnonzero(near)
        breaks = np.flatnonzero(np.diff(idx) > 1)
        for lo, hi in zip(np.r_[idx[0], idx[breaks + 1]], np.r_[idx[breaks], idx[-1]]):
            wins.append((max(seg.t[max(lo - 1, 0)], 0.0), min(seg.t[min(hi + 1, len(seg.t) - 1)], seg.length),
                         p.fd_scale))
    return wins


def residual_fine(g, seg, dt=DT_FINE):
    """Geodesic residual of the curve through seg's initial state, resolved near patches.

    The curve is re-integrated at ``dt``; stretches crossing a patch are
    re-integrated with steps scaled to the patch so the stencil resolves
    the blend, and are left out of the coarse pass.
    """
    fine = integrate_geodesic(g, seg.q[0], seg.v[0], seg.length, dt=dt, check_unit=False)
    r = _residual_array(g, fine)
    ti = fine.t[3:-3]
    keep = np.ones(ti.shape, bool)
    res = 0.0
    for t0, t1, scale in _patch_windows(g, fine, 4 * dt):
        keep &= (ti < t0) | (ti > t1)
        t0, t1 = max(t0 - 8 * dt, 0.0), min(t1 + 8 * dt, seg.length)
        st = endpoints_batch(g, seg.q[0], seg.v[0], t0)[0] if t0 > 0 else np.r_[seg.q[0], seg.v[0]]
        n = max(16, int(math.ceil((t1 - t0) / (scale / 1024))))
        gs = _Shifted(g, st[:2])
        piece = integrate_geodesic(gs, np.zeros(2), st[2:4], t1 - t0, dt=(t1 - t0) / n, check_unit=False)
        res = max(res, geodesic_residual(gs, piece))
    if np.any(keep):
        res = max(res, float(np.max(r[keep])))
    return res


# --------------------------------------------------------------------------
# Jacobi fields and the exponential map


@dataclass
class JacobiSolution:
    seg: GeodesicSegment
    J0: np.ndarray
    J0p: np.ndarray
    t: np.ndarray
    J: np.ndarray
    Jp: np.ndarray
    normal_zeros: list


def _jacobi_table(g, x, v, t_eval, J0, J0p, rtol=RTOL, atol=ATOL):
    J0 = np.asarray(J0, dtype=float).reshape(2, -1)
    J0p = np.asarray(J0p, dtype=float).reshape(2, -1)
    k = J0.shape[1]
    y0 = np.concatenate([x, v, J0.ravel(), J0p.ravel()])
    return integrate_states(g, y0, t_eval, k, rtol, atol)[0]


def jacobi_field(g, seg, J0, J0p, rtol=RTOL, atol=ATOL):
    """Coordinate Jacobi field along ``seg`` (re-integrated jointly with the geodesic)."""
    out = _jacobi_table(g, seg.q[0], seg.v[0], seg.t, J0, J0p, rtol, atol)
    J, Jp = out[:, 4:6], out[:, 6:8]
    # normal component g(J, n)
    G = g.eval(out[:, :2])
    vv = out[:, 2:4]
    w = np.einsum("tij,tj->ti", G, vv)
    n = np.stack([-w[:, 1], w[:, 0]], axis=1)
    n /= np.sqrt(np.einsum("ti,tij,tj->t", n, G, n))[:, None]
    jn = np.einsum("ti,tij,tj->t", J, G, n)
    zeros = []
    for i in range(1, jn.size):
        if jn[i - 1] == 0.0 and i - 1 > 0:
            zeros.append(float(seg.t[i - 1]))
        elif jn[i - 1] * jn[i] < 0:
            zeros.append(float(seg.t[i - 1] - jn[i - 1] * (seg.t[i] - seg.t[i - 1]) / (jn[i] - jn[i - 1])))
    return JacobiSolution(seg, np.asarray(J0), np.asarray(J0p), seg.t, J, Jp, zeros)


def exp_map(g, x, w, lifted=False):
    """exp_x(w) as a chart point (or lifted point with ``lifted=True``)."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    L = math.sqrt(float(g.norm2(x, w)))
    if L == 0.0:
        return x.copy() if lifted else normalize(x)
    end = endpoints_batch(g, x, w / L, L)[0, :2]
    return end if lifted else normalize(end)


def d_exp(g, x, w):
    """Differential of exp_x at w; columns are J(L) with J(0)=0, J'(0)=e_i/L."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    L = math.sqrt(float(g.norm2(x, w)))
    if L == 0.0:
        return np.eye(2)
    st = endpoints_batch(g, x, w / L, L, ncols=2, J0p=(np.eye(2) / L).ravel())[0]
    return st[4:8].reshape(2, 2)


# --------------------------------------------------------------------------
# conjugacy


@dataclass
class ConjugacyReport:
    t_start: float
    t_end: float
    verdict: str
    margin: float
    witness_times: list
    det_end: float = 0.0

    def to_dict(self):
        return {"t_start": self.t_start, "t_end": self.t_end, "verdict": self.verdict,
                "margin": self.margin, "witness_times": list(self.witness_times)}


class _Propagator:
    """Jacobi propagator from t_start with J(t_start)=0, J'(t_start) = orthonormal (v, n)."""

    def __init__(self, g, x, v, t_start, t_end, dt, rtol=RTOL, atol=ATOL):
        self.g = g
        self.t_start = t_start
        if t_start > 0:
            st = endpoints_batch(g, x, v, t_start, rtol=rtol, atol=atol)[0]
            x, v = st[:2], st[2:4]
        vu, n = orthonormal_frame(g, x, v)
        self.tau = sample_times(t_end - t_start, dt)
        J0p = np.column_stack([vu, n])
        self.table = _jacobi_table(g, x, vu, self.tau, np.zeros((2, 2)), J0p, rtol, atol)
        self.rtol, self.atol = rtol, atol
        self.values = self._scaled(self.table, self.tau)

    def _scaled(self, states, tau):
        states = np.atleast_2d(states)
        J = states[:, 4:8].reshape(-1, 2, 2)
        G = self.g.eval(states[:, :2])
        det = np.linalg.det(J) * np.sqrt(np.linalg.det(G))
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(tau > 0, det / np.where(tau > 0, tau, 1.0), 0.0)

    def at(self, tau):
        """Scaled determinant at local time ``tau`` (re-integrated from the nearest sample)."""
        i = int(np.clip(np.searchsorted(self.tau, tau, side="right") - 1, 0, self.tau.size - 1))
        if abs(self.tau[i] - tau) < 1e-15:
            return float(self.values[i])
        base = self.table[i]
        k = 2
        st = integrate_states(self.g, base, np.array([0.0, tau - self.tau[i]]), k, self.rtol, self.atol)[0, -1]
        return float(self._scaled(st, np.array([tau]))[0])

    def zeros(self):
        vals = self.values
        out = []
        for i in range(2, vals.size):
            a, b = vals[i - 1], vals[i]
            if a == 0.0:
                continue
            if a * b < 0:
                r = brentq(self.at, self.tau[i - 1], self.tau[i], xtol=1e-14, rtol=1e-14)
                out.append(self.t_start + r)
        return out


# Jacobi tables keyed by (metric id, start state, window); metrics are immutable
_PROP_CACHE = OrderedDict()
PROP_CACHE_SIZE = 256


def conjugacy(g, seg, t_start, t_end, dt=DT_SAMPLE, raise_inconclusive=True,
              tau_conj=TAU_CONJ, tau_zero=TAU_ZERO):
    """Is seg(t_start) conjugate to seg(t_end) along seg?

    margin = |det[J_1(t_end), J_2(t_end)]| / (t_end - t_start) with the Jacobi
    fields started at J = 0, J' = an orthonormal frame (det taken in an
    orthonormal frame); on flat metrics margin = t_end - t_start.
    """
    if not 0 <= t_start < t_end <= seg.length + 1e-12:
        raise ValueError("need 0 <= t_start < t_end <= L")
    key = (g.metric_id, tuple(seg.q[0]), tuple(seg.v[0]), float(t_start), float(t_end), float(dt))
    prop = _PROP_CACHE.get(key)
    if prop is None:
        prop = _Propagator(g, seg.q[0], seg.v[0], t_start, t_end, dt)
        _PROP_CACHE[key] = prop
        if len(_PROP_CACHE) > PROP_CACHE_SIZE:
            _PROP_CACHE.popitem(last=False)
    else:
        _PROP_CACHE.move_to_end(key)
    det_end = float(prop.values[-1])
    margin = abs(det_end)
    witnesses = prop.zeros()
    if margin >= tau_conj:
        verdict = "nonconjugate"
    elif margin <= tau_zero:
        verdict = "conjugate"
    else:
        verdict = "inconclusive"
    rep = ConjugacyReport(float(t_start), float(t_end), verdict, margin, witnesses, det_end)
    if verdict == "inconclusive" and raise_inconclusive:
        err = Inconclusive(f"|det| = {margin:.3e} inside dead band ({tau_zero}, {tau_conj})")
        err.report = rep
        raise err
    return rep


def conjugate_times(g, x, v, t_max, t_start=0.0, dt=DT_SAMPLE):
    """Times in (t_start, t_max] conjugate to the point at t_start along the geodesic (x, v)."""
    return _Propagator(g, np.asarray(x, float), np.asarray(v, float), t_start, t_max, dt).zeros()


# --------------------------------------------------------------------------
# self-intersections


@dataclass
class SelfIntersectionReport:
    pairs: list
    closed: bool
    distances: list = field(default_factory=list)


def trace_self_intersections(t, q, v, tol):
    """Interior (t, s), t < s, with torus distance <= tol, one per cluster, refined."""
    t = np.asarray(t, float)
    q = np.asarray(q, float)
    v = np.asarray(v, float)
    pts = normalize(q)
    chord = float(np.max(np.linalg.norm(np.diff(q, axis=0), axis=1))) if q.shape[0] > 1 else 0.0
    tree = cKDTree(pts, boxsize=1.0)
    cand = tree.query_pairs(tol + chord, output_type="ndarray")
    seg = GeodesicSegment("", t, q, v)
    # exclude pairs that are near each other along the curve
    if cand.size:
        i, j = np.minimum(cand[:, 0], cand[:, 1]), np.maximum(cand[:, 0], cand[:, 1])
        along = np.array([np.max(np.linalg.norm(q[a:b + 1] - q[a], axis=1)) for a, b in zip(i, j)])
        keep = along > 2 * (tol + chord)
        cand = np.column_stack([i, j])[keep]
    n = t.size
    closed = bool(torus_distance(q[0], q[-1]) <= tol)
    pairs, dists = [], []
    if not cand.size:
        return SelfIntersectionReport(pairs, closed, dists)
    # cluster by index adjacency
    cand = cand[np.lexsort((cand[:, 1], cand[:, 0]))]
    seen = np.zeros(len(cand), bool)
    lookup = {tuple(p): k for k, p in enumerate(cand)}
    for k0 in range(len(cand)):
        if seen[k0]:
            continue
        stack, members = [k0], []
        seen[k0] = True
        while stack:
            k = stack.pop()
            members.append(cand[k])
            a, b = cand[k]
            for da in (-1, 0, 1):
                for db in (-1, 0, 1):
                    kk = lookup.get((a + da, b + db))
                    if kk is not None and not seen[kk]:
                        seen[kk] = True
                        stack.append(kk)
        members = np.array(members)
        if closed and members[:, 0].min() == 0 and members[:, 1].max() == n - 1:
            continue
        d = torus_distance(pts[members[:, 0]], pts[members[:, 1]])
        a, b = members[int(np.argmin(d))]

        def f(z):
            pa = seg.position(z[0])[0]
            pb = seg.position(z[1])[0]
            return float(torus_distance(pa, pb) ** 2)

        lo_a, hi_a = t[max(a - 1, 0)], t[min(a + 1, n - 1)]
        lo_b, hi_b = t[max(b - 1, 0)], t[min(b + 1, n - 1)]
        res = minimize(f, [t[a], t[b]], method="L-BFGS-B", bounds=[(lo_a, hi_a), (lo_b, hi_b)],
                       options={"ftol": 1e-30, "gtol": 1e-14})
        dist = math.sqrt(max(res.fun, 0.0))
        if dist <= tol:
            ta, tb = sorted(map(float, res.x))
            if ta <= t[0] + 1e-12 or tb >= t[-1] - 1e-12:
                continue
            pairs.append((ta, tb))
            dists.append(dist)
    order = np.argsort([p[0] for p in pairs]) if pairs else []
    return SelfIntersectionReport([pairs[k] for k in order], closed, [dists[k] for k in order])


def self_intersections(seg, tol=1e-6):
    return trace_self_intersections(seg.t, seg.q, seg.v, tol)


def time_reversal_error(g, seg):
    back = integrate_geodesic(g, seg.end, -seg.end_velocity, seg.length, dt=seg.dt, check_unit=False)
    return float(np.linalg.norm(back.end - seg.start))
