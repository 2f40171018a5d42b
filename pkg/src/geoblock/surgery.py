"""Compactly supported metric surgeries.

Every operation reads a metric and returns a new :class:`CompositeMetric`
with one more patch; inputs are never mutated.  The basic tool is
:func:`merge_foliations`, which blends two nearby families of unit-speed
geodesics so that the blended curves follow the first family before the
patch and the second family after it.  :func:`merge_geodesics`,
:func:`destroy_conjugacy` and :func:`avoid_points` are built on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geodesicflow as gf
from .errors import (
    AlreadyInconclusive,
    ConjugateBasepoint,
    ContainmentFailure,
    InjectivityFailure,
    NeighborhoodTooLarge,
    NonSPD,
    NotInNeighborhood,
)
from .fermi import build_fermi_patch, fermi_from_dict, inv2, solve2
from .metricfield import (
    PATCH_TYPES,
    CompositeMetric,
    compose_with_patch,
    normalize,
    smoothstep,
    torus_distance,
)

TAU_RES = 1e-6
TAU_MATCH = 1e-6
N_EDGE = 16


# --------------------------------------------------------------------------
# sequences and bump profiles


def sequences(a, b):
    """(a_0..a_5, b_0..b_5): fixed anchors with geometric fill-ins, strictly decreasing."""
    a_seq = np.array([a, a * 2 ** (-1 / 3), a * 2 ** (-2 / 3), a / 2, a * 2 ** -1.5, a / 4])
    b_seq = np.array([b, b / 2, b * 2 ** -1.25, b * 2 ** -1.5, b * 2 ** -1.75, b / 4])
    return a_seq, b_seq


def _smoothstep_d(x):
    """smoothstep and its derivative."""
    x = np.asarray(x, float)
    inside = (x > 0) & (x < 1)
    xi = np.where(inside, x, 0.5)
    e0 = np.exp(-1.0 / xi)
    e1 = np.exp(-1.0 / (1.0 - xi))
    tot = e0 + e1
    s = np.where(inside, e0 / tot, np.where(x >= 1, 1.0, 0.0))
    s = np.where(np.isnan(x), np.nan, s)
    ds = (e0 * e1 / xi**2 + e0 * e1 / (1.0 - xi) ** 2) / tot**2
    return s, np.where(inside, ds, 0.0)


@dataclass(frozen=True)
class BumpProfile:
    """A transition h (kind 'h') or a plateau H in patch coordinates (kind 'H').

    'h': 0 for t <= -lo, 1 for t >= lo.  'H': 1 on |t| <= inner[0], |p| <= inner[1]
    and 0 once |t| >= outer[0] or |p| >= outer[1].
    """

    kind: str
    inner: tuple
    outer: tuple

    def __call__(self, x):
        return self.eval(x)[0]

    def eval(self, x):
        """Value and first derivative (for 'H' the gradient in (t, p))."""
        x = np.asarray(x, float)
        if self.kind == "h":
            lo = self.inner[0]
            s, ds = _smoothstep_d((x + lo) / (2 * lo))
            return s, ds / (2 * lo)
        parts, dparts = [], []
        for k in range(2):
            r_in, r_out = self.inner[k], self.outer[k]
            u = np.abs(x[..., k])
            s, ds = _smoothstep_d((u - r_in) / (r_out - r_in))
            parts.append(1.0 - s)
            dparts.append(-ds / (r_out - r_in) * np.sign(x[..., k]))
        val = parts[0] * parts[1]
        grad = np.stack([dparts[0] * parts[1], parts[0] * dparts[1]], axis=-1)
        val = np.where(np.isnan(val), 0.0, val)
        return val, np.nan_to_num(grad)


def build_bump(kind, geometry):
    """kind 'h': geometry = a5 (or (a5,)).  kind 'H': geometry = ((t_in, p_in), (t_out, p_out))."""
    if kind == "h":
        a5 = float(np.atleast_1d(geometry)[0])
        if a5 <= 0:
            raise ValueError("threshold must be positive")
        return BumpProfile("h", (a5,), (a5,))
    if kind == "H":
        inner, outer = (tuple(float(v) for v in geometry[0]), tuple(float(v) for v in geometry[1]))
        if not all(0 < i < o for i, o in zip(inner, outer)):
            raise ValueError("need 0 < inner < outer in both coordinates")
        return BumpProfile("H", inner, outer)
    raise ValueError(f"unknown bump kind {kind!r}")


# --------------------------------------------------------------------------
# the foliation-merging patch


def _inside(tp, a, b, strict=True):
    with np.errstate(invalid="ignore"):
        if strict:
            return (np.abs(tp[:, 0]) < a) & (np.abs(tp[:, 1]) < b)
        return (np.abs(tp[:, 0]) <= a) & (np.abs(tp[:, 1]) <= b)


class MergePatch:
    """g~ = H g^ + (1 - H) g on f0(R_33); g elsewhere.

    In f^ = f1 o phi coordinates g^ = diag(1, (1 - h) G1 + h G2), where
    G_i = g(d_p f_i, d_p f_i) at (t, p) and phi = (1 - h(t)) id + h(t) f1^-1 o f2.
    """

    type = "merge-foliations"

    def __init__(self, g_ref, f1, f2, f0=None, patch_id="merge", audit=None):
        if not math.isclose(f1.a, f2.a) or not math.isclose(f1.b, f2.b):
            raise ValueError("f1 and f2 must share (a, b)")
        self.g_ref = g_ref
        self.f1, self.f2 = f1, f2
        self.f0 = f1 if f0 is None else f0
        self.same0 = f0 is None
        self.a, self.b = f1.a, f1.b
        self.a_seq, self.b_seq = sequences(self.a, self.b)
        self.h = build_bump("h", self.a_seq[5])
        self.H = build_bump("H", ((self.a_seq[4], self.b_seq[4]), (self.a_seq[3], self.b_seq[3])))
        self.patch_id = patch_id
        self.audit = dict(audit or {})
        self.identical = f1.to_dict() == f2.to_dict()
        self._disc = None

    # -- geometry -------------------------------------------------------
    @property
    def fd_scale(self):
        return self.a

    def support_disc(self):
        if self._disc is None:
            self._disc = self.f0.support_disc(self.a_seq[3], self.b_seq[3])
        return self._disc

    def near(self, q, margin=0.0):
        c, r = self.support_disc()
        return torus_distance(q, c) < r + margin

    def psi(self, tp):
        """f1^-1 o f2 and its Jacobian."""
        if self.identical:
            return tp.copy(), np.broadcast_to(np.eye(2), tp.shape[:-1] + (2, 2)).copy()
        y, D2 = self.f2.f_jac(tp)
        s = self.f1._inv_lifted(self.f1.lift(y), guess=tp)
        D = solve2(self.f1.jac(s), D2)
        return s, D

    def phi(self, tp):
        tp = np.atleast_2d(tp)
        h, dh = self.h.eval(tp[:, 0])
        s, Ds = self.psi(tp)
        val = (1 - h)[:, None] * tp + h[:, None] * s
        D = (1 - h)[:, None, None] * np.eye(2) + h[:, None, None] * Ds
        D[:, :, 0] += dh[:, None] * (s - tp)
        return val, D

    def fhat(self, tp):
        v, _ = self.phi(tp)
        return self.f1.f(v)

    def dfhat(self, tp):
        v, D = self.phi(tp)
        return self.f1.jac(v) @ D

    def fhat_inv(self, q, iters=50, with_phi=False, target=None):
        """(t, p) with f^(t, p) = q; Newton on phi started from f1^-1(q).

        With ``with_phi`` also returns phi and D phi at the solution.
        ``target`` is f1^-1(q) when the caller already has it.
        """
        if target is None:
            target = self.f1.inv(q)
        vfin = np.full_like(target, np.nan)
        Dfin = np.full(target.shape + (2,), np.nan)
        x = target.copy()
        ok = ~np.any(np.isnan(x), axis=1)
        if not np.any(ok):
            return (x, vfin, Dfin) if with_phi else x
        xt = x[ok]
        tt = target[ok]
        for _ in range(iters):
            v, D = self.phi(xt)
            step = solve2(D, tt - v)
            xt = xt + step
            if np.max(np.abs(step[:, 0]) / self.a + np.abs(step[:, 1]) / self.b) <= 1e-12:
                break
        v, D = self.phi(xt)
        if np.max(np.abs(v - tt)) > 1e-12:
            raise ContainmentFailure("inverse of the merged parametrization did not converge")
        x[ok] = xt
        vfin[ok], Dfin[ok] = v, D
        return (x, vfin, Dfin) if with_phi else x

    def ghat(self, tp, phi=None):
        """g^ in chart coordinates at f^(tp); ``phi`` = (phi, D phi) at tp if already known."""
        h = self.h(tp[:, 0])
        G = []
        for f in (self.f1, self.f2):
            fp = f.jac(tp)[:, :, 1]
            gm = self.g_ref._eval(normalize(f.f(tp)))
            G.append(np.einsum("ni,nij,nj->n", fp, gm, fp))
        F = np.zeros((len(tp), 2, 2))
        F[:, 0, 0] = 1.0
        F[:, 1, 1] = (1 - h) * G[0] + h * G[1]
        if phi is None:
            phi = self.phi(tp)
        Di = inv2(self.f1.jac(phi[0]) @ phi[1])
        return np.einsum("nki,nkl,nlj->nij", Di, F, Di)

    def weight(self, q):
        tp0 = self.f0.inv(q)
        return self.H(tp0)

    def apply(self, q, g):
        q = np.asarray(q, float)
        shape = q.shape[:-1]
        qf = q.reshape(-1, 2)
        gf_ = np.asarray(g).reshape(-1, 2, 2)
        near = self.near(qf)
        if not np.any(near):
            return g
        idx = np.flatnonzero(near)
        tp0 = self.f0.inv(qf[idx])
        H = self.H(tp0)
        sel = H > 0
        if not np.any(sel):
            return g
        idx, H = idx[sel], H[sel]
        tp, v, D = self.fhat_inv(qf[idx], with_phi=True, target=tp0[sel] if self.same0 else None)
        inside = _inside(tp, self.a_seq[5] * 4, self.b)  # R_{3,0} holds f0(R_33) images
        if not np.all(inside):
            raise ContainmentFailure("blend region is not covered by the merged parametrization")
        out = np.array(gf_, copy=True)
        Hm = H[:, None, None]
        out[idx] = Hm * self.ghat(tp, (v, D)) + (1 - Hm) * gf_[idx]
        return out.reshape(shape + (2, 2))

    # -- serialization --------------------------------------------------
    def to_dict(self):
        d = {"type": self.type, "id": self.patch_id, "f1": self.f1.to_dict(), "f2": self.f2.to_dict(),
             "audit": self.audit}
        if not self.same0:
            d["f0"] = self.f0.to_dict()
        return d

    @classmethod
    def from_dict(cls, d, metric):
        f1 = fermi_from_dict(d["f1"], metric)
        f2 = fermi_from_dict(d["f2"], metric)
        f0 = fermi_from_dict(d["f0"], metric) if "f0" in d else None
        return cls(metric, f1, f2, f0, d.get("id", "merge"), d.get("audit"))


PATCH_TYPES[MergePatch.type] = MergePatch.from_dict


# --------------------------------------------------------------------------
# validation and the merged family


def _rect_boundary(a, b, n=N_EDGE):
    s = np.linspace(-1.0, 1.0, n)
    return np.concatenate([
        np.column_stack([a * s, np.full(n, b)]), np.column_stack([a * s, np.full(n, -b)]),
        np.column_stack([np.full(n, -a), b * s]), np.column_stack([np.full(n, a), b * s]),
    ])


def _rect_fill(a, b, n=N_EDGE):
    s = np.linspace(-1.0, 1.0, n)
    T, P = np.meshgrid(a * s, b * s, indexing="ij")
    return np.column_stack([T.ravel(), P.ravel()])


def _slack(tp, a, b):
    """min over samples of the normalised distance to the boundary of [-a, a] x [-b, b] (NaN -> -inf)."""
    with np.errstate(invalid="ignore"):
        s = np.minimum((a - np.abs(tp[:, 0])) / a, (b - np.abs(tp[:, 1])) / b)
    s = np.where(np.isnan(s), -np.inf, s)
    return float(np.min(s))


def validate_merge(patch, n=N_EDGE):
    """Check the containments the construction needs; raise ContainmentFailure on the first violation."""
    A, B = patch.a_seq, patch.b_seq
    f0, f1, f2 = patch.f0, patch.f1, patch.f2
    margins = {}

    worst = np.inf
    for i in range(5):
        for j in range(5):
            bd = _rect_boundary(A[i + 1], B[j + 1], n)
            for src, dst in ((f2, f1), (f1, f2)):
                s = _slack(dst.inv(src.f(bd)), A[i], B[j])
                if s <= 0:
                    raise ContainmentFailure(f"rectangle containment fails at (i, j) = ({i}, {j})")
                worst = min(worst, s)
    margins["rectangles"] = worst

    worst = np.inf
    for i in range(5):
        for j in range(5):
            pts = patch.fhat(_rect_fill(A[i + 1], B[j + 1], n))
            for f in (f0, f1, f2):
                s = _slack(f.inv(pts), A[i], B[j])
                if s <= 0:
                    raise ContainmentFailure(f"merged map leaves f(R_{i}{j})")
                worst = min(worst, s)
    margins["fhat_in_f"] = worst

    tp = _rect_fill(A[1], B[1], n)
    _, D = patch.phi(tp)
    det = np.linalg.det(D)
    if np.min(det) <= 0:
        raise ContainmentFailure("merged parametrization folds (det D phi <= 0)")
    margins["det_phi"] = float(np.min(det))

    s = _slack(patch.fhat_inv(f0.f(_rect_boundary(A[3], B[3], n))), A[2], B[2])
    if s <= 0:
        raise ContainmentFailure("f0(R_33) is not inside f^(R_22)")
    margins["f0_in_fhat"] = s

    m = max(4, n // 2)
    tt = np.linspace(-A[1], -A[2], m)
    pp = np.linspace(-B[2], B[2], m)
    T_, P_ = np.meshgrid(tt, pp, indexing="ij")
    left = f1.f(np.column_stack([T_.ravel(), P_.ravel()]))
    right = f2.f(np.column_stack([-T_.ravel(), P_.ravel()]))
    inv = patch.fhat_inv(np.concatenate([left, right]))
    with np.errstate(invalid="ignore"):
        hit = _inside(inv, A[5], B[2])
    if np.any(hit):
        raise ContainmentFailure("outer pieces of the foliations meet f^(R_52)")
    with np.errstate(invalid="ignore"):
        sep = np.nanmin(np.maximum(np.abs(inv[:, 0]) - A[5], np.abs(inv[:, 1]) - B[2]))
    margins["separation"] = float(sep)
    return margins


@dataclass
class MergeResult:
    metric: CompositeMetric
    patch: MergePatch
    validation: dict
    audit: dict = field(default_factory=dict)

    def curve(self, p, n=257):
        """Constructed curve gamma_p on [-a, a]: f1, then f^, then f2."""
        P = self.patch
        t = np.linspace(-P.a, P.a, n)
        tp = np.column_stack([t, np.full(n, float(p))])
        q = np.empty((n, 2))
        v = np.empty((n, 2))
        lo, hi = t <= -P.a_seq[2], t >= P.a_seq[2]
        mid = ~lo & ~hi
        for m, f in ((lo, P.f1), (hi, P.f2)):
            if np.any(m):
                q[m] = f.f(tp[m])
                v[m] = f.jac(tp[m])[:, :, 0]
        if np.any(mid):
            q[mid] = P.fhat(tp[mid])
            v[mid] = P.dfhat(tp[mid])[:, :, 0]
        return t, q, v

    def integrated_curve(self, p, n=257):
        """g~-geodesic started at f1(-a, p) with velocity d_t f1(-a, p)."""
        P = self.patch
        tp = np.array([[-P.a, float(p)]])
        x0 = P.f1.f(tp)[0]
        v0 = P.f1.jac(tp)[0, :, 0]
        t = np.linspace(-P.a, P.a, n)
        seg = gf.integrate_geodesic(self.metric, x0, v0, 2 * P.a, dt=(2 * P.a) / (n - 1), check_unit=False)
        return t, seg

    def conclusions(self, ps=None, n=257, n_res=2049):
        """Numerical check of the merge conclusions on a sample of p in B_{b/4}."""
        P = self.patch
        if ps is None:
            ps = np.linspace(-P.b_seq[5], P.b_seq[5], 5) * 0.999
        out = {"match_before": 0.0, "match_after": 0.0, "residual": 0.0, "constructed_vs_integrated": 0.0}
        for p in ps:
            t, seg = self.integrated_curve(p, n)
            tp = np.column_stack([t, np.full(n, float(p))])
            before = t < -P.a / 4
            after = t > P.a / 4
            d1 = np.linalg.norm(seg.q[before] - P.f1.f(tp[before]), axis=1)
            d2 = np.linalg.norm(seg.q[after] - P.f2.f(tp[after]), axis=1)
            out["match_before"] = max(out["match_before"], float(np.max(d1)))
            out["match_after"] = max(out["match_after"], float(np.max(d2)))
            tc, qc, vc = self.curve(p, n)
            out["constructed_vs_integrated"] = max(out["constructed_vs_integrated"],
                                                   float(np.max(np.linalg.norm(qc - seg.q, axis=1))))
            tc, qc, vc = self.curve(p, n_res)
            cseg = gf.GeodesicSegment(self.metric.metric_id, tc - tc[0], qc, vc)
            out["residual"] = max(out["residual"], gf.geodesic_residual(self.metric, cseg))
        return out


def merge_foliations(g, f1, f2, f0=None, neighborhood_budget=None, patch_id=None, validate=True, operation="merge"):
    """Blend the foliations f1 and f2; returns a :class:`MergeResult`.

    ``neighborhood_budget`` (center, radius), when given, must contain the
    patch support.
    """
    n_prev = len(g.patches) if isinstance(g, CompositeMetric) else 0
    pid = patch_id or f"{operation}-{n_prev}"
    audit = {"operation": operation, "a": f1.a, "b": f1.b, "T1": f1.T, "T2": f2.T}
    patch = MergePatch(g, f1, f2, f0, pid, audit)
    margins = validate_merge(patch) if validate else {}
    c, r = patch.support_disc()
    if neighborhood_budget is not None:
        bc, br = neighborhood_budget
        if torus_distance(c, bc) + r > br:
            raise ContainmentFailure("patch support exceeds the neighborhood budget")
    try:
        out = compose_with_patch(g, patch, validate=validate)
    except NonSPD:
        raise
    audit.update(margins=margins, support_center=[float(v) for v in c], support_radius=float(r))
    return MergeResult(out, patch, margins, audit)


# --------------------------------------------------------------------------
# merging two geodesics


def _disc(U):
    c, r = U
    return np.asarray(c, float), float(r)


def crossing_intervals(seg, U):
    """Parameter intervals on which seg lies inside the disc U."""
    c, r = _disc(U)
    inside = torus_distance(seg.q, c) < r
    if not np.any(inside):
        return []
    idx = np.flatnonzero(inside)
    breaks = np.flatnonzero(np.diff(idx) > 1)
    los = np.r_[idx[0], idx[breaks + 1]]
    his = np.r_[idx[breaks], idx[-1]]
    return [(float(seg.t[lo]), float(seg.t[hi])) for lo, hi in zip(los, his)]


def _same_curve(s1, s2, tol=1e-13):
    return (np.allclose(s1.q[0], s2.q[0], atol=tol, rtol=0) and np.allclose(s1.v[0], s2.v[0], atol=tol, rtol=0)
            and abs(s1.length - s2.length) < tol)


def _patch_shape(rho, b):
    a = 0.4 * rho
    T = max(0.4 * rho / b, 2.5 * a)
    return a, T


def merge_geodesics(g, seg1, seg2, U, t0, b_schedule=(0.2, 0.3, 0.12), audit=None, operation="merge-geodesics"):
    """Metric equal to g off U with a geodesic following seg1 and then seg2.

    Both segments share the parameter t; the blend is centred at t0.
    Returns (metric, merged segment of length seg2.length).
    """
    if _same_curve(seg1, seg2):
        return g, seg1
    c, rU = _disc(U)
    for k, seg in enumerate((seg1, seg2)):
        iv = crossing_intervals(seg, U)
        if len(iv) != 1 or not iv[0][0] < t0 < iv[0][1]:
            raise NotInNeighborhood(f"segment {k + 1} must cross U once, around t0")
    u1, u2 = seg1.position(t0)[0], seg2.position(t0)[0]
    rho = rU - max(float(torus_distance(u1, c)), float(torus_distance(u2, c)))
    if rho <= 0:
        raise NotInNeighborhood("merge point lies outside U")
    last = None
    res = None
    for b in b_schedule:
        a, T = _patch_shape(rho, b)
        try:
            f1 = build_fermi_patch(g, seg1, t0, T, a, b)
            f2 = build_fermi_patch(g, seg2, t0, T, a, b)
            res = merge_foliations(g, f1, f2, neighborhood_budget=(c, rU), operation=operation)
            break
        except (ContainmentFailure, InjectivityFailure, ConjugateBasepoint) as e:
            last = e
    if res is None:
        raise NotInNeighborhood(f"segments too far apart to merge inside U: {last}")
    merged = gf.integrate_geodesic(res.metric, seg1.q[0], seg1.v[0], seg2.length, dt=seg2.dt, check_unit=False)
    a = res.patch.a
    pre = merged.t <= t0 - a / 4
    post = merged.t >= t0 + a / 4
    dev1 = float(np.max(np.linalg.norm(merged.q[pre] - seg1.position(merged.t[pre]), axis=1), initial=0.0))
    dev2 = float(np.max(np.linalg.norm(merged.q[post] - seg2.position(merged.t[post]), axis=1), initial=0.0))
    if max(dev1, dev2) > TAU_MATCH:
        raise NotInNeighborhood(f"merged curve misses its inputs by {max(dev1, dev2):.3e}")
    merged.meta.update(merge_t0=float(t0), patch=res.patch.patch_id)
    if audit is not None:
        audit.append(dict(res.audit, t0=float(t0), U=[c.tolist(), rU], match_before=dev1, match_after=dev2))
    return res.metric, merged


# --------------------------------------------------------------------------
# destroying conjugacy


def _required_pairs(marks, s0):
    j = int(np.searchsorted(marks, s0)) - 1
    if j < 0 or j >= len(marks) - 1 or not marks[j] < s0 < marks[j + 1]:
        raise ValueError("s0 must lie strictly inside a mark interval")
    return [(k1, k2) for k1 in range(j + 1) for k2 in range(j + 1, len(marks))]


def _margin(g, seg, ta, tb):
    return gf.conjugacy(g, seg, ta, tb, raise_inconclusive=False)


def _check_simple_at(seg, s0, tol=1e-6):
    rep = gf.self_intersections(seg)
    for t1, t2 in rep.pairs:
        if min(abs(t1 - s0), abs(t2 - s0)) < tol:
            raise ValueError("seg(s0) is a self-intersection point")


def _sub_discs(seg, U, s0, k):
    """k disjoint discs centred on seg inside U, spread along the crossing around s0."""
    c, rU = _disc(U)
    iv = crossing_intervals(seg, U)
    iv = [w for w in iv if w[0] < s0 < w[1]]
    if len(crossing_intervals(seg, U)) != 1 or not iv:
        raise ValueError("U0 must meet the curve in exactly one parameter interval containing s0")
    lo, hi = iv[0]
    w = min(s0 - lo, hi - s0)
    if k == 1:
        centers = [s0]
        half = w
    else:
        half = w / k
        centers = [s0 - w + half * (2 * i + 1) for i in range(k)]
    out = []
    for s in centers:
        q = seg.position(s)[0]
        rho = min(0.95 * half, 0.95 * (rU - float(torus_distance(q, c))))
        if rho <= 0:
            raise ValueError("U0 too small for the requested perturbations")
        out.append((float(s), normalize(q), rho))
    return out


def destroy_conjugacy(g, seg, marks, s0, U0, tau_conj=gf.TAU_CONJ, delta_steps=8, audit=None):
    """Perturb g inside U0 so every required mark pair is nonconjugate along seg.

    A pair (t_k1, t_k2) is required when t_k1 < s0 < t_k2.  Each pair still
    conjugate gets its own patch (a blend of the fan from seg(t_k1) with the
    fan from seg(t_k1 + delta)); seg stays a unit-speed geodesic.
    """
    marks = np.asarray(marks, float)
    pairs = _required_pairs(marks, s0)
    reports = {p: _margin(g, seg, marks[p[0]], marks[p[1]]) for p in pairs}
    todo = [p for p in pairs if reports[p].verdict != "nonconjugate"]
    if not todo:
        return g
    _check_simple_at(seg, s0)
    discs = _sub_discs(seg, U0, s0, len(todo))
    cur = g
    for (k1, k2), (sc, qc, rho) in zip(todo, discs):
        ta, tb = marks[k1], marks[k2]
        T = sc - ta
        a = 0.4 * rho
        b = min(0.3, 0.4 * rho / (T + a))
        if T <= 2 * a:
            raise ValueError("perturbation disc too close to the starting mark")
        f1 = build_fermi_patch(cur, seg, sc, T, a, b)
        delta0 = 0.04 * T
        done = False
        last = None
        for i in range(delta_steps):
            delta = delta0 / 2**i
            if _margin(cur, seg, ta + delta, tb).margin * (tb - ta - delta) / (tb - ta) < tau_conj:
                last = "shifted pair still (nearly) conjugate"
                continue
            try:
                f2 = build_fermi_patch(cur, seg, sc, T - delta, a, b)
                res = merge_foliations(cur, f1, f2, neighborhood_budget=(qc, rho), operation="destroy-conjugacy")
            except (ContainmentFailure, InjectivityFailure, ConjugateBasepoint) as e:
                last = str(e)
                continue
            new = {p: _margin(res.metric, seg, marks[p[0]], marks[p[1]]) for p in pairs}
            fixed = [p for p in pairs if p in reports and (reports[p].verdict == "nonconjugate" or p == (k1, k2))]
            if all(new[p].margin >= tau_conj for p in fixed):
                cur = res.metric
                reports = new
                if audit is not None:
                    audit.append(dict(res.audit, delta=float(delta), pair=[float(ta), float(tb)],
                                      margin=float(new[(k1, k2)].margin)))
                done = True
                break
            last = "margins not achieved"
        if not done:
            if reports[(k1, k2)].verdict == "inconclusive":
                raise AlreadyInconclusive(f"pair ({ta:.6g}, {tb:.6g}): {last}")
            raise ContainmentFailure(f"could not deconjugate pair ({ta:.6g}, {tb:.6g}): {last}")
    bad = [p for p in pairs if reports[p].margin < tau_conj]
    if bad:
        raise AlreadyInconclusive(f"pairs {bad} remain below the margin")
    return cur


# --------------------------------------------------------------------------
# avoiding a finite set


def avoid_points(g, seg, Z, s0, U0, w1, w2, eps_avoid=1e-5, audit=None):
    """Replace seg by a geodesic x -> y with end tangents w1, w2 that misses Z.

    The new curve follows the g-geodesic from x with velocity w1 up to U0,
    is merged there with the g-geodesic arriving at y with velocity w2, and
    x, y are made nonconjugate along it inside U0 if needed.
    Returns (metric, new segment).
    """
    from .blocking import min_interior_distance

    x, y, L = seg.start, seg.end, seg.length
    w1 = gf.unit_vector(g, x, w1)
    w2 = gf.unit_vector(g, y, w2)
    if np.allclose(w1, seg.start_velocity, atol=1e-14) or np.allclose(w2, seg.end_velocity, atol=1e-14):
        raise ValueError("w1 and w2 must differ from the current end tangents")
    c, rU = _disc(U0)
    for z in np.atleast_2d(np.asarray(Z, float)):
        if torus_distance(z, c) < rU:
            raise ValueError("U0 must be disjoint from Z")
    g1 = gf.integrate_geodesic(g, x, w1, L, dt=seg.dt)
    g2 = gf.integrate_geodesic(g, seg.q[-1], -w2, L, dt=seg.dt).reversed()
    rho = 0.45 * rU
    t_merge = s0 - rho
    U1 = (normalize(seg.position(t_merge)[0]), rho)
    try:
        g_new, merged = merge_geodesics(g, g1, g2, U1, t_merge, audit=audit, operation="avoid-points")
    except NotInNeighborhood as e:
        raise NeighborhoodTooLarge(f"end tangents too far from the original: {e}") from None
    dz = min((min_interior_distance(merged, z)[0] for z in np.atleast_2d(np.asarray(Z, float))), default=math.inf)
    if dz <= eps_avoid:
        raise NeighborhoodTooLarge(f"new curve passes within {dz:.3e} of Z")
    rep = _margin(g_new, merged, 0.0, L)
    if rep.verdict != "nonconjugate":
        U2 = (normalize(merged.position(s0 + rho)[0]), rho)
        g_new = destroy_conjugacy(g_new, merged, [0.0, L], s0 + rho, U2, audit=audit)
    merged.meta.update(d_Z=float(dz))
    if audit is not None:
        audit.append({"operation": "avoid-points", "s0": float(s0), "U0": [c.tolist(), rU], "d_Z": float(dz),
                      "w1": w1.tolist(), "w2": w2.tolist()})
    return g_new, merged
