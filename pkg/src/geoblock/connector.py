"""Two-point geodesic problem on the torus.

Geodesics from x to y are roots of (theta, L) -> exp_x(L v(theta)) - (y + k)
in the universal cover, one root family per lattice lift k.  Roots are
bracketed by the winding number of grid-cell images, polished by Newton on
(theta, L) and accepted only with a nonzero local degree.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import geodesicflow as gf
from .errors import BudgetExhausted, DegenerateRoot, ResolutionTooCoarse
from .metricfield import normalize, torus_distance

TAU_HIT = 1e-7
TAU_DUP = 1e-5
N_DEGREE = 64
DEGREE_RADIUS = 1e-4
CELL_SCALE = 0.25
DT_LEN = 1.0 / 64
# the sweep only brackets roots in cells ~CELL_SCALE wide; Newton re-polishes at full accuracy
NEWTON_SWITCH = 1e-6
RTOL_SWEEP = 1e-8
ATOL_SWEEP = 1e-10
TWO_PI = 2.0 * math.pi


def winding_number(points, center=(0.0, 0.0)):
    """Winding number of the closed polygon ``points`` around ``center``.

    Integer quadrant bookkeeping; a diagonal jump is resolved by the sign of
    the cross product.  Returns None if the polygon passes through center.
    """
    d = np.asarray(points, float) - np.asarray(center, float)
    if np.any(np.all(d == 0.0, axis=1)):
        return None
    quad = np.where(d[:, 0] > 0, np.where(d[:, 1] >= 0, 0, 3), np.where(d[:, 1] > 0, 1, 2))
    quad = np.where((d[:, 0] == 0) & (d[:, 1] > 0), 1, quad)
    quad = np.where((d[:, 0] == 0) & (d[:, 1] < 0), 3, quad)
    total = 0
    n = len(d)
    for i in range(n):
        a, b = quad[i], quad[(i + 1) % n]
        delta = (b - a) % 4
        if delta == 1:
            total += 1
        elif delta == 3:
            total -= 1
        elif delta == 2:
            p, q = d[i], d[(i + 1) % n]
            cr = p[0] * q[1] - p[1] * q[0]
            if cr == 0.0:
                return None
            total += 2 if cr > 0 else -2
    return total // 4


def same_geodesic(a, b, tau=TAU_DUP):
    dth = abs((a.theta0 - b.theta0 + math.pi) % TWO_PI - math.pi)
    return dth <= tau and abs(a.length - b.length) <= tau


def _sig(seg):
    return round(seg.length / TAU_DUP), round(seg.theta0 / TAU_DUP)


@dataclass
class ConnectionSet:
    x: np.ndarray
    y: np.ndarray
    L_max: float
    geodesics: list = field(default_factory=list)
    metric_id: str = ""

    def __len__(self):
        return len(self.geodesics)

    def __iter__(self):
        return iter(self.geodesics)

    def __getitem__(self, i):
        return self.geodesics[i]

    @property
    def lengths(self):
        return [s.length for s in self.geodesics]

    def contains(self, seg, tau=TAU_DUP, reversal=False):
        for s in self.geodesics:
            if same_geodesic(s, seg, tau):
                return True
            if reversal and same_geodesic(s.reversed(), seg, tau):
                return True
        return False

    def to_dict(self):
        return {
            "metric": self.metric_id,
            "x": [float(c) for c in self.x],
            "y": [float(c) for c in self.y],
            "L_max": float(self.L_max),
            "geodesics": [
                {
                    "theta0": s.theta0,
                    "length": s.length,
                    "endpoint_error": float(s.meta.get("endpoint_error", torus_distance(s.end, self.y))),
                    "degree": int(s.meta.get("degree", 1)),
                }
                for s in self.geodesics
            ],
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _sort_dedupe(segs, tau=TAU_DUP):
    segs = sorted(segs, key=lambda s: (s.length, s.theta0))
    out = []
    for s in segs:
        if not any(same_geodesic(s, o, tau) for o in out):
            out.append(s)
    return out


# --------------------------------------------------------------------------
# flat oracle


def flat_torus_oracle(x, y, L_max, dt=gf.DT_SAMPLE):
    """All straight segments from x to the lifts y + k of length <= L_max."""
    x = normalize(np.asarray(x, float))
    y = normalize(np.asarray(y, float))
    from .metricfield import FlatMetric

    g = FlatMetric()
    R = int(math.ceil(L_max)) + 1
    segs = []
    for i in range(-R, R + 1):
        for j in range(-R, R + 1):
            d = y + (i, j) - x
            L = float(np.hypot(*d))
            if L <= 1e-12 or L > L_max:
                continue
            s = gf.integrate_geodesic(g, x, d / L, L, dt=dt)
            s.meta.update(lift=(i, j), degree=1, endpoint_error=float(torus_distance(s.end, y)))
            segs.append(s)
    return ConnectionSet(x, y, L_max, _sort_dedupe(segs), g.metric_id)


# --------------------------------------------------------------------------
# shooting


def _dirs(g, x, theta):
    u = np.column_stack([np.cos(theta), np.sin(theta)])
    n2 = g.norm2(np.broadcast_to(x, u.shape), u)
    return u / np.sqrt(n2)[:, None]


def _dir_and_derivative(g, x, theta):
    G = g.eval(x)
    u = np.array([math.cos(theta), math.sin(theta)])
    du = np.array([-math.sin(theta), math.cos(theta)])
    N = math.sqrt(u @ G @ u)
    v = u / N
    dv = du / N - u * (u @ G @ du) / N**3
    return v, dv


def _newton(g, x, target, theta, L, tol=1e-12, max_iter=40):
    """Polish (theta, L) so that the lifted endpoint hits ``target``."""
    loose = True  # cheap tolerances until the loose solution is close
    for _ in range(max_iter):
        v, dv = _dir_and_derivative(g, x, theta)
        tols = dict(rtol=RTOL_SWEEP, atol=ATOL_SWEEP) if loose else {}
        st = gf.endpoints_batch(g, x, v, L, ncols=1, J0p=dv, **tols)[0]
        F = st[:2] - target
        err = float(np.hypot(*F))
        if loose and err < NEWTON_SWITCH:
            loose = False
            continue
        if err < tol and not loose:
            return theta, L, err
        Jm = np.column_stack([st[4:6], st[2:4]])
        try:
            step = np.linalg.solve(Jm, -F)
        except np.linalg.LinAlgError:
            return theta, L, err
        # damp large steps
        lim = 0.2
        sc = min(1.0, lim / max(abs(step[0]), 1e-300), lim / max(abs(step[1]), 1e-300))
        theta += sc * step[0]
        L += sc * step[1]
        if L <= 0:
            return theta, L, float("inf")
    v = _dirs(g, x, np.array([theta]))[0]
    st = gf.endpoints_batch(g, x, v, L)[0]
    return theta, L, float(np.hypot(*(st[:2] - target)))


def local_degree(g, x, theta, L, target, radius=DEGREE_RADIUS, n=N_DEGREE):
    """Winding number of w -> exp_x(w) - target on a small circle around w = L v(theta)."""
    v = _dirs(g, x, np.array([theta]))[0]
    w = L * v
    phi = np.linspace(0.0, TWO_PI, n, endpoint=False)
    W = w + radius * max(L, 1.0) * np.column_stack([np.cos(phi), np.sin(phi)])
    y0 = np.zeros((n, 4))
    y0[:, :2] = x
    y0[:, 2:] = W
    ends = gf.integrate_states(g, y0, np.array([0.0, 1.0]))[:, -1, :2]
    k = winding_number(ends, target)
    return 0 if k is None else k


def _cell_winding(g, x, th_a, th_b, L_a, L_b, target, m=16):
    """Winding of the image of a (theta, L) cell boundary, m points per edge."""
    th = np.linspace(th_a, th_b, m + 1)
    Ls = np.linspace(L_a, L_b, m + 1)
    V = _dirs(g, x, th)
    y0 = np.zeros((m + 1, 4))
    y0[:, :2] = x
    y0[:, 2:] = V
    if L_a > 0:
        P = gf.integrate_states(g, y0, np.concatenate([[0.0], Ls]), rtol=RTOL_SWEEP, atol=ATOL_SWEEP)[:, 1:, :2]
    else:
        P = gf.integrate_states(g, y0, Ls, rtol=RTOL_SWEEP, atol=ATOL_SWEEP)[:, :, :2]
    ring = np.concatenate([P[:, 0], P[-1, 1:], P[-2::-1, -1], P[0, -2:0:-1]])
    k = winding_number(ring, target)
    return 1 if k is None else k


def _polish_cell(g, x, target, th_a, th_b, L_a, L_b):
    starts = [(0.5 * (th_a + th_b), 0.5 * (L_a + L_b))]
    starts += [(a, b) for a in (th_a, th_b) for b in (L_a, L_b) if b > 0]
    for th0, L0 in starts:
        th, L, err = _newton(g, x, target, th0, L0)
        if err <= TAU_HIT and L > 0:
            return th % TWO_PI, L
    return None


def _sweep(g, x, L_grid, n_theta):
    theta = np.linspace(0.0, TWO_PI, n_theta, endpoint=False)
    return theta, _rays(g, x, theta, L_grid)


def _rays(g, x, theta, L_grid):
    V = _dirs(g, x, theta)
    y0 = np.zeros((len(theta), 4))
    y0[:, :2] = x
    y0[:, 2:] = V
    return gf.integrate_states(g, y0, L_grid, rtol=RTOL_SWEEP, atol=ATOL_SWEEP)[:, :, :2]


def _gaps(P):
    """Largest endpoint distance between angularly adjacent rays (cyclic), per interval."""
    Pn = np.concatenate([P, P[:1]], axis=0)
    return np.max(np.linalg.norm(Pn[1:] - Pn[:-1], axis=-1), axis=1)


def _adaptive_sweep(g, x, L_grid, n_theta, max_theta):
    """Rays on a nonuniform angle grid, bisecting only intervals whose images spread too far.

    Returns (theta, theta of the next ray, endpoints).
    """
    theta, P = _sweep(g, x, L_grid, n_theta)
    min_gap = TWO_PI / max_theta
    while True:
        nxt = np.append(theta[1:], theta[0] + TWO_PI)
        bad = np.flatnonzero(_gaps(P) >= CELL_SCALE)
        if bad.size == 0:
            return theta, nxt, P
        if np.min(nxt[bad] - theta[bad]) < 2 * min_gap:
            raise ResolutionTooCoarse(f"endpoint spread {float(np.max(_gaps(P))):.3g} at angular step "
                                      f"{float(np.min(nxt[bad] - theta[bad])):.3g}")
        mid = 0.5 * (theta[bad] + nxt[bad])
        Pm = _rays(g, x, mid % TWO_PI, L_grid)
        order = np.argsort(np.concatenate([theta, mid]), kind="stable")
        theta = np.concatenate([theta, mid])[order]
        P = np.concatenate([P, Pm])[order]


def _known_in_cell(known, x, target, th_a, th_b, L_a, L_b):
    """A known geodesic whose (theta, L) lies in the cell and which ends at ``target``."""
    for s in known:
        th = (s.theta0 - th_a) % TWO_PI + th_a
        if th_a <= th <= th_b and L_a <= s.length <= L_b:
            if np.max(np.abs(s.q[-1] - s.q[0] + x - target)) <= TAU_HIT:
                return s
    return None


def _cells(g, x, y, L_max, angular_resolution, dt_len, max_theta, same):
    """Candidate (cell, lift) pairs with nonzero corner winding, sorted by length then angle."""
    nT = int(math.ceil((L_max + 2 * dt_len) / dt_len)) + 1
    L_grid = np.linspace(0.0, (nT - 1) * dt_len, nT)
    n_theta = angular_resolution or max(128, int(2 ** math.ceil(math.log2(TWO_PI * L_max / 0.02))))
    theta, theta_next, P = _adaptive_sweep(g, x, L_grid, n_theta, max_theta)
    Pn = np.concatenate([P, P[:1]], axis=0)
    c00, c10 = Pn[:-1, :-1], Pn[1:, :-1]
    c11, c01 = Pn[1:, 1:], Pn[:-1, 1:]
    corners = np.stack([c00, c10, c11, c01], axis=2)  # (N, T-1, 4, 2)
    lo = np.ceil(corners.min(axis=2) - y).astype(int)
    hi = np.floor(corners.max(axis=2) - y).astype(int)
    out = []
    for i, j in np.argwhere(np.all(lo <= hi, axis=-1)):
        for kx in range(lo[i, j, 0], hi[i, j, 0] + 1):
            for ky in range(lo[i, j, 1], hi[i, j, 1] + 1):
                if same and kx == 0 and ky == 0 and j == 0:
                    continue
                target = y + (kx, ky)
                wn = winding_number(corners[i, j], target)
                if wn == 0:
                    continue
                out.append((L_grid[j], theta[i], theta_next[i], L_grid[j + 1], (kx, ky), wn, (i, j)))
    out.sort(key=lambda c: (c[0], c[1], c[4]))
    return out


def _root_key(L, th):
    return round(L / TAU_DUP), round(th / TAU_DUP) % round(TWO_PI / TAU_DUP)


def find_geodesics(g, x, y, L_max, angular_resolution=None, dt_len=DT_LEN, max_theta=1 << 20,
                   strict=True, dt=gf.DT_SAMPLE, known=(), want=None):
    """Every degree-certified geodesic from x to y of length <= L_max.

    ``known`` are segments already certified as nondegenerate geodesics of g
    from x to y; a cell of winding +-1 holding one of them reuses it instead
    of polishing and re-certifying a root there.

    With a predicate ``want``, cells are resolved in order of length and the
    search stops once a wanted root is found and no unresolved cell can hold
    a shorter one; the returned set then holds only the roots resolved so far.
    """
    x = normalize(np.asarray(x, float))
    y = normalize(np.asarray(y, float))
    if L_max <= 0:
        raise ValueError("L_max must be positive")
    same = torus_distance(x, y) <= 1e-12
    found = []
    seen = set()
    best = math.inf
    for L_a, th_a, th_b, L_b, lift, wn, ij in _cells(g, x, y, L_max, angular_resolution, dt_len, max_theta, same):
        if L_a > best:
            break
        target = y + lift
        hit = _known_in_cell(known, x, target, th_a, th_b, L_a, L_b) if wn is not None and abs(wn) == 1 else None
        if hit is not None:
            key = _root_key(hit.length, hit.theta0)
            if hit.length <= L_max and key not in seen:
                seen.add(key)
                found.append(hit)
            continue
        if _cell_winding(g, x, th_a, th_b, L_a, L_b, target) == 0:
            continue
        root = _polish_cell(g, x, target, th_a, th_b, L_a, L_b)
        if root is None:
            if strict:
                raise DegenerateRoot(f"cell {tuple(int(v) for v in ij)} winds around lift {lift} but Newton stalled")
            continue
        th, L = root
        if L > L_max or (same and L < 1e-6):
            continue
        key = _root_key(L, th)
        if key in seen:
            continue
        seen.add(key)
        deg = local_degree(g, x, th, L, target)
        if deg == 0:
            if strict:
                raise DegenerateRoot(f"zero-degree root at theta={th:.9f}, L={L:.9f}")
            continue
        seg = gf.integrate_from_angle(g, x, th, L, dt=dt, check_unit=False)
        seg.meta.update(lift=lift, degree=int(deg), endpoint_error=float(torus_distance(seg.end, y)))
        found.append(seg)
        if want is not None and want(seg):
            best = min(best, seg.length)
    return ConnectionSet(x, y, L_max, _sort_dedupe(found), g.metric_id)


def next_new_geodesic(g, x, y, known, schedule=None, rounds=6, L0=None, certified=()):
    """Shortest geodesic from x to y not in ``known`` (nor reversed when x = y).

    ``certified`` (a subset of ``known``, see :func:`find_geodesics`) are
    reused as roots without re-polishing.
    """
    x = normalize(np.asarray(x, float))
    y = normalize(np.asarray(y, float))
    same = torus_distance(x, y) <= 1e-12
    members = list(known) if known is not None else []
    if schedule is None:
        start = L0 or max([s.length for s in members] + [torus_distance(x, y), 0.5])
        start = max(start, 0.5)
        schedule = [start * 2**k for k in range(rounds)]
    def is_new(s):
        return not any(same_geodesic(s, m) or (same and same_geodesic(s.reversed(), m)) for m in members)

    for L in schedule:
        cs = find_geodesics(g, x, y, L, known=certified, want=is_new)
        for s in cs:
            if is_new(s):
                return s
    raise BudgetExhausted(f"no new geodesic up to length {schedule[-1]:.3g}",
                          {"schedule": list(schedule), "known": len(members)})


__all__ = [
    "ConnectionSet",
    "find_geodesics",
    "flat_torus_oracle",
    "next_new_geodesic",
    "local_degree",
    "winding_number",
    "same_geodesic",
]
