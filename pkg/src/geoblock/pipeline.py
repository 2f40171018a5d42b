"""Grow a family of geodesics from x to y satisfying conditions (i)-(iv).

Each round asks the connector for the shortest geodesic not yet in the
family.  If the enlarged family passes the S-check it is accepted as is;
otherwise the candidate is rerouted by local surgeries placed away from
the accepted traces, and accepted once the full check passes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geodesicflow as gf
from .blocking import (
    EPS_INT,
    build_certificate,
    check_S_conditions,
    pair_intersections,
)
from .connector import _newton, local_degree, next_new_geodesic, same_geodesic
from .errors import (
    AlreadyInconclusive,
    BudgetExhausted,
    ConjugateBasepoint,
    ContainmentFailure,
    GeoblockError,
    InjectivityFailure,
    NeighborhoodTooLarge,
    NotInNeighborhood,
    RootLost,
    StepRejected,
)
from .metricfield import Bump, ConformalScaledMetric, normalize, torus_distance
from .surgery import avoid_points, crossing_intervals, destroy_conjugacy

log = logging.getLogger(__name__)

R_EXCL = 0.02
U0_RADIUS = 0.05
OFFSET0 = 1e-3


@dataclass
class Budgets:
    max_candidates: int = 24
    offset0: float = OFFSET0
    offset_halvings: int = 4
    r_excl: float = R_EXCL
    u0_radius: float = U0_RADIUS
    length_rounds: int = 6
    max_surgeries: int = 32


@dataclass
class GrowthState:
    metric: object
    x: np.ndarray
    y: np.ndarray
    family: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    exclusions: list = field(default_factory=list)
    budgets: Budgets = field(default_factory=Budgets)
    candidates_tried: int = 0
    surgeries: int = 0

    @property
    def same(self):
        return torus_distance(self.x, self.y) <= 1e-12

    def snapshot(self):
        return {"members": len(self.family), "candidates_tried": self.candidates_tried,
                "surgeries": self.surgeries, "skipped": len(self.skipped)}


def _rot(v, a):
    c, s = math.cos(a), math.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def intersection_points(x, y, family, eps=EPS_INT):
    """Pairwise meeting points of family members away from x and y."""
    pts = []
    for a in range(len(family)):
        for b in range(a + 1, len(family)):
            found, _ = pair_intersections(family[a], family[b], eps, exclude=(x, y))
            pts += [p for _, _, p, _ in found]
    return pts


def _trace_distance(points, seg):
    """Torus distance from each point to the sampled trace of seg."""
    d = np.full(len(points), np.inf)
    for q in seg.q:
        d = np.minimum(d, torus_distance(points, q))
    return d


def choose_u0(state, cand, Z):
    """Parameter s0 on cand and a disc U0 around cand(s0) clear of traces, Z and earlier patches."""
    B = state.budgets
    L = cand.length
    t = cand.t
    inner = (t > 0.1 * L) & (t < 0.9 * L)
    pts = normalize(cand.q[inner])
    ts = t[inner]
    clear = np.full(len(pts), np.inf)
    for seg in state.family:
        clear = np.minimum(clear, _trace_distance(pts, seg) - B.r_excl)
    for z in Z:
        clear = np.minimum(clear, torus_distance(pts, z))
    for p in state.metric.patches:
        c, r = p.support_disc()
        clear = np.minimum(clear, torus_distance(pts, c) - r)
    # stay clear of the curve's own other passes
    for k, q in enumerate(pts):
        far = np.abs(t - ts[k]) > 2 * B.u0_radius
        if np.any(far):
            clear[k] = min(clear[k], float(np.min(torus_distance(normalize(cand.q[far]), q))))
    k = int(np.argmax(clear))
    r = min(B.u0_radius, 0.9 * float(clear[k]))
    if not r > 1e-3:
        raise StepRejected("no room for a surgery disc on the candidate", None, {"clearance": float(clear[k])})
    return float(ts[k]), (pts[k], r)


def _marks(cand, Z, tol=1e-6):
    """Times at which cand passes through points of Z (plus 0 and L)."""
    from .blocking import _interior_minima

    ts = [0.0, cand.length]
    for z in Z:
        ts += [t for t, d in _interior_minima(cand, z) if d <= tol]
    return sorted(set(ts))


def _residuals_ok(g, family, tau=gf.TAU_UNIT):
    """Accepted members must still be geodesics of g (unchanged curves)."""
    for seg in family:
        re = gf.endpoints_batch(g, seg.q[0], seg.v[0], seg.length)[0]
        if np.linalg.norm(re[:2] - seg.q[-1]) > 1e-8:
            return False
    return True


def _failure(rep):
    c = rep.first_failure()
    return {"condition": c, "margin": rep.margins.get(c), "witness": rep.witnesses.get(c)}


def _accept(state, seg, rep, how, audit):
    state.family.append(seg)
    state.reports.append(rep)
    state.exclusions.append(seg)
    state.steps.append({"member": len(state.family), "how": how, "length": float(seg.length),
                        "theta0": float(seg.theta0), "margins": rep.margins, "surgeries": audit})
    log.info("accepted member %d (%s), length %.6f", len(state.family), how, seg.length)
    return state


def step_new_geodesic(state, cand):
    """Add cand (or a rerouted version of it) to the family; raises StepRejected."""
    g, x, y = state.metric, state.x, state.y
    if any(same_geodesic(cand, m) or (state.same and same_geodesic(cand.reversed(), m)) for m in state.family):
        raise ValueError("candidate already in the family")
    try:
        rep = check_S_conditions(g, x, y, state.family + [cand])
    except GeoblockError as e:
        rep = None
        first = {"condition": "iv", "error": str(e)}
    if rep is not None and rep.passes():
        return _accept(state, cand, rep, "direct", [])
    if rep is not None:
        first = _failure(rep)
    if state.surgeries >= state.budgets.max_surgeries:
        raise StepRejected("surgery budget exhausted", first.get("condition"), first)

    # Z: points the rerouted curve has to miss
    Z = [x] + ([] if state.same else [y]) + intersection_points(x, y, state.family)
    s0, U0 = choose_u0(state, cand, Z)
    marks = _marks(cand, Z)
    audit = []
    g1 = g
    try:
        if len(marks) > 2:
            # keep x -> z_k and z_k -> y nonconjugate before rerouting
            for lo, hi in ((marks[0], marks[1]), (marks[-2], marks[-1])):
                s = 0.5 * (lo + hi)
                iv = crossing_intervals(cand, U0)
                if not any(a < s < b for a, b in iv):
                    continue
                g1 = destroy_conjugacy(g1, cand, marks, s, U0, audit=audit)
    except (AlreadyInconclusive, ContainmentFailure, ValueError) as e:
        raise StepRejected(f"deconjugation failed: {e}", first.get("condition"), first) from None

    v0, v1 = cand.start_velocity, cand.end_velocity
    last = first
    for k in range(state.budgets.offset_halvings + 1):
        eps = state.budgets.offset0 / 2**k
        for sa, sb in ((1, -1), (-1, 1), (1, 1), (-1, -1)):
            trial_audit = list(audit)
            try:
                g2, new = avoid_points(g1, cand, Z, s0, U0, _rot(v0, sa * eps), _rot(v1, sb * eps),
                                       audit=trial_audit)
            except (NeighborhoodTooLarge, NotInNeighborhood, ContainmentFailure, InjectivityFailure,
                    ConjugateBasepoint, AlreadyInconclusive, ValueError) as e:
                last = {"surgery": str(e)}
                continue
            if not _residuals_ok(g2, state.family):
                last = {"surgery": "patch disturbed an accepted member"}
                continue
            try:
                rep = check_S_conditions(g2, x, y, state.family + [new])
            except GeoblockError as e:
                last = {"condition": "iv", "error": str(e)}
                continue
            if rep.passes():
                state.metric = g2
                state.surgeries += 1
                new.meta.update(rerouted_from=float(cand.theta0), offset=eps, signs=[sa, sb])
                return _accept(state, new, rep, "rerouted", trial_audit)
            last = _failure(rep)
    raise StepRejected("no surgery produced a valid family", last.get("condition"), last)


def grow_family(g0, x, y, n=None, m=None, budgets=None, seed=0, progress=None):
    """Grow a family of n = 2m + 1 geodesics; returns (metric, family, certificate or None, state)."""
    if n is None:
        if m is None:
            raise ValueError("give n or m")
        n = 2 * int(m) + 1
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)  # reserved for tie-breaking; the loop itself is deterministic
    state = GrowthState(g0, normalize(np.asarray(x, float)), normalize(np.asarray(y, float)),
                        budgets=budgets or Budgets())
    state.seed = int(seed)
    state.rng = rng
    while len(state.family) < n:
        if state.candidates_tried >= state.budgets.max_candidates:
            raise BudgetExhausted("candidate budget exhausted", state)
        try:
            cand = next_new_geodesic(state.metric, state.x, state.y, state.family + state.skipped,
                                     rounds=state.budgets.length_rounds, certified=state.family)
        except BudgetExhausted as e:
            raise BudgetExhausted(str(e), state) from None
        state.candidates_tried += 1
        try:
            step_new_geodesic(state, cand)
        except StepRejected as e:
            log.info("candidate theta=%.6f rejected: %s", cand.theta0, e)
            state.skipped.append(cand)
            state.steps.append({"member": None, "how": "rejected", "theta0": float(cand.theta0),
                                "length": float(cand.length), "reason": str(e)})
        if progress:
            progress(state)
    cert = None
    if n % 2 == 1:
        cert = build_certificate(state.metric, state.x, state.y, state.family)
    return state.metric, state.family, cert, state


def run_manifest(state, seed, cert_path=None, elapsed=None):
    """JSON-ready summary of a growth run."""
    return {
        "seed": int(seed),
        "x": state.x.tolist(),
        "y": state.y.tolist(),
        "budgets": asdict(state.budgets),
        "steps": state.steps,
        "members": len(state.family),
        "patches": len(state.metric.patches),
        "metric_id": state.metric.metric_id,
        "certificate": cert_path,
        "elapsed_s": elapsed,
    }


# --------------------------------------------------------------------------
# stability under small perturbations


def probe_bump(rng, eps_probe, radius=0.1):
    """Random conformal bump whose log-factor has sup-gradient eps_probe."""
    s = np.linspace(0, radius, 2001)
    from .metricfield import _psi

    prof = _psi((s / radius) ** 2)[0]
    slope = float(np.max(np.abs(np.gradient(prof, s))))
    amp = eps_probe / slope if slope > 0 else 0.0
    return Bump(tuple(rng.random(2)), float(amp), float(radius))


@dataclass
class ProbeReport:
    eps_probe: float
    passes: bool
    margins: dict
    base_margins: dict
    root_shift: float
    bumps: list

    def to_dict(self):
        return {"eps_probe": self.eps_probe, "passes": self.passes, "margins": self.margins,
                "base_margins": self.base_margins, "root_shift": self.root_shift, "bumps": self.bumps}


def resolve_family(g, x, y, family):
    """Re-solve each member's endpoint problem under g starting from its old (theta, L)."""
    x = normalize(np.asarray(x, float))
    out, shift = [], 0.0
    for seg in family:
        target = seg.q[-1]
        th, L, err = _newton(g, x, target, seg.theta0, seg.length)
        if not err < 1e-9:
            raise RootLost(f"no root near theta={seg.theta0:.6f}")
        deg = local_degree(g, x, th, L, target)
        if deg not in (1, -1):
            raise RootLost(f"root near theta={seg.theta0:.6f} has degree {deg}")
        new = gf.integrate_from_angle(g, x, th, L)
        new.meta["degree"] = deg
        shift = max(shift, abs(th - seg.theta0), abs(L - seg.length))
        out.append(new)
    return out, shift


def stability_probe(g, x, y, family, eps_probe=1e-4, n_probes=3, seed=0, perturbations=None):
    """Re-check (i)-(iii) under small random conformal bumps.

    ``perturbations`` (a list of Bump lists) overrides the random draws.
    """
    rng = np.random.default_rng(seed)
    base = check_S_conditions(g, x, y, family, conditions=("i", "ii", "iii"))
    if perturbations is None:
        perturbations = [[probe_bump(rng, eps_probe)] for _ in range(n_probes)] if eps_probe > 0 else [[]]
    reports = []
    for bumps in perturbations:
        gp = ConformalScaledMetric(g, bumps) if bumps else g
        fam, shift = resolve_family(gp, x, y, family)
        rep = check_S_conditions(gp, x, y, fam, conditions=("i", "ii", "iii"))
        reports.append(ProbeReport(float(eps_probe), rep.passes(("i", "ii", "iii")), rep.margins, base.margins, float(shift),
                                   [{"center": list(b.center), "amplitude": b.amplitude, "radius": b.radius}
                                    for b in bumps]))
    return reports


def critical_probe_size(g, x, y, family, lo=1e-6, hi=1.0, iters=12, seed=0):
    """Bisection (in log scale) on the probe size at which (i)-(iii) first fail."""
    def ok(eps):
        try:
            return all(r.passes for r in stability_probe(g, x, y, family, eps, n_probes=1, seed=seed))
        except RootLost:
            return False

    if not ok(lo):
        return 0.0
    if ok(hi):
        return hi
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


__all__ = [
    "Budgets",
    "GrowthState",
    "ProbeReport",
    "critical_probe_size",
    "grow_family",
    "run_manifest",
    "resolve_family",
    "stability_probe",
    "step_new_geodesic",
]
