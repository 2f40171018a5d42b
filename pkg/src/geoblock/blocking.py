"""Blocking sets, the four S-conditions, and insecurity certificates.

An insecurity certificate lists 2m+1 geodesics from x to y whose tangents are
pairwise independent at the endpoints, which avoid x and y in their
interiors, and no three of which pass through a common interior point.  Any
m-point set P would then contain a point shared by three of them, so no
set of m points blocks (x, y).
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.spatial import cKDTree

from . import geodesicflow as gf
from .connector import TAU_DUP, TAU_HIT, same_geodesic
from .errors import PointTooCloseToEndpoints, StaleMetric
from .metricfield import metric_from_dict, metric_hash, normalize, torus_distance

EPS_BLOCK = 1e-4
TAU_PT = 1e-6
TAU_LI = 1e-6
EPS_INT = 1e-5
EPS_AVOID = 1e-5
TAU_RES = 1e-6
SCHEMA = "geoblock-certificate/1"


# --------------------------------------------------------------------------
# distance helpers on sampled segments


def _interior_minima(seg, p, radius=None):
    """Refined local minima (t, dist) of t -> |seg(t) - p| over interior t."""
    p = normalize(np.asarray(p, float))
    d = torus_distance(seg.q, p)
    n = d.size
    out = []
    chord = float(np.max(np.linalg.norm(np.diff(seg.q, axis=0), axis=1)))
    for i in range(n):
        left = d[i - 1] if i > 0 else np.inf
        right = d[i + 1] if i < n - 1 else np.inf
        if not (d[i] <= left and d[i] <= right):
            continue
        if radius is not None and d[i] > radius + chord:
            continue
        lo = seg.t[max(i - 1, 0)]
        hi = seg.t[min(i + 1, n - 1)]

        def f(s):
            return float(torus_distance(seg.position(s)[0], p))

        r = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13})
        t_star, dist = (float(r.x), float(r.fun)) if r.fun < d[i] else (float(seg.t[i]), float(d[i]))
        if t_star <= seg.t[0] + 1e-9 or t_star >= seg.t[-1] - 1e-9:
            continue
        out.append((t_star, dist))
    return out


def min_interior_distance(seg, p):
    m = _interior_minima(seg, p)
    if not m:
        return math.inf, None
    t, d = min(m, key=lambda z: z[1])
    return d, t


# --------------------------------------------------------------------------
# blocking


@dataclass
class BlockingQuery:
    x: np.ndarray
    y: np.ndarray
    P: list
    family: list
    eps_block: float = EPS_BLOCK

    def __post_init__(self):
        self.x = normalize(np.asarray(self.x, float))
        self.y = normalize(np.asarray(self.y, float))
        self.P = [normalize(np.asarray(p, float)) for p in self.P]
        for p in self.P:
            if torus_distance(p, self.x) <= TAU_PT or torus_distance(p, self.y) <= TAU_PT:
                raise PointTooCloseToEndpoints(f"blocking point {p.tolist()} is within {TAU_PT} of x or y")


@dataclass
class BlockingVerdict:
    blocked: bool
    index: int | None = None
    min_distance: float | None = None
    passages: list = field(default_factory=list)

    def to_dict(self):
        return {"blocked": self.blocked, "index": self.index, "min_distance": self.min_distance,
                "passages": self.passages}


def is_blocking_set(q: BlockingQuery) -> BlockingVerdict:
    """Blocked iff every member passes within eps_block of some p in P at an interior time."""
    passages = []
    for k, seg in enumerate(q.family):
        best = (math.inf, None, None)
        for j, p in enumerate(q.P):
            d, t = min_interior_distance(seg, p)
            if d < best[0]:
                best = (d, t, j)
        if best[0] > q.eps_block:
            d = best[0]
            if not math.isfinite(d) and q.P:
                # no interior minimum: the infimum is approached at an endpoint
                d = min(float(np.min(torus_distance(seg.q, p))) for p in q.P)
            return BlockingVerdict(False, k, float(d), passages)
        passages.append({"geodesic": k, "point": best[2], "t": best[1], "distance": best[0]})
    return BlockingVerdict(True, None, None, passages)


def midpoint_classes(x, y):
    """The four points ((x+y)/2 + (j/2, k/2)) mod Z^2."""
    c = (np.asarray(x, float) + np.asarray(y, float)) / 2
    return [normalize(c + (j / 2, k / 2)) for j in (0, 1) for k in (0, 1)]


# --------------------------------------------------------------------------
# intersections between two segments


def _clusters(pairs):
    pairs = sorted(map(tuple, pairs))
    lookup = set(pairs)
    seen = set()
    out = []
    for p in pairs:
        if p in seen:
            continue
        stack, members = [p], []
        seen.add(p)
        while stack:
            a, b = stack.pop()
            members.append((a, b))
            for da in (-1, 0, 1):
                for db in (-1, 0, 1):
                    nb = (a + da, b + db)
                    if nb in lookup and nb not in seen:
                        seen.add(nb)
                        stack.append(nb)
        out.append(np.array(members))
    return out


def _overlap_point(sa, sb, pa, cl, d, eps, exclude, probes=7):
    """A shared point if the traces stay within eps along the whole cluster, else None."""
    best = {}
    for (i, j), dist in zip(cl, d):
        if i not in best or dist < best[i][1]:
            best[i] = (j, dist)
    idx = sorted(best)
    picks = [idx[k] for k in np.linspace(0, len(idx) - 1, probes).round().astype(int)]
    found = None
    for i in picks:
        j = best[i][0]
        lo, hi = sb.t[max(j - 2, 0)], sb.t[min(j + 2, sb.t.size - 1)]
        r = minimize_scalar(lambda s: float(torus_distance(pa[i], sb.position(s)[0])), bounds=(lo, hi),
                            method="bounded", options={"xatol": 1e-13})
        if r.fun > eps:
            return None
        if found is None and all(torus_distance(pa[i], e) > 10 * eps for e in exclude):
            found = (float(sa.t[i]), float(r.x), pa[i], float(r.fun))
    return found


def pair_intersections(sa, sb, eps=EPS_INT, exclude=()):
    """Refined points where two segments meet within eps.

    Returns (points, overlap) where points are (t, s, point, dist) and overlap is
    True if the traces run together over a stretch (infinitely many shared points).
    Meetings within ``10 * eps`` of a point in ``exclude`` are dropped.
    """
    pa, pb = normalize(sa.q), normalize(sb.q)
    chord = max(float(np.max(np.linalg.norm(np.diff(sa.q, axis=0), axis=1))),
                float(np.max(np.linalg.norm(np.diff(sb.q, axis=0), axis=1))))
    tree = cKDTree(pb, boxsize=1.0)
    hits = tree.query_ball_point(pa, eps + chord)
    pairs = [(i, j) for i, js in enumerate(hits) for j in js]
    points, overlap = [], False
    for cl in _clusters(pairs):
        d = torus_distance(pa[cl[:, 0]], pb[cl[:, 1]])
        if np.unique(cl[:, 0]).size >= 8:
            hit = _overlap_point(sa, sb, pa, cl, d, eps, exclude)
            if hit is not None:
                overlap = True
                points.append(hit)
                continue
        i, j = cl[int(np.argmin(d))]

        def f(z):
            return float(torus_distance(sa.position(z[0])[0], sb.position(z[1])[0]) ** 2)

        bnds = [(sa.t[max(i - 2, 0)], sa.t[min(i + 2, sa.t.size - 1)]),
                (sb.t[max(j - 2, 0)], sb.t[min(j + 2, sb.t.size - 1)])]
        r = minimize(f, [sa.t[i], sb.t[j]], method="L-BFGS-B", bounds=bnds,
                     options={"ftol": 1e-30, "gtol": 1e-16, "maxiter": 200})
        dist = math.sqrt(max(r.fun, 0.0))
        if dist > eps:
            continue
        q = normalize(sa.position(r.x[0])[0])
        if any(torus_distance(q, e) <= 10 * eps for e in exclude):
            continue
        points.append((float(r.x[0]), float(r.x[1]), q, dist))
    return points, overlap


# --------------------------------------------------------------------------
# S-conditions


def g_sine(g, q, a, b):
    """|det[a, b]| in a g-orthonormal frame at q for g-unit a, b (the g-sine of the angle)."""
    G = g.eval(np.asarray(q, float))
    a = np.asarray(a, float) / math.sqrt(a @ G @ a)
    b = np.asarray(b, float) / math.sqrt(b @ G @ b)
    return abs(a[0] * b[1] - a[1] * b[0]) * math.sqrt(np.linalg.det(G))


@dataclass
class SConditionReport:
    verdicts: dict
    margins: dict
    witnesses: dict
    intersections: list = field(default_factory=list)
    conjugacy: list = field(default_factory=list)

    def passes(self, conditions=("i", "ii", "iii", "iv")):
        return all(self.verdicts.get(c) is True for c in conditions)

    def first_failure(self, conditions=("i", "ii", "iii", "iv")):
        for c in conditions:
            if self.verdicts.get(c) is not True:
                return c
        return None

    def to_dict(self):
        return {
            "verdicts": self.verdicts,
            "margins": self.margins,
            "witnesses": self.witnesses,
            "intersections": [
                {"a": a, "b": b, "t": t, "s": s, "point": [float(c) for c in p]}
                for a, b, t, s, p in self.intersections
            ],
        }


def _check_endpoints(x, y, family):
    for k, seg in enumerate(family):
        if torus_distance(seg.start, x) > TAU_HIT or torus_distance(seg.end, y) > TAU_HIT:
            raise ValueError(f"member {k} does not run from x to y (endpoint error "
                             f"{torus_distance(seg.end, y):.2e})")


def condition_i(g, x, y, family, tau_li=TAU_LI):
    same = torus_distance(x, y) <= 1e-12
    if same:
        lists = [[("start", k, s.start_velocity) for k, s in enumerate(family)]
                 + [("end", k, s.end_velocity) for k, s in enumerate(family)]]
        bases = [x]
    else:
        lists = [[("start", k, s.start_velocity) for k, s in enumerate(family)],
                 [("end", k, s.end_velocity) for k, s in enumerate(family)]]
        bases = [x, y]
    margin, witness = math.inf, None
    for base, vecs in zip(bases, lists):
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                s = g_sine(g, base, vecs[i][2], vecs[j][2])
                if s < margin:
                    margin = s
                    witness = {"at": "x" if base is x else "y", "a": vecs[i][:2], "b": vecs[j][:2], "sine": s}
    ok = margin >= tau_li
    return ok, margin, (None if ok else witness)


def condition_ii(x, y, family, eps_avoid=EPS_AVOID):
    margin, witness = math.inf, None
    for k, seg in enumerate(family):
        for name, p in (("x", x), ("y", y)):
            d, t = min_interior_distance(seg, p)
            if d < margin:
                margin, witness = d, {"geodesic": k, "point": name, "t": t, "distance": d}
    ok = margin > eps_avoid
    return ok, margin, (None if ok else witness)


def condition_iii(x, y, family, eps_int=EPS_INT):
    inter = []
    for a in range(len(family)):
        for b in range(a + 1, len(family)):
            pts, overlap = pair_intersections(family[a], family[b], eps_int, exclude=(x, y))
            if overlap:
                return False, 0.0, {"overlap": [a, b]}, inter
            for t, s, p, _ in pts:
                inter.append((a, b, t, s, p))
    margin, witness = math.inf, None
    for a, b, t, s, p in inter:
        for c in range(len(family)):
            if c in (a, b):
                continue
            d, tc = min_interior_distance(family[c], p)
            if d < margin:
                margin = d
                witness = {"geodesics": [a, b, c], "point": [float(v) for v in p], "distance": d}
    ok = margin > eps_int
    return ok, margin, (None if ok else witness), inter


def check_S_conditions(g, x, y, family, conditions=("i", "ii", "iii", "iv"), tau_li=TAU_LI,
                       eps_avoid=EPS_AVOID, eps_int=EPS_INT):
    """Evaluate conditions (i)-(iv) for ``family`` (geodesics from x to y under g)."""
    x = normalize(np.asarray(x, float))
    y = normalize(np.asarray(y, float))
    family = list(family)
    _check_endpoints(x, y, family)
    verdicts, margins, witnesses = {}, {}, {}
    inter, conj = [], []
    if "i" in conditions:
        verdicts["i"], margins["i"], witnesses["i"] = condition_i(g, x, y, family, tau_li)
    if "ii" in conditions:
        verdicts["ii"], margins["ii"], witnesses["ii"] = condition_ii(x, y, family, eps_avoid)
    if "iii" in conditions:
        verdicts["iii"], margins["iii"], witnesses["iii"], inter = condition_iii(x, y, family, eps_int)
    if "iv" in conditions:
        worst, wit = math.inf, None
        for k, seg in enumerate(family):
            rep = gf.conjugacy(g, seg, 0.0, seg.length)
            conj.append(rep)
            if rep.margin < worst:
                worst = rep.margin
                wit = None if rep.verdict == "nonconjugate" else {"geodesic": k, "witness_times": rep.witness_times}
        verdicts["iv"] = all(r.verdict == "nonconjugate" for r in conj)
        margins["iv"] = worst
        witnesses["iv"] = wit
    verdicts = {k: bool(v) for k, v in verdicts.items()}
    for k, v in margins.items():
        margins[k] = float(v) if math.isfinite(v) else None
    return SConditionReport(verdicts, margins, witnesses, inter, conj)


# --------------------------------------------------------------------------
# certificates


def _canonical(d):
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def certificate_hash(cert):
    body = {k: v for k, v in cert.items() if k != "hash"}
    return hashlib.sha256(_canonical(body).encode()).hexdigest()


@dataclass
class InsecurityCertificate:
    metric: dict
    metric_id: str
    x: list
    y: list
    m: int
    geodesics: list
    margins: dict
    intersections: list
    hash: str = ""

    def to_dict(self):
        d = {
            "schema": SCHEMA,
            "metric": self.metric,
            "metric_id": self.metric_id,
            "x": list(self.x),
            "y": list(self.y),
            "m": self.m,
            "geodesics": copy.deepcopy(self.geodesics),
            "margins": dict(self.margins),
            "intersections": copy.deepcopy(self.intersections),
        }
        d["hash"] = self.hash or certificate_hash(d)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["metric"], d.get("metric_id", ""), d["x"], d["y"], int(d["m"]), d["geodesics"],
                   d.get("margins", {}), d.get("intersections", []), d.get("hash", ""))

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_certificate(g, x, y, family, report=None):
    n = len(family)
    if n % 2 != 1:
        raise ValueError("an insecurity certificate needs an odd number of geodesics")
    if report is None:
        report = check_S_conditions(g, x, y, family, conditions=("i", "ii", "iii"))
    if not report.passes(("i", "ii", "iii")):
        raise ValueError(f"family fails condition ({report.first_failure(('i', 'ii', 'iii'))})")
    x = normalize(np.asarray(x, float))
    y = normalize(np.asarray(y, float))
    cert = InsecurityCertificate(
        metric=g.to_dict(),
        metric_id=g.metric_id,
        x=[float(c) for c in x],
        y=[float(c) for c in y],
        m=(n - 1) // 2,
        geodesics=[{"theta0": float(s.theta0), "length": float(s.length)} for s in family],
        margins={k: v for k, v in report.margins.items()},
        intersections=report.to_dict()["intersections"],
    )
    cert.hash = certificate_hash(cert.to_dict())
    return cert


@dataclass
class VerificationResult:
    ok: bool
    code: str | None
    reasons: list

    def __bool__(self):
        return self.ok


def reconstruct_family(g, cert, dt=gf.DT_SAMPLE):
    x = np.asarray(cert.x, float)
    return [gf.integrate_from_angle(g, x, e["theta0"], e["length"], dt=dt, check_unit=False)
            for e in cert.geodesics]


def verify_certificate(cert, metric=None, check_residual=True, jobs=1):
    """Re-derive every claim of ``cert``; returns a VerificationResult."""
    if isinstance(cert, dict):
        cert = InsecurityCertificate.from_dict(cert)
    d = cert.to_dict()
    reasons = []
    if cert.hash != certificate_hash(d):
        return VerificationResult(False, "hash", ["certificate hash does not match its contents"])
    g = metric_from_dict(cert.metric)
    if metric_hash(cert.metric) != cert.metric_id:
        raise StaleMetric("stored metric does not hash to the recorded metric id")
    if metric is not None and metric.metric_id != cert.metric_id:
        raise StaleMetric(f"certificate names metric {cert.metric_id[:12]}, got {metric.metric_id[:12]}")
    n = len(cert.geodesics)
    if n != 2 * cert.m + 1:
        return VerificationResult(False, "size", [f"family has {n} geodesics, need 2m+1 = {2 * cert.m + 1}"])
    reasons.append(f"family size {n} = 2*{cert.m}+1")
    x = normalize(np.asarray(cert.x, float))
    y = normalize(np.asarray(cert.y, float))
    family = reconstruct_family(g, cert)
    for k, s in enumerate(family):
        err = float(torus_distance(s.end, y))
        if err > TAU_HIT:
            return VerificationResult(False, "endpoint", reasons + [f"geodesic {k} misses y by {err:.3e}"])
    reasons.append("every geodesic re-integrates from x to y")
    if check_residual:
        def residual(e):
            seg = gf.integrate_from_angle(g, x, e["theta0"], e["length"], dt=gf.DT_FINE, check_unit=False)
            return gf.residual_fine(g, seg)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as ex:
                res = list(ex.map(residual, cert.geodesics))
        else:
            res = [residual(e) for e in cert.geodesics]
        for k, r in enumerate(res):
            if r > TAU_RES:
                return VerificationResult(False, "residual", reasons + [f"geodesic {k} residual {r:.3e}"])
        reasons.append(f"geodesic residuals <= {TAU_RES}")
    for a in range(n):
        for b in range(a + 1, n):
            if same_geodesic(family[a], family[b], TAU_DUP):
                return VerificationResult(False, "duplicate", reasons + [f"geodesics {a} and {b} coincide"])
    rep = check_S_conditions(g, x, y, family, conditions=("i", "ii", "iii"))
    for c in ("i", "ii", "iii"):
        if not rep.verdicts[c]:
            return VerificationResult(False, c, reasons + [f"condition ({c}) fails: {rep.witnesses[c]}"])
        reasons.append(f"condition ({c}) holds, margin {rep.margins[c]}")
    reasons.append(f"any {cert.m}-point set misses one of these {n} geodesics: a blocking set would put three "
                   "of them through one point")
    return VerificationResult(True, None, reasons)


__all__ = [
    "BlockingQuery",
    "BlockingVerdict",
    "InsecurityCertificate",
    "SConditionReport",
    "VerificationResult",
    "build_certificate",
    "check_S_conditions",
    "is_blocking_set",
    "midpoint_classes",
    "pair_intersections",
    "verify_certificate",
]
