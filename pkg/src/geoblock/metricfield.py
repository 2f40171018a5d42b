"""Smooth Riemannian metrics on the unit torus R^2/Z^2.

Every metric evaluates on arrays of chart points of shape ``(..., 2)`` and
returns symmetric matrices of shape ``(..., 2, 2)``.  Points may be given in
any lift; evaluators are periodic.

Derivative arrays use the index order ``dg[..., m, i, j] = d_m g_ij`` and
``d2g[..., m, n, i, j] = d_m d_n g_ij``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DifferentiationFailure, NonSPD, OverlapPolicyViolation

TAU_SPD = 1e-10
TAU_PER = 1e-9
H_FD = 1e-4
H_FD2 = 1e-3
H_FD_PATCH = 5e-4  # first-derivative step per unit of patch scale
H_FD2_PATCH = 1e-2  # second-derivative step per unit of patch scale


# --------------------------------------------------------------------------
# chart points


def normalize(q):
    """Canonical representative in [0, 1)^2."""
    r = np.mod(np.asarray(q, dtype=float), 1.0)
    return np.where(r >= 1.0, 0.0, r)


def wrap_delta(d):
    """Shortest lattice-equivalent displacement (componentwise in [-1/2, 1/2])."""
    d = np.asarray(d, dtype=float)
    return d - np.round(d)


def torus_distance(a, b):
    """Euclidean chart distance on R^2/Z^2 (minimum over lattice lifts)."""
    return np.linalg.norm(wrap_delta(np.asarray(b) - np.asarray(a)), axis=-1)


def parse_point(text):
    vals = [float(s) for s in str(text).replace(" ", "").split(",")]
    if len(vals) != 2:
        raise ValueError(f"expected two comma-separated coordinates, got {text!r}")
    return np.array(vals)


def circular_extent(vals):
    """Smallest arc of the unit circle containing all ``vals`` as (lo, hi), hi may exceed 1."""
    v = np.sort(normalize(np.asarray(vals, dtype=float)))
    if v.size == 0:
        return None
    gaps = np.diff(np.concatenate([v, [v[0] + 1.0]]))
    k = int(np.argmax(gaps))
    lo = v[(k + 1) % v.size]
    hi = v[k] if k + 1 < v.size else v[k]
    if hi < lo:
        hi += 1.0
    return float(lo), float(hi)


# --------------------------------------------------------------------------
# tensor algebra shared by every metric


def christoffel_from(g, dg):
    """Gamma[..., k, i, j] from g and its first derivatives."""
    ginv = np.linalg.inv(g)
    # lower[..., l, i, j] = d_i g_lj + d_j g_li - d_l g_ij
    lower = np.swapaxes(dg, -3, -2) + np.moveaxis(dg, -3, -1) - dg
    return 0.5 * np.einsum("...kl,...lij->...kij", ginv, lower)


def christoffel_derivative(g, dg, d2g):
    """dGamma[..., m, k, i, j] = d_m Gamma^k_ij."""
    ginv = np.linalg.inv(g)
    lower = np.swapaxes(dg, -3, -2) + np.moveaxis(dg, -3, -1) - dg
    d_lower = (
        np.swapaxes(d2g, -3, -2)
        + np.moveaxis(d2g, -3, -1)
        - d2g
    )
    d_ginv = -np.einsum("...ka,...mab,...bl->...mkl", ginv, dg, ginv)
    return 0.5 * (
        np.einsum("...mkl,...lij->...mkij", d_ginv, lower)
        + np.einsum("...kl,...mlij->...mkij", ginv, d_lower)
    )


def _check_spd(g, where="metric"):
    ev = np.linalg.eigvalsh(g)
    bad = ev[..., 0] <= TAU_SPD
    if np.any(bad):
        raise NonSPD(f"{where}: eigenvalue {float(ev[..., 0].min()):.3e} <= {TAU_SPD}")


# --------------------------------------------------------------------------
# metric classes


class MetricField:
    """Base class; subclasses implement :meth:`_eval` and optionally :meth:`derivs`."""

    kind = "abstract"

    def eval(self, q, check=False):
        q = np.asarray(q, dtype=float)
        g = self._eval(q)
        if check:
            _check_spd(g, self.kind)
        return g

    __call__ = eval

    def _eval(self, q):
        raise NotImplementedError

    def derivs(self, q, order=1):
        """Return ``(g, dg)`` or ``(g, dg, d2g)`` by central differences."""
        return fd_derivs(self._eval, q, order)

    def christoffel(self, q):
        g, dg = self.derivs(q, 1)[:2]
        return christoffel_from(g, dg)

    def accel(self, q, v, jac=False):
        """Geodesic acceleration ``-Gamma(v, v)``; with ``jac`` also d/dq and d/dv."""
        if not jac:
            gam = self.christoffel(q)
            return -np.einsum("...kij,...i,...j->...k", gam, v, v)
        g, dg, d2g = self.derivs(q, 2)
        gam = christoffel_from(g, dg)
        dgam = christoffel_derivative(g, dg, d2g)
        a = -np.einsum("...kij,...i,...j->...k", gam, v, v)
        a_q = -np.einsum("...mkij,...i,...j->...km", dgam, v, v)
        a_v = -2.0 * np.einsum("...kmj,...j->...km", gam, v)
        return a, a_q, a_v

    def norm2(self, q, v):
        g = self._eval(np.asarray(q, dtype=float))
        return np.einsum("...i,...ij,...j->...", v, g, v)

    @property
    def is_flat(self):
        return False

    @property
    def patches(self):
        return ()

    def to_dict(self):
        raise NotImplementedError

    @property
    def metric_id(self):
        return metric_hash(self.to_dict())


def fd_derivs(fn, q, order=1, h=H_FD, h2=H_FD2, accuracy=2):
    """Central differences of a matrix field; ``accuracy`` is 2 or 4 (pure second derivatives too).

    All stencil points go through ``fn`` in one batched call.
    """
    q = np.asarray(q, dtype=float)
    e = np.eye(2)
    offs = [np.zeros(2)]
    for m in range(2):
        offs += [h * e[m], -h * e[m]]
        if accuracy == 4:
            offs += [2 * h * e[m], -2 * h * e[m]]
    if order > 1:
        for m in range(2):
            offs += [h2 * e[m], -h2 * e[m]]
            if accuracy == 4:
                offs += [2 * h2 * e[m], -2 * h2 * e[m]]
        offs += [h2 * (e[0] + e[1]), h2 * (e[0] - e[1]), -h2 * (e[0] - e[1]), -h2 * (e[0] + e[1])]
    offs = np.array(offs)
    pts = q[None, ...] + offs.reshape((len(offs),) + (1,) * (q.ndim - 1) + (2,))
    vals = fn(pts.reshape(-1, 2)).reshape((len(offs),) + q.shape[:-1] + (2, 2))
    it = iter(vals)
    g = next(it)
    dg = np.empty(q.shape[:-1] + (2, 2, 2))
    for m in range(2):
        fp, fm = next(it), next(it)
        if accuracy == 4:
            fp2, fm2 = next(it), next(it)
            dg[..., m, :, :] = (8 * (fp - fm) - (fp2 - fm2)) / (12 * h)
        else:
            dg[..., m, :, :] = (fp - fm) / (2 * h)
    if order == 1:
        return g, dg
    d2g = np.empty(q.shape[:-1] + (2, 2, 2, 2))
    for m in range(2):
        s1 = next(it) + next(it)
        if accuracy == 4:
            s2 = next(it) + next(it)
            d2g[..., m, m, :, :] = (16 * s1 - s2 - 30 * g) / (12 * h2**2)
        else:
            d2g[..., m, m, :, :] = (s1 - 2 * g) / h2**2
    c1, c2, c3, c4 = next(it), next(it), next(it), next(it)
    cross = (c1 - c2 - c3 + c4) / (4 * h2**2)
    d2g[..., 0, 1, :, :] = cross
    d2g[..., 1, 0, :, :] = cross
    return g, dg, d2g


def _psi(s):
    """exp(1 - 1/(1-s)) on s < 1, zero beyond; psi(0) = 1.  Returns (psi, psi', psi'')."""
    inside = s < 1.0
    u = np.where(inside, 1.0 - s, 1.0)
    p = np.where(inside, np.exp(1.0 - 1.0 / u), 0.0)
    d1 = -p / u**2
    d2 = p * (1.0 / u**4 - 2.0 / u**3)
    return p, np.where(inside, d1, 0.0), np.where(inside, d2, 0.0)


@dataclass(frozen=True)
class Bump:
    center: tuple
    amplitude: float
    radius: float

    def __post_init__(self):
        if not 0.0 < self.radius <= 0.45:
            raise ValueError("bump radius must lie in (0, 0.45] to stay smooth on the torus")

    def log_factor(self, q, order=0):
        """lambda(q) = amplitude * psi(|q - c|^2 / r^2) and derivatives."""
        d = wrap_delta(q - np.asarray(self.center, dtype=float))
        r2 = self.radius**2
        s = np.sum(d * d, axis=-1) / r2
        p, p1, p2 = _psi(s)
        lam = self.amplitude * p
        if order == 0:
            return lam
        ds = 2.0 * d / r2
        grad = self.amplitude * p1[..., None] * ds
        if order == 1:
            return lam, grad
        hess = self.amplitude * (
            p2[..., None, None] * ds[..., :, None] * ds[..., None, :]
            + p1[..., None, None] * (2.0 / r2) * np.eye(2)
        )
        return lam, grad, hess

    def to_dict(self):
        return {
            "center": [float(c) for c in self.center],
            "amplitude": float(self.amplitude),
            "radius": float(self.radius),
        }


def _bumps_log_factor(bumps, q, order):
    shape = q.shape[:-1]
    lam = np.zeros(shape)
    grad = np.zeros(shape + (2,))
    hess = np.zeros(shape + (2, 2))
    for b in bumps:
        if order == 0:
            lam = lam + b.log_factor(q)
            continue
        out = b.log_factor(q, order)
        lam = lam + out[0]
        grad = grad + out[1]
        if order == 2:
            hess = hess + out[2]
    return lam, grad, hess


class ConformalBumpMetric(MetricField):
    """g = exp(2 lambda) * identity with lambda a sum of compactly supported bumps."""

    kind = "conformal-bump"

    def __init__(self, bumps=()):
        self.bumps = tuple(b if isinstance(b, Bump) else Bump(**b) for b in bumps)

    @property
    def is_flat(self):
        return all(b.amplitude == 0.0 for b in self.bumps)

    def _eval(self, q):
        lam = _bumps_log_factor(self.bumps, q, 0)[0]
        return np.exp(2.0 * lam)[..., None, None] * np.eye(2)

    def log_factor(self, q, order=0):
        return _bumps_log_factor(self.bumps, np.asarray(q, dtype=float), order)

    def derivs(self, q, order=1):
        q = np.asarray(q, dtype=float)
        lam, grad, hess = _bumps_log_factor(self.bumps, q, order)
        e2 = np.exp(2.0 * lam)
        eye = np.eye(2)
        g = e2[..., None, None] * eye
        dg = (2.0 * grad * e2[..., None])[..., :, None, None] * eye
        if order == 1:
            return g, dg
        coef = (4.0 * grad[..., :, None] * grad[..., None, :] + 2.0 * hess) * e2[..., None, None]
        d2g = coef[..., :, :, None, None] * eye
        return g, dg, d2g

    def christoffel(self, q):
        q = np.asarray(q, dtype=float)
        _, grad, _ = _bumps_log_factor(self.bumps, q, 1)
        eye = np.eye(2)
        # Gamma^k_ij = d_kj l_i + d_ki l_j - d_ij l_k
        return (
            eye[:, None, :] * grad[..., None, :, None]
            + eye[:, :, None] * grad[..., None, None, :]
            - eye[None, :, :] * grad[..., :, None, None]
        )

    def accel(self, q, v, jac=False):
        q = np.asarray(q, dtype=float)
        v = np.asarray(v, dtype=float)
        _, grad, hess = _bumps_log_factor(self.bumps, q, 2 if jac else 1)
        gv = np.sum(grad * v, axis=-1)
        vv = np.sum(v * v, axis=-1)
        a = -2.0 * gv[..., None] * v + vv[..., None] * grad
        if not jac:
            return a
        hv = np.einsum("...ij,...j->...i", hess, v)
        a_q = -2.0 * v[..., :, None] * hv[..., None, :] + vv[..., None, None] * hess
        a_v = (
            -2.0 * gv[..., None, None] * np.eye(2)
            - 2.0 * v[..., :, None] * grad[..., None, :]
            + 2.0 * grad[..., :, None] * v[..., None, :]
        )
        return a, a_q, a_v

    def to_dict(self):
        if self.is_flat and not self.bumps:
            return {"kind": "flat"}
        return {"kind": "conformal-bump", "bumps": [b.to_dict() for b in self.bumps]}


class FlatMetric(ConformalBumpMetric):
    kind = "flat"

    def __init__(self):
        super().__init__(())


class ConformalScaledMetric(MetricField):
    """exp(2 mu) * inner, with mu a sum of bumps; used for stability probes."""

    kind = "conformal-scaled"

    def __init__(self, inner, bumps):
        self.inner = inner
        self.bumps = tuple(b if isinstance(b, Bump) else Bump(**b) for b in bumps)

    @property
    def patches(self):
        return self.inner.patches

    def _eval(self, q):
        mu = _bumps_log_factor(self.bumps, q, 0)[0]
        return np.exp(2.0 * mu)[..., None, None] * self.inner._eval(q)

    def derivs(self, q, order=1):
        q = np.asarray(q, dtype=float)
        inner = self.inner.derivs(q, order)
        mu, grad, hess = _bumps_log_factor(self.bumps, q, order)
        e2 = np.exp(2.0 * mu)
        g0, dg0 = inner[0], inner[1]
        g = e2[..., None, None] * g0
        dg = e2[..., None, None, None] * (2.0 * grad[..., :, None, None] * g0[..., None, :, :] + dg0)
        if order == 1:
            return g, dg
        d2g0 = inner[2]
        gg = 4.0 * grad[..., :, None] * grad[..., None, :] + 2.0 * hess
        d2g = e2[..., None, None, None, None] * (
            gg[..., :, :, None, None] * g0[..., None, None, :, :]
            + 2.0 * grad[..., :, None, None, None] * dg0[..., None, :, :, :]
            + 2.0 * grad[..., None, :, None, None] * dg0[..., :, None, :, :]
            + d2g0
        )
        return g, dg, d2g

    def to_dict(self):
        return {
            "kind": "conformal-scaled",
            "inner": self.inner.to_dict(),
            "bumps": [b.to_dict() for b in self.bumps],
        }


class CompositeMetric(MetricField):
    """A base metric with an ordered list of compactly supported patches.

    Outside every patch support the value returned is the base evaluation
    itself (the patches leave those rows untouched).
    """

    kind = "composite"

    def __init__(self, base, patches=(), strict=True):
        self.base = base
        self._patches = tuple(patches)
        self.strict = strict

    @property
    def patches(self):
        return self._patches

    def _eval(self, q):
        g = self.base._eval(q)
        for p in self._patches:
            g = p.apply(q, g)
        return g

    def _delta(self, q):
        return self._eval(q) - self.base._eval(q)

    def fd_scale(self):
        """Smallest length scale over the patches (sets the difference steps)."""
        return min((getattr(p, "fd_scale", 0.1) for p in self._patches), default=0.1)

    def _near_patches(self, q, margin):
        mask = np.zeros(q.shape[:-1], dtype=bool)
        for p in self._patches:
            mask |= p.near(q, margin)
        return mask

    def derivs(self, q, order=1):
        q = np.asarray(q, dtype=float)
        out = [np.array(a, copy=True) for a in self.base.derivs(q, order)]
        mask = self._near_patches(q, 4 * H_FD2)
        if np.any(mask):
            scale = self.fd_scale()
            sub = fd_derivs(self._delta, q[mask], order, h=H_FD_PATCH * scale, h2=min(H_FD2, H_FD2_PATCH * scale),
                            accuracy=4)
            for k in range(len(out)):
                out[k][mask] = out[k][mask] + sub[k]
        return tuple(out)

    def check_smooth(self, q, tau_smooth=1e-4):
        """Compare central differences at h and 2h inside patch neighbourhoods."""
        q = np.asarray(q, dtype=float).reshape(-1, 2)
        mask = self._near_patches(q, 4 * H_FD2)
        if not np.any(mask):
            return 0.0
        _, d1 = fd_derivs(self._delta, q[mask], 1, h=H_FD)
        _, d2 = fd_derivs(self._delta, q[mask], 1, h=2 * H_FD)
        err = float(np.max(np.abs(d1 - d2)))
        if err > tau_smooth:
            raise DifferentiationFailure(f"difference quotients disagree by {err:.3e}")
        return err

    def to_dict(self):
        return {
            "kind": "composite",
            "strict": self.strict,
            "base": self.base.to_dict(),
            "patches": [p.to_dict() for p in self._patches],
        }


# --------------------------------------------------------------------------
# generic blend patch


def smoothstep(x):
    """C-infinity step: 0 for x <= 0, 1 for x >= 1, s(1/2) = 1/2."""
    x = np.asarray(x, dtype=float)
    xa = np.clip(x, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        e0 = np.where(xa > 0, np.exp(-1.0 / np.where(xa > 0, xa, 1.0)), 0.0)
        e1 = np.where(xa < 1, np.exp(-1.0 / np.where(xa < 1, 1.0 - xa, 1.0)), 0.0)
        return e0 / (e0 + e1)


class BlendPatch:
    """Radial blend H * replacement + (1 - H) * g on a disc.

    ``H`` is 1 within ``r_in`` of ``center`` and 0 beyond ``r_out``; ``amplitude``
    scales ``H`` (so the perturbation is linear in it).
    """

    type = "blend-disc"

    def __init__(self, center, r_in, r_out, replacement, amplitude=1.0, patch_id="blend"):
        if not 0 <= r_in < r_out <= 0.45:
            raise ValueError("need 0 <= r_in < r_out <= 0.45")
        self.center = np.asarray(center, dtype=float)
        self.r_in = float(r_in)
        self.r_out = float(r_out)
        self.replacement = replacement
        self.amplitude = float(amplitude)
        self.patch_id = patch_id

    def weight(self, q):
        r = torus_distance(q, self.center)
        return self.amplitude * (1.0 - smoothstep((r - self.r_in) / (self.r_out - self.r_in)))

    @property
    def fd_scale(self):
        return self.r_out - self.r_in

    def support_disc(self):
        return self.center, self.r_out

    def near(self, q, margin=0.0):
        return torus_distance(q, self.center) < self.r_out + margin

    def apply(self, q, g):
        H = self.weight(q)
        m = H > 0
        if not np.any(m):
            return g
        out = np.array(g, copy=True)
        Hm = H[m][..., None, None]
        out[m] = Hm * self.replacement._eval(q[m]) + (1.0 - Hm) * g[m]
        return out

    def to_dict(self):
        return {
            "type": self.type,
            "id": self.patch_id,
            "center": self.center.tolist(),
            "r_in": self.r_in,
            "r_out": self.r_out,
            "amplitude": self.amplitude,
            "replacement": self.replacement.to_dict(),
        }

    @classmethod
    def from_dict(cls, d, metric):
        return cls(d["center"], d["r_in"], d["r_out"], metric_from_dict(d["replacement"]),
                   d.get("amplitude", 1.0), d.get("id", "blend"))


# type -> callable(dict, metric_so_far) -> patch
PATCH_TYPES = {"blend-disc": BlendPatch.from_dict}


def _patch_discs_overlap(p1, p2):
    c1, r1 = p1.support_disc()
    c2, r2 = p2.support_disc()
    return float(torus_distance(c1, c2)) < r1 + r2


def compose_with_patch(g, patch, strict=None, validate=True, grid=128):
    """Return a new composite metric with ``patch`` appended.

    In strict mode (the default) a patch whose support disc meets an existing
    patch support raises :class:`OverlapPolicyViolation`.
    """
    if isinstance(g, CompositeMetric):
        base, patches = g.base, g.patches
        strict = g.strict if strict is None else strict
    else:
        base, patches = g, ()
        strict = True if strict is None else strict
    if strict:
        for p in patches:
            if _patch_discs_overlap(p, patch):
                raise OverlapPolicyViolation(f"patch {getattr(patch, 'patch_id', '?')} overlaps an existing patch")
    out = CompositeMetric(base, patches + (patch,), strict=strict)
    if validate:
        c, r = patch.support_disc()
        s = np.linspace(-r, r, max(8, grid // 4))
        pts = c + np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1).reshape(-1, 2)
        _check_spd(out.eval(pts), "composite")
    return out


# --------------------------------------------------------------------------
# distances and validation


@dataclass
class MetricDistanceReport:
    c0: float
    c1: float
    c2: float
    resolution: int
    support_box: tuple | None = None
    support_tol: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "c0": self.c0, "c1": self.c1, "c2": self.c2,
            "resolution": self.resolution,
            "support_box": self.support_box,
            "support_tol": self.support_tol,
        }


def grid_points(n):
    s = np.arange(n) / n
    return np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1)


def metric_distance(g1, g2, grid=128, support_tol=0.0):
    """Sampled C0/C1/C2 sup-distances between two metrics on an n x n grid.

    ``c1`` and ``c2`` are sup-norms of first and second periodic difference
    quotients of ``g1 - g2``.  ``support_box`` bounds the grid points where
    any entry of the difference exceeds ``support_tol`` as
    ``((x_lo, x_hi), (y_lo, y_hi))`` with hi possibly beyond 1 when wrapping.
    """
    pts = grid_points(grid)
    d = g1.eval(pts) - g2.eval(pts)
    h = 1.0 / grid
    c0 = float(np.max(np.abs(d)))
    d1 = [(np.roll(d, -1, axis=a) - d) / h for a in (0, 1)]
    d2 = [(np.roll(d, -1, axis=a) - 2 * d + np.roll(d, 1, axis=a)) / h**2 for a in (0, 1)]
    d2.append((np.roll(d1[0], -1, axis=1) - d1[0]) / h)
    c1 = float(max(np.max(np.abs(x)) for x in d1))
    c2 = float(max(np.max(np.abs(x)) for x in d2))
    marked = np.max(np.abs(d), axis=(-2, -1)) > support_tol
    box = None
    if np.any(marked):
        p = pts[marked]
        box = (circular_extent(p[:, 0]), circular_extent(p[:, 1]))
    return MetricDistanceReport(c0, c1, c2, grid, box, support_tol)


def validate_metric(g, grid=128):
    """SPD minimum eigenvalue and periodicity residual on a grid."""
    pts = grid_points(grid).reshape(-1, 2)
    G = g.eval(pts)
    min_eig = float(np.linalg.eigvalsh(G)[:, 0].min())
    per = 0.0
    for shift in ((1.0, 0.0), (0.0, 1.0), (-1.0, 1.0)):
        per = max(per, float(np.max(np.abs(g.eval(pts + np.array(shift)) - G))))
    return {"min_eigenvalue": min_eig, "spd": min_eig > TAU_SPD,
            "periodicity_residual": per, "resolution": grid,
            "periodic": per <= (1e-12 if not g.patches else TAU_PER)}


def grid_rows(g, grid=32):
    """(q1, q2, g11, g12, g22) rows for CSV export."""
    pts = grid_points(grid).reshape(-1, 2)
    G = g.eval(pts)
    return np.column_stack([pts, G[:, 0, 0], G[:, 0, 1], G[:, 1, 1]])


# --------------------------------------------------------------------------
# serialization


def metric_hash(d):
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def metric_from_dict(d):
    kind = d.get("kind")
    if kind == "flat":
        return FlatMetric()
    if kind == "conformal-bump":
        if "bumps" in d:
            bumps = d["bumps"]
        else:
            bumps = [{k: d[k] for k in ("center", "amplitude", "radius")}]
        return ConformalBumpMetric([Bump(tuple(b["center"]), float(b["amplitude"]), float(b["radius"]))
                                    for b in bumps])
    if kind == "conformal-scaled":
        return ConformalScaledMetric(metric_from_dict(d["inner"]),
                                     [Bump(tuple(b["center"]), b["amplitude"], b["radius"]) for b in d["bumps"]])
    if kind == "composite":
        # importing registers the surgery patch constructors
        from . import surgery  # noqa: F401

        g = CompositeMetric(metric_from_dict(d["base"]), (), strict=d.get("strict", True))
        for pd in d.get("patches", []):
            try:
                ctor = PATCH_TYPES[pd["type"]]
            except KeyError:
                raise ValueError(f"unknown patch type {pd.get('type')!r}") from None
            g = CompositeMetric(g.base, g.patches + (ctor(pd, g),), strict=g.strict)
        return g
    raise ValueError(f"unknown metric kind {kind!r}")


def load_metric(path):
    with open(path) as fh:
        return metric_from_dict(json.load(fh))


def save_metric(g, path):
    with open(path, "w") as fh:
        json.dump(g.to_dict(), fh, indent=2, sort_keys=True)
