import math

import numpy as np
import pytest

from geoblock import fermi, surgery
from geoblock import geodesicflow as gf
from geoblock.blocking import min_interior_distance
from geoblock.metricfield import FlatMetric, grid_points, metric_distance, torus_distance, validate_metric

E1, E2 = np.array([0.0, 1.0]), np.array([1.0, 0.0])
FOCUS_X = np.array([0.82, 0.5])


def rot(a):
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def flat_fan(apex, T=0.3, a=0.1, b=0.3):
    return fermi.FlatFermiPatch(apex, E1, E2, T, a, b)


def unchanged_outside(g0, g1, U, n=128):
    c, r = U
    q = grid_points(n).reshape(-1, 2)
    out = q[torus_distance(q, c) >= r]
    return np.array_equal(g0.eval(out), g1.eval(out))


# bump profiles -------------------------------------------------------------


def test_h_profile_plateaus():
    h = surgery.build_bump("h", 0.05)
    assert h(-0.05) == 0.0 and h(-1.0) == 0.0
    assert h(0.05) == 1.0 and h(2.0) == 1.0
    assert h(0.0) == pytest.approx(0.5, abs=1e-15)
    t = np.linspace(-0.05, 0.05, 1001)
    assert np.all(np.diff(h(t)) >= 0)


def test_H_profile_plateaus():
    H = surgery.build_bump("H", ((0.1, 0.2), (0.2, 0.3)))
    assert H(np.array([0.05, -0.15])) == 1.0
    assert H(np.array([0.25, 0.0])) == 0.0 and H(np.array([0.0, 0.31])) == 0.0


def test_profile_derivative_matches_difference():
    h = surgery.build_bump("h", 0.05)
    t = np.linspace(-0.049, 0.049, 41)
    _, dh = h.eval(t)
    fd = (h(t + 1e-7) - h(t - 1e-7)) / 2e-7
    assert np.max(np.abs(dh - fd)) <= 1e-5 * np.max(np.abs(dh))


def test_sequences_strictly_decrease():
    a, b = surgery.sequences(0.1, 0.3)
    assert np.all(np.diff(a) < 0) and np.all(np.diff(b) < 0)
    assert (a[0], a[3], a[5]) == (0.1, 0.05, 0.025)
    assert (b[0], b[1], b[5]) == (0.3, 0.15, 0.075)


# Fermi patches --------------------------------------------------------------


def test_flat_fermi_closed_form(flat):
    seg = gf.integrate_geodesic(flat, (0.1, 0.2), (1, 0), 1.0)
    fp = fermi.build_fermi_patch(flat, seg, 0.5, 0.3, 0.1, 0.3)
    t = np.linspace(-0.1, 0.1, 5)
    assert np.max(np.abs(fp.center_curve(t) - seg.position(0.5 + t))) <= 1e-7
    tp = fp.grid()
    assert np.max(np.abs(fp.inv(fp.f(tp) % 1) - tp)) <= 1e-10
    # polar fan: det Df = (t + T) / sqrt(1 - p^2)
    np.testing.assert_allclose(np.abs(np.linalg.det(fp.jac(tp))), (tp[:, 0] + 0.3) / np.sqrt(1 - tp[:, 1] ** 2),
                               rtol=1e-12)


def test_curved_fermi_center_line_and_gauss_lemma(focusing):
    x = (0.82, 0.5)
    seg = gf.integrate_geodesic(focusing, x, gf.unit_vector(focusing, x, (-1, 0)), 1.0)
    fp = fermi.build_fermi_patch(focusing, seg, 0.9, 0.9, 0.03, 0.05)
    t = np.linspace(-0.03, 0.03, 7)
    assert np.max(np.abs(fp.center_curve(t) - seg.position(0.9 + t))) <= 1e-7
    tp = fp.grid(n=5)
    J = fp.jac(tp)
    G = focusing.eval(fp.f(tp))
    assert np.max(np.abs(np.einsum("ni,nij,nj->n", J[:, :, 0], G, J[:, :, 1]))) <= 1e-6
    assert fp.validate(focusing)


# merge_foliations -----------------------------------------------------------


def test_merge_conclusions(merged):
    c = merged.conclusions()
    assert c["match_before"] <= 1e-6 and c["match_after"] <= 1e-6
    assert c["residual"] <= 1e-6


def test_merge_support_inside_declared_disc(flat, merged):
    c, r = merged.patch.support_disc()
    assert unchanged_outside(flat, merged.metric, (c, r))
    rep = validate_metric(merged.metric)
    assert rep["spd"] and rep["periodic"]


def test_merge_identity(flat):
    r = surgery.merge_foliations(flat, flat_fan((0.2, 0.3)), flat_fan((0.2, 0.3)))
    q = grid_points(128)
    assert np.max(np.abs(r.metric.eval(q) - flat.eval(q))) <= 1e-12
    t, seg = r.integrated_curve(0.05)
    tp = np.column_stack([t, np.full(t.size, 0.05)])
    assert np.max(np.abs(seg.q - r.patch.f1.f(tp))) <= 1e-9


def test_merge_swapped_arguments(flat):
    fa, fb = flat_fan((0.2, 0.3)), flat_fan((0.2, 0.301))
    r = surgery.merge_foliations(flat, fb, fa)
    c = r.conclusions()
    assert max(c["match_before"], c["match_after"], c["residual"]) <= 1e-6
    t, seg = r.integrated_curve(0.0)
    tp = np.column_stack([t, np.zeros(t.size)])
    first, last = t < -r.patch.a / 4, t > r.patch.a / 4
    assert np.max(np.abs(seg.q[first] - fb.f(tp[first]))) <= 1e-6
    assert np.max(np.abs(seg.q[last] - fa.f(tp[last]))) <= 1e-6


def test_merge_coincident_center_lines(flat):
    r = surgery.merge_foliations(flat, flat_fan((0.2, 0.3)), flat_fan((0.19, 0.3), T=0.31))
    t, seg = r.integrated_curve(0.0)
    tp = np.column_stack([t, np.zeros(t.size)])
    assert np.max(np.abs(seg.q - r.patch.f1.f(tp))) <= 1e-9
    assert r.conclusions(ps=[0.0])["residual"] <= 1e-6


def test_c0_shrinks_with_offset(flat):
    c0 = []
    for off in (1e-2, 1e-3, 1e-4):
        r = surgery.merge_foliations(flat, flat_fan((0.2, 0.3), T=0.8), flat_fan((0.2, 0.3 + off), T=0.8))
        c0.append(metric_distance(flat, r.metric).c0)
    assert c0[0] > c0[1] > c0[2] > 0


def test_far_foliations_rejected(flat):
    from geoblock.errors import ContainmentFailure

    with pytest.raises(ContainmentFailure):
        surgery.merge_foliations(flat, flat_fan((0.2, 0.3)), flat_fan((0.2, 0.35)))


# merge_geodesics --------------------------------------------------------------


def test_merge_geodesics_flat(flat):
    s1 = gf.integrate_geodesic(flat, (0.1, 0.3), (1, 0), 0.8)
    s2 = gf.integrate_geodesic(flat, (0.1, 0.301), (1, 0), 0.8)
    U = (np.array([0.5, 0.3]), 0.15)
    g2, m = surgery.merge_geodesics(flat, s1, s2, U, 0.4)
    assert gf.residual_fine(g2, m) <= 1e-6
    assert np.max(np.abs(m.q[m.t < 0.25] - s1.q[m.t < 0.25])) <= 1e-6
    assert np.max(np.abs(m.q[m.t > 0.55] - s2.q[m.t > 0.55])) <= 1e-6
    assert unchanged_outside(flat, g2, U)


def test_merge_geodesics_same_curve(flat):
    s1 = gf.integrate_geodesic(flat, (0.1, 0.3), (1, 0), 0.8)
    g2, m = surgery.merge_geodesics(flat, s1, s1, (np.array([0.5, 0.3]), 0.15), 0.4)
    assert g2 is flat and m is s1


# destroy_conjugacy ----------------------------------------------------------


@pytest.fixture(scope="module")
def conjugate_diameter(focusing):
    v = gf.unit_vector(focusing, FOCUS_X, (-1, 0))
    L = gf.conjugate_times(focusing, FOCUS_X, v, 1.5)[0]
    seg = gf.integrate_geodesic(focusing, FOCUS_X, v, L)
    i = int(np.argmin(np.abs(seg.q[:, 0] - 0.1)))
    return seg, float(seg.t[i]), (seg.q[i] % 1, 0.08)


def test_destroy_conjugacy_flat_is_noop(flat):
    seg = gf.integrate_geodesic(flat, (0.1, 0.1), (1, 0), 0.8)
    assert surgery.destroy_conjugacy(flat, seg, [0, 0.8], 0.4, ((0.5, 0.1), 0.05)) is flat


def test_destroy_conjugacy_focusing(focusing, conjugate_diameter):
    seg, s0, U0 = conjugate_diameter
    L = seg.length
    assert gf.conjugacy(focusing, seg, 0, L, raise_inconclusive=False).margin < 1e-6
    g2 = surgery.destroy_conjugacy(focusing, seg, [0, L], s0, U0)
    rep = gf.conjugacy(g2, seg, 0, L)
    assert rep.verdict == "nonconjugate" and rep.margin >= 1e-6
    assert gf.residual_fine(g2, seg) <= 1e-6
    again = gf.integrate_geodesic(g2, seg.q[0], seg.v[0], L)
    assert np.max(np.abs(again.q - seg.q)) <= 1e-6
    assert unchanged_outside(focusing, g2, U0)


def test_destroy_conjugacy_keeps_earlier_pairs(focusing, conjugate_diameter):
    seg, s0, U0 = conjugate_diameter
    L = seg.length
    mid = (s0 + L) / 2
    before = gf.conjugacy(focusing, seg, 0.0, mid, raise_inconclusive=False)
    assert before.verdict == "nonconjugate"
    g2 = surgery.destroy_conjugacy(focusing, seg, [0.0, mid, L], s0, U0)
    for ta, tb in ((0.0, mid), (0.0, L)):
        assert gf.conjugacy(g2, seg, ta, tb).margin >= 1e-6


def test_destroy_conjugacy_rejects_s0_on_mark(focusing, conjugate_diameter):
    seg, s0, U0 = conjugate_diameter
    with pytest.raises(ValueError):
        surgery.destroy_conjugacy(focusing, seg, [0, s0, seg.length], s0, U0)


# avoid_points ---------------------------------------------------------------


def test_lasso_at_x(flat):
    seg = gf.integrate_geodesic(flat, (0, 0), (1, 0), 1.0)
    U0 = ((0.5, 0.0), 0.1)
    w1, w2 = rot(1e-3) @ [1, 0], rot(-1e-3) @ [1, 0]
    g2, lasso = surgery.avoid_points(flat, seg, [(0, 0)], 0.5, U0, w1, w2)
    assert torus_distance(lasso.start, (0, 0)) <= 1e-12
    assert torus_distance(lasso.end, (0, 0)) <= 1e-7
    assert np.allclose(lasso.start_velocity, w1, atol=1e-12)
    assert np.allclose(lasso.end_velocity, w2, atol=1e-7)
    assert min_interior_distance(lasso, (0, 0))[0] > 1e-5
    assert gf.residual_fine(g2, lasso) <= 1e-6
    assert unchanged_outside(flat, g2, U0)


def test_avoid_endpoints_with_new_tangents(flat):
    d = np.array([0.5, 0.5])
    seg = gf.integrate_geodesic(flat, (0, 0), d / np.linalg.norm(d), np.linalg.norm(d))
    U0 = ((0.25, 0.25), 0.1)
    v = seg.v[0]
    g2, new = surgery.avoid_points(flat, seg, [(0, 0), (0.5, 0.5)], seg.length / 2, U0, rot(1e-3) @ v, rot(-1e-3) @ v)
    assert torus_distance(new.end, (0.5, 0.5)) <= 1e-7
    assert new.meta["d_Z"] > 0
    assert not np.allclose(new.start_velocity, v, atol=1e-6)
    assert gf.conjugacy(g2, new, 0, new.length).verdict == "nonconjugate"
    assert unchanged_outside(flat, g2, U0)


def test_avoid_rejects_unchanged_tangents(flat):
    seg = gf.integrate_geodesic(flat, (0, 0), (1, 0), 1.0)
    with pytest.raises(ValueError):
        surgery.avoid_points(flat, seg, [(0, 0)], 0.5, ((0.5, 0.0), 0.1), (1, 0), rot(1e-3) @ [1, 0])
