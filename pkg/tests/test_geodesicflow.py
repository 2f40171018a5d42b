import math

import numpy as np
import pytest

from geoblock import geodesicflow as gf
from geoblock.errors import Inconclusive

FOCUS_X = np.array([0.82, 0.5])


def fan_zero(g, x, theta, t_max, eps=1e-5, dt=1.0 / 1024):
    """First time the normal separation of two neighbouring rays changes sign."""
    a = gf.integrate_from_angle(g, x, theta + eps, t_max, dt=dt, check_unit=False)
    b = gf.integrate_from_angle(g, x, theta - eps, t_max, dt=dt, check_unit=False)
    c = gf.integrate_from_angle(g, x, theta, t_max, dt=dt, check_unit=False)
    n = np.column_stack([-c.v[:, 1], c.v[:, 0]])
    s = np.einsum("ti,ti->t", a.q - b.q, n)
    s[0] = s[1]  # both rays leave x together
    k = np.nonzero(np.sign(s[1:]) != np.sign(s[:-1]))[0][0] + 1
    return c.t[k - 1] - s[k - 1] * (c.t[k] - c.t[k - 1]) / (s[k] - s[k - 1])


def test_flat_horizontal_wraps_once(flat):
    seg = gf.integrate_geodesic(flat, (0, 0), (1, 0), 1.0)
    assert np.allclose(seg.end, (1, 0), atol=1e-12)
    assert np.allclose(seg.end_velocity, (1, 0), atol=1e-12)


def test_flat_primitive_vector_closes(flat):
    seg = gf.integrate_geodesic(flat, (0, 0), (0.6, 0.8), 5.0)
    assert np.allclose(seg.end, (3, 4), atol=1e-10)


def test_rejects_non_unit_velocity(flat):
    with pytest.raises(ValueError):
        gf.integrate_geodesic(flat, (0, 0), (1, 1), 1.0)


def test_step_halving_endpoint(two_bumps):
    v = gf.direction_from_angle(two_bumps, (0.2, 0.3), 0.9)
    a = gf.integrate_geodesic(two_bumps, (0.2, 0.3), v, 2.0)
    b = gf.integrate_geodesic(two_bumps, (0.2, 0.3), v, 2.0, dt=gf.DT_SAMPLE / 2, rtol=gf.RTOL / 16, atol=gf.ATOL / 16)
    assert np.linalg.norm(a.end - b.end) <= 1e-8 * 2.0


@pytest.mark.parametrize("theta", [0.3, 1.9, 4.4])
def test_unit_speed_drift(suite_metric, theta):
    L = 2.0
    seg = gf.integrate_from_angle(suite_metric, (0.15, 0.27), theta, L)
    assert gf.unit_speed_deviation(suite_metric, seg) <= 1e-8 * L


def test_time_reversal(focusing):
    seg = gf.integrate_from_angle(focusing, (0.3, 0.4), 0.7, 1.5)
    assert gf.time_reversal_error(focusing, seg) <= 1e-7


def test_flat_jacobi_linear_growth(flat):
    seg = gf.integrate_geodesic(flat, (0.1, 0.1), (1, 0), 1.0)
    sol = gf.jacobi_field(flat, seg, (0, 0), (0, 1))
    assert np.max(np.abs(sol.J - np.column_stack([0 * seg.t, seg.t]))) <= 1e-10


def test_tangential_jacobi_field(two_bumps):
    seg = gf.integrate_from_angle(two_bumps, (0.2, 0.3), 0.9, 1.5)
    sol = gf.jacobi_field(two_bumps, seg, seg.v[0], (0, 0))
    assert np.max(np.abs(sol.J - seg.v)) <= 1e-8


def test_jacobi_linearity(focusing):
    seg = gf.integrate_from_angle(focusing, FOCUS_X, math.pi, 1.0)
    a = gf.jacobi_field(focusing, seg, (0.1, 0.2), (0.3, -0.1))
    b = gf.jacobi_field(focusing, seg, (0.35, 0.7), (1.05, -0.35))
    assert np.max(np.abs(b.J - 3.5 * a.J)) <= 1e-9 * np.max(np.abs(b.J))


def test_jacobi_matches_geodesic_fan(focusing):
    x, th, L, eps = (0.3, 0.45), 0.2, 1.2, 1e-5
    seg = gf.integrate_from_angle(focusing, x, th, L)
    dv = (gf.direction_from_angle(focusing, x, th + eps) - gf.direction_from_angle(focusing, x, th - eps)) / (2 * eps)
    sol = gf.jacobi_field(focusing, seg, (0, 0), dv)
    a = gf.integrate_from_angle(focusing, x, th + eps, L)
    b = gf.integrate_from_angle(focusing, x, th - eps, L)
    assert np.max(np.abs(sol.J - (a.q - b.q) / (2 * eps))) <= 1e-4


def test_exp_flat_is_translation(flat):
    assert np.allclose(gf.exp_map(flat, (0.9, 0.2), (0.3, 0.5)), (0.2, 0.7), atol=1e-12)
    assert np.allclose(gf.d_exp(flat, (0.9, 0.2), (0.3, 0.5)), np.eye(2), atol=1e-10)


def test_exp_at_zero(focusing):
    assert np.array_equal(gf.exp_map(focusing, (0.3, 0.3), (0.0, 0.0)), np.array([0.3, 0.3]))
    assert np.array_equal(gf.d_exp(focusing, (0.3, 0.3), (0.0, 0.0)), np.eye(2))


@pytest.mark.parametrize("w", [(0.6, 0.25), (-0.3, 0.9), (0.05, -0.4)])
def test_d_exp_vs_finite_difference(suite_metric, w):
    x, w, h = np.array([0.15, 0.27]), np.array(w), 1e-5
    D = gf.d_exp(suite_metric, x, w)
    F = np.column_stack([
        (gf.exp_map(suite_metric, x, w + h * e, lifted=True) - gf.exp_map(suite_metric, x, w - h * e, lifted=True)) / (2 * h)
        for e in np.eye(2)
    ])
    assert np.max(np.abs(D - F)) <= 1e-5


def test_flat_conjugacy_margin_is_length(flat):
    seg = gf.integrate_from_angle(flat, (0.1, 0.2), 1.1, 2.0)
    rep = gf.conjugacy(flat, seg, 0.5, 1.75)
    assert rep.verdict == "nonconjugate"
    assert rep.margin == pytest.approx(1.25, abs=1e-9)


def test_focusing_conjugate_time_matches_fan(focusing):
    v = gf.unit_vector(focusing, FOCUS_X, (-1, 0))
    tc = gf.conjugate_times(focusing, FOCUS_X, v, 1.5)[0]
    assert abs(tc - fan_zero(focusing, FOCUS_X, math.pi, 1.5)) <= 1e-3
    seg = gf.integrate_geodesic(focusing, FOCUS_X, v, 1.5)
    assert gf.conjugacy(focusing, seg, 0.0, 1.5).verdict == "nonconjugate"
    near = gf.conjugacy(focusing, gf.integrate_geodesic(focusing, FOCUS_X, v, tc), 0.0, tc, raise_inconclusive=False)
    assert near.margin < 1e-6


def test_inconclusive_raises(focusing):
    v = gf.unit_vector(focusing, FOCUS_X, (-1, 0))
    tc = gf.conjugate_times(focusing, FOCUS_X, v, 1.5)[0]
    seg = gf.integrate_geodesic(focusing, FOCUS_X, v, 1.5)
    rep = gf.conjugacy(focusing, seg, 0.0, tc + 1e-7, raise_inconclusive=False)
    if rep.verdict == "inconclusive":
        with pytest.raises(Inconclusive):
            gf.conjugacy(focusing, seg, 0.0, tc + 1e-7)
    assert rep.margin < 1e-6


@pytest.mark.parametrize("window", [(0.0, 0.6), (0.0, 1.4), (0.3, 1.9)])
def test_conjugacy_verdict_stable_under_dt_halving(suite_metric, window):
    seg = gf.integrate_from_angle(suite_metric, FOCUS_X, math.pi, 2.0)
    a = gf.conjugacy(suite_metric, seg, *window, raise_inconclusive=False)
    b = gf.conjugacy(suite_metric, seg, *window, dt=gf.DT_SAMPLE / 2, raise_inconclusive=False)
    assert a.verdict == b.verdict


def test_self_intersections_flat_cases(flat):
    assert gf.self_intersections(gf.integrate_geodesic(flat, (0, 0), (1, 0), 0.9)).pairs == []
    closed = gf.self_intersections(gf.integrate_geodesic(flat, (0, 0), (1, 0), 1.0))
    assert closed.closed and closed.pairs == []


def test_primitive_two_one_direction_is_simple_closed(flat):
    # (2, 1) is primitive, so the loop never meets itself before closing
    v = np.array([2.0, 1.0]) / math.sqrt(5)
    rep = gf.self_intersections(gf.integrate_geodesic(flat, (0, 0), v, math.sqrt(5)))
    assert rep.closed and rep.pairs == []


def test_figure_eight_crossing_located():
    t = np.linspace(-1.0, math.pi + 1.0, 4001)
    q = 0.5 + 0.2 * np.column_stack([np.sin(t), np.sin(t) * np.cos(t)])
    v = 0.2 * np.column_stack([np.cos(t), np.cos(2 * t)])
    rep = gf.trace_self_intersections(t, q, v, 1e-6)
    assert not rep.closed
    assert len(rep.pairs) == 1
    assert np.allclose(rep.pairs[0], (0.0, math.pi), atol=1e-6)
