import json

import numpy as np
import pytest

from geoblock.errors import NonSPD, OverlapPolicyViolation
from geoblock.metricfield import (
    H_FD,
    BlendPatch,
    Bump,
    CompositeMetric,
    ConformalBumpMetric,
    FlatMetric,
    compose_with_patch,
    grid_points,
    load_metric,
    metric_distance,
    metric_from_dict,
    normalize,
    save_metric,
    torus_distance,
    validate_metric,
)

import oracles


def fd_christoffel(g, q, h=H_FD, order=4):
    """Levi-Civita symbols from central differences of the metric values alone."""
    q = np.asarray(q, float)
    G = g.eval(q)
    Ginv = np.linalg.inv(G)
    dG = np.zeros((2, 2, 2))  # dG[k] = d_k g
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        if order == 2:
            dG[k] = (g.eval(q + e) - g.eval(q - e)) / (2 * h)
        else:
            dG[k] = (8 * (g.eval(q + e) - g.eval(q - e)) - (g.eval(q + 2 * e) - g.eval(q - 2 * e))) / (12 * h)
    gam = np.zeros((2, 2, 2))
    for k in range(2):
        for i in range(2):
            for j in range(2):
                gam[k, i, j] = 0.5 * sum(
                    Ginv[k, l] * (dG[i][l, j] + dG[j][l, i] - dG[l][i, j]) for l in range(2)
                )
    return gam


def blend(center, amplitude=1.0, r_in=0.05, r_out=0.15, pid="b"):
    repl = ConformalBumpMetric([Bump(tuple(center), 0.3, 0.3)])
    return BlendPatch(center, r_in, r_out, repl, amplitude, pid)


def test_flat_is_identity(flat):
    assert np.array_equal(flat.eval((0.3, 0.7)), np.eye(2))


def test_conformal_value_at_bump_centre():
    g = ConformalBumpMetric([Bump((0.5, 0.5), 0.1, 0.3)])
    np.testing.assert_allclose(g.eval((0.5, 0.5)), oracles.CONFORMAL_CENTER_FACTOR * np.eye(2), rtol=0, atol=1e-15)


def test_bump_rejects_radius_that_wraps():
    with pytest.raises(ValueError):
        Bump((0.5, 0.5), 0.1, 0.5)


def test_flat_christoffel_vanishes(flat, rng):
    q = rng.random((10, 2))
    assert np.all(flat.christoffel(q) == 0.0)


@pytest.mark.parametrize("q", [(0.5, 0.6), (0.62, 0.41), (0.3, 0.3)])
def test_christoffel_matches_fd_oracle(mild, q):
    err = np.max(np.abs(mild.christoffel(np.array(q)) - fd_christoffel(mild, q)))
    assert err <= 10 * H_FD**2


def test_christoffel_second_order_oracle_at_reference_point(mild):
    q = (0.5, 0.6)
    err = np.max(np.abs(mild.christoffel(np.array(q)) - fd_christoffel(mild, q, order=2)))
    assert err <= 10 * H_FD**2


def test_christoffel_symmetric(two_bumps, rng):
    gam = two_bumps.christoffel(rng.random((50, 2)))
    assert np.max(np.abs(gam - np.swapaxes(gam, -1, -2))) == 0.0


def test_composite_equals_base_outside_support(mild):
    g = compose_with_patch(mild, blend((0.2, 0.2)))
    q = np.array([[0.7, 0.7], [0.5, 0.9], [0.2, 0.36]])
    assert np.array_equal(g.eval(q), mild.eval(q))


def test_composite_christoffel_near_patch(flat):
    g = compose_with_patch(flat, blend((0.5, 0.5)))
    q = (0.57, 0.52)
    err = np.max(np.abs(g.christoffel(np.array(q)) - fd_christoffel(g, q)))
    assert err <= 10 * H_FD**2


def test_identity_patch_changes_nothing(mild):
    p = BlendPatch((0.4, 0.4), 0.05, 0.15, mild)
    g = compose_with_patch(mild, p)
    q = grid_points(64).reshape(-1, 2)
    np.testing.assert_allclose(g.eval(q), mild.eval(q), rtol=0, atol=1e-15)


def test_disjoint_patches_commute_bitwise(flat):
    a, b = blend((0.25, 0.25), pid="a"), blend((0.75, 0.7), pid="b")
    g_ab = compose_with_patch(compose_with_patch(flat, a), b)
    g_ba = compose_with_patch(compose_with_patch(flat, b), a)
    q = grid_points(64)
    assert np.array_equal(g_ab.eval(q), g_ba.eval(q))


def test_overlapping_patches_rejected_in_strict_mode(flat):
    g = compose_with_patch(flat, blend((0.5, 0.5)))
    with pytest.raises(OverlapPolicyViolation):
        compose_with_patch(g, blend((0.6, 0.5), pid="c"))


def test_nonspd_detected(flat):
    bad = BlendPatch((0.5, 0.5), 0.05, 0.15, flat, amplitude=1.0)

    class Negative(FlatMetric):
        def _eval(self, q):
            return -np.ones(np.shape(q)[:-1])[..., None, None] * np.eye(2)

    bad.replacement = Negative()
    with pytest.raises(NonSPD):
        compose_with_patch(flat, bad)


def test_metric_distance_self_is_zero(two_bumps):
    r = metric_distance(two_bumps, two_bumps)
    assert (r.c0, r.c1, r.c2, r.support_box) == (0.0, 0.0, 0.0, None)


def test_patch_difference_support_inside_patch(flat):
    p = blend((0.5, 0.4))
    r = metric_distance(flat, compose_with_patch(flat, p))
    (xlo, xhi), (ylo, yhi) = r.support_box
    assert 0.5 - 0.15 <= xlo and xhi <= 0.5 + 0.15
    assert 0.4 - 0.15 <= ylo and yhi <= 0.4 + 0.15


def test_halving_blend_amplitude_halves_c0(flat):
    full = metric_distance(flat, compose_with_patch(flat, blend((0.5, 0.5), 1.0))).c0
    half = metric_distance(flat, compose_with_patch(flat, blend((0.5, 0.5), 0.5))).c0
    assert half == pytest.approx(full / 2, rel=1e-2)


@pytest.mark.parametrize("name", ["flat", "mild", "two_bumps"])
def test_validation_grid(name, request):
    rep = validate_metric(request.getfixturevalue(name), grid=128)
    assert rep["spd"] and rep["periodic"]
    assert rep["periodicity_residual"] <= 1e-12


def test_composite_validation_grid(flat):
    rep = validate_metric(compose_with_patch(flat, blend((0.05, 0.95))), grid=128)
    assert rep["spd"] and rep["periodicity_residual"] <= 1e-9


def test_roundtrip_serialization(tmp_path, two_bumps, flat):
    g = compose_with_patch(two_bumps, BlendPatch((0.8, 0.2), 0.02, 0.1, flat))
    path = tmp_path / "m.json"
    save_metric(g, path)
    g2 = load_metric(path)
    assert g2.metric_id == g.metric_id
    q = grid_points(32)
    assert np.array_equal(g2.eval(q), g.eval(q))
    assert isinstance(g2, CompositeMetric)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        metric_from_dict({"kind": "hyperbolic"})


def test_metric_id_depends_on_content():
    a = ConformalBumpMetric([Bump((0.5, 0.5), 0.1, 0.3)])
    b = ConformalBumpMetric([Bump((0.5, 0.5), 0.1000001, 0.3)])
    assert a.metric_id != b.metric_id
    assert a.metric_id == metric_from_dict(json.loads(json.dumps(a.to_dict()))).metric_id


def test_torus_helpers():
    assert np.allclose(normalize((1.25, -0.25)), (0.25, 0.75))
    assert torus_distance((0.95, 0.0), (0.05, 0.0)) == pytest.approx(0.1)
