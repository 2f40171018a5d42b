import math

import numpy as np
import pytest

from geoblock.connector import (
    find_geodesics,
    flat_torus_oracle,
    next_new_geodesic,
    same_geodesic,
    winding_number,
)
from geoblock.errors import BudgetExhausted
from geoblock.metricfield import Bump, ConformalBumpMetric

import oracles


def lifts(x, y, L_max):
    """Displacements y + k - x with 0 < norm <= L_max, by brute force over the lattice."""
    R = int(L_max) + 2
    out = []
    for i in range(-R, R + 1):
        for j in range(-R, R + 1):
            d = (y[0] + i - x[0], y[1] + j - x[1])
            n = math.hypot(*d)
            if 1e-12 < n <= L_max:
                out.append((n, math.atan2(d[1], d[0]) % (2 * math.pi)))
    return sorted(out)


def as_pairs(cs):
    return [(s.length, s.theta0) for s in cs]


def close_pairs(a, b, tol):
    a = sorted(a, key=lambda p: (round(p[0], 6), p[1]))
    b = sorted(b, key=lambda p: (round(p[0], 6), p[1]))
    return len(a) == len(b) and all(
        abs(p[0] - q[0]) <= tol and abs((p[1] - q[1] + math.pi) % (2 * math.pi) - math.pi) <= tol for p, q in zip(a, b)
    )


def test_winding_number_basics():
    sq = [(1, 1), (-1, 1), (-1, -1), (1, -1)]
    assert winding_number(sq) == 1
    assert winding_number(sq[::-1]) == -1
    assert winding_number(sq, (5, 5)) == 0
    assert winding_number(sq + sq) == 2
    assert winding_number([(0, 0), (1, 0), (0, 1)]) is None


def test_flat_twelve(flat):
    cs = find_geodesics(flat, (0, 0), (0.5, 0.5), 2.0)
    assert sorted(cs.lengths) == pytest.approx(oracles.FLAT_LENGTHS_L2, abs=1e-6)
    want = sorted((math.hypot(*d), math.atan2(d[1], d[0]) % (2 * math.pi)) for d in oracles.FLAT_LIFTS_L2)
    assert close_pairs(as_pairs(cs), want, 1e-6)
    assert all(abs(s.meta["degree"]) >= 1 for s in cs)
    assert all(s.meta["endpoint_error"] <= 1e-7 for s in cs)


def test_flat_closed_loops(flat):
    cs = find_geodesics(flat, (0, 0), (0, 0), 1.5)
    want = sorted((math.hypot(*d), math.atan2(d[1], d[0]) % (2 * math.pi)) for d in oracles.FLAT_LOOPS_L15)
    assert close_pairs(as_pairs(cs), want, 1e-6)


def test_short_budget_gives_nothing(two_bumps):
    assert len(find_geodesics(two_bumps, (0.1, 0.1), (0.6, 0.6), 0.3)) == 0


@pytest.mark.parametrize("L_max,count", [(2.0, 12), (0.7, 0)])
def test_oracle_counts(L_max, count):
    assert len(flat_torus_oracle((0, 0), (0.5, 0.5), L_max)) == count


def test_oracle_closed_minimum():
    assert len(flat_torus_oracle((0, 0), (0, 0), 0.5)) == 0


def test_flat_random_instances_match_lattice(flat):
    rng = np.random.default_rng(7)
    for _ in range(20):
        x, y = rng.random(2), rng.random(2)
        L = float(rng.uniform(0.5, 3.0))
        cs = find_geodesics(flat, x, y, L)
        want = lifts(x, y, L)
        assert close_pairs(as_pairs(cs), want, 1e-6), (x, y, L)
        assert close_pairs(as_pairs(flat_torus_oracle(x, y, L)), want, 1e-9)


def test_doubling_resolution_keeps_count(mild):
    a = find_geodesics(mild, (0.1, 0.2), (0.55, 0.6), 2.0, angular_resolution=256)
    b = find_geodesics(mild, (0.1, 0.2), (0.55, 0.6), 2.0, angular_resolution=512)
    assert close_pairs(as_pairs(a), as_pairs(b), 1e-6)


def test_small_bump_keeps_flat_count():
    g = ConformalBumpMetric([Bump((0.3, 0.6), 0.05, 0.25)])
    assert len(find_geodesics(g, (0, 0), (0.5, 0.5), 2.0)) == 12


def test_connections_are_geodesics_to_y(focusing):
    from geoblock import geodesicflow as gf
    from geoblock.metricfield import torus_distance

    cs = find_geodesics(focusing, (0.1, 0.2), (0.7, 0.55), 1.6)
    assert len(cs) > 0
    for s in cs:
        assert torus_distance(s.end, (0.7, 0.55)) <= 1e-7
        assert gf.residual_fine(focusing, s) <= 1e-6
    for i, a in enumerate(cs):
        assert not any(same_geodesic(a, b) for b in list(cs)[i + 1:])


def test_next_new_after_four_shortest(flat):
    known = list(find_geodesics(flat, (0, 0), (0.5, 0.5), 1.0))
    assert len(known) == 4
    s = next_new_geodesic(flat, (0, 0), (0.5, 0.5), known)
    assert s.length == pytest.approx(oracles.SQRT2_5, abs=1e-9)


def test_next_new_from_nothing_is_shortest(flat):
    s = next_new_geodesic(flat, (0.1, 0.1), (0.3, 0.2), [])
    assert s.length == pytest.approx(math.hypot(0.2, 0.1), abs=1e-9)


def test_next_new_loop_skips_reversal(flat):
    from geoblock import geodesicflow as gf

    loop = gf.integrate_geodesic(flat, (0, 0), (1, 0), 1.0)
    s = next_new_geodesic(flat, (0, 0), (0, 0), [loop])
    assert s.length == pytest.approx(1.0, abs=1e-9)
    assert not same_geodesic(s, loop) and not same_geodesic(s, loop.reversed())
    assert abs(math.cos(s.theta0)) <= 1e-9  # the vertical loop


def test_budget_exhausted(flat):
    with pytest.raises(BudgetExhausted):
        next_new_geodesic(flat, (0, 0), (0.5, 0.5), [], schedule=[0.3, 0.6])
