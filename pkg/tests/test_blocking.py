import math

import numpy as np
import pytest

from geoblock import geodesicflow as gf
from geoblock.blocking import (
    BlockingQuery,
    InsecurityCertificate,
    build_certificate,
    certificate_hash,
    check_S_conditions,
    is_blocking_set,
    midpoint_classes,
    verify_certificate,
)
from geoblock.connector import find_geodesics, flat_torus_oracle
from geoblock.errors import PointTooCloseToEndpoints, StaleMetric
from geoblock.metricfield import FlatMetric, torus_distance

import oracles

X, Y = (0.0, 0.0), (0.5, 0.5)


def straight(flat, d, x=X):
    L = math.hypot(*d)
    return gf.integrate_geodesic(flat, x, np.array(d) / L, L)


@pytest.fixture(scope="module")
def twelve(flat):
    return list(flat_torus_oracle(X, Y, 2.0))


@pytest.fixture(scope="module")
def curated(flat):
    return [straight(flat, d) for d in oracles.CURATED_LIFTS]


def resign(d):
    d = dict(d)
    d["hash"] = ""
    d["hash"] = certificate_hash(d)
    return d


def test_midpoint_classes_values():
    got = sorted(tuple(np.round(p, 12)) for p in midpoint_classes(X, Y))
    assert got == sorted(oracles.MIDPOINTS)


def test_midpoints_block_twelve(twelve):
    assert is_blocking_set(BlockingQuery(X, Y, oracles.MIDPOINTS, twelve)).blocked


@pytest.mark.parametrize("drop", range(4))
def test_dropping_a_class_unblocks(twelve, drop):
    P = [p for k, p in enumerate(oracles.MIDPOINTS) if k != drop]
    v = is_blocking_set(BlockingQuery(X, Y, P, twelve))
    assert not v.blocked
    seg = twelve[v.index]
    assert seg.length == pytest.approx(oracles.SQRT2_2, abs=1e-12)
    # the unblocked short geodesic is the one whose midpoint was removed
    assert torus_distance(seg.position(seg.length / 2)[0], oracles.MIDPOINTS[drop]) <= 1e-12


def test_removing_odd_odd_class_witness(twelve):
    P = oracles.MIDPOINTS[:3]
    v = is_blocking_set(BlockingQuery(X, Y, P, twelve))
    assert twelve[v.index].theta0 == pytest.approx(5 * math.pi / 4, abs=1e-12)


def test_empty_set_blocks_nothing(twelve):
    v = is_blocking_set(BlockingQuery(X, Y, [], twelve))
    assert not v.blocked and v.index == 0


def test_point_at_endpoint_rejected(twelve):
    with pytest.raises(PointTooCloseToEndpoints):
        BlockingQuery(X, Y, [(0.5, 0.5 + 1e-7)], twelve)


def test_blocking_is_monotone(twelve):
    rng = np.random.default_rng(3)
    base = list(oracles.MIDPOINTS)
    for _ in range(5):
        extra = [tuple(p) for p in rng.uniform(0.05, 0.45, (3, 2))]
        assert is_blocking_set(BlockingQuery(X, Y, base + extra, twelve)).blocked
    partial = oracles.MIDPOINTS[:3]
    before = is_blocking_set(BlockingQuery(X, Y, partial, twelve)).blocked
    after = is_blocking_set(BlockingQuery(X, Y, partial + [oracles.MIDPOINTS[3]], twelve)).blocked
    assert after or not before


def test_midpoints_block_random_pairs(flat):
    rng = np.random.default_rng(11)
    done = 0
    while done < 10:
        x, y = rng.random(2), rng.random(2)
        P = midpoint_classes(x, y)
        if min(min(torus_distance(p, x), torus_distance(p, y)) for p in P) <= 1e-6:
            continue
        fam = list(find_geodesics(flat, x, y, 3.0))
        assert is_blocking_set(BlockingQuery(x, y, P, fam)).blocked
        done += 1


def test_twelve_fail_i_with_antiparallel_pair(flat, twelve):
    rep = check_S_conditions(flat, X, Y, twelve)
    assert rep.verdicts["i"] is False
    w = rep.witnesses["i"]
    va = twelve[w["a"][1]].start_velocity
    vb = twelve[w["b"][1]].start_velocity
    assert abs(oracles.det(va, vb)) <= 1e-12
    assert np.dot(va, vb) == pytest.approx(-1.0, abs=1e-12)


def test_curated_passes_all(flat, curated):
    rep = check_S_conditions(flat, X, Y, curated)
    assert rep.passes()
    assert rep.margins["i"] == pytest.approx(1 / math.sqrt(5), abs=1e-9)
    assert rep.margins["ii"] == pytest.approx(1 / math.sqrt(10), abs=1e-9)
    assert rep.margins["iv"] == pytest.approx(oracles.SQRT2_2, abs=1e-9)


def test_verdicts_stable_under_eps_halving(flat, curated, twelve):
    for fam in (curated, twelve):
        a = check_S_conditions(flat, X, Y, fam, conditions=("i", "ii", "iii"))
        b = check_S_conditions(flat, X, Y, fam, conditions=("i", "ii", "iii"), eps_int=0.5e-5)
        assert a.verdicts == b.verdicts


def test_overlapping_traces_fail_iii(flat):
    # the longer diagonal retraces the shorter one
    fam = [straight(flat, d) for d in [(0.5, 0.5), (1.5, 1.5)]]
    rep = check_S_conditions(flat, X, Y, fam, conditions=("iii",))
    assert rep.verdicts["iii"] is False
    assert rep.witnesses["iii"] == {"overlap": [0, 1]}


def test_three_concurrent_detected(flat):
    # all three lifts have their midpoint in the class (0.25, 0.25)
    fam = [straight(flat, d) for d in [(0.5, 0.5), (-1.5, 0.5), (0.5, -1.5)]]
    rep = check_S_conditions(flat, X, Y, fam, conditions=("i", "iii"))
    assert rep.verdicts == {"i": True, "iii": False}
    assert np.allclose(rep.witnesses["iii"]["point"], (0.25, 0.25), atol=1e-6)


def test_single_member_iii_vacuous(flat):
    loop = straight(flat, (1.0, 0.0))
    rep = check_S_conditions(flat, X, X, [loop], conditions=("iii",))
    assert rep.verdicts["iii"] is True


@pytest.fixture(scope="module")
def cert1(flat, curated):
    return build_certificate(flat, X, Y, curated[:3])


def test_certificate_m0(flat):
    cert = build_certificate(flat, X, Y, [straight(flat, (0.5, 0.5))])
    r = verify_certificate(cert)
    assert r.ok and cert.m == 0


def test_certificate_roundtrip(cert1, tmp_path):
    p = tmp_path / "c.json"
    cert1.to_json(p)
    c2 = InsecurityCertificate.load(p)
    assert c2.to_dict() == cert1.to_dict()
    assert verify_certificate(c2).ok


def test_even_family_rejected(flat, curated):
    with pytest.raises(ValueError):
        build_certificate(flat, X, Y, curated)


def test_verify_permutation_invariant(cert1):
    d = cert1.to_dict()
    d["geodesics"] = d["geodesics"][::-1]
    assert verify_certificate(resign(d)).ok


def test_verify_jobs_invariant(cert1):
    assert verify_certificate(cert1, jobs=3).reasons == verify_certificate(cert1).reasons


def test_corrupt_duplicate(cert1):
    d = cert1.to_dict()
    d["geodesics"][2] = dict(d["geodesics"][0])
    r = verify_certificate(resign(d))
    assert not r.ok and r.code == "duplicate"


def test_corrupt_antiparallel(cert1):
    d = cert1.to_dict()
    d["geodesics"][2] = {"theta0": 5 * math.pi / 4, "length": oracles.SQRT2_2}
    r = verify_certificate(resign(d))
    assert not r.ok and r.code == "i"


def test_corrupt_hash(cert1):
    d = cert1.to_dict()
    d["geodesics"][0]["length"] += 1e-3
    assert verify_certificate(d).code == "hash"


def test_corrupt_endpoint(cert1):
    d = cert1.to_dict()
    d["geodesics"][0]["length"] += 1e-3
    assert verify_certificate(resign(d)).code == "endpoint"


def test_corrupt_size(cert1):
    d = cert1.to_dict()
    d["m"] = 2
    assert verify_certificate(resign(d)).code == "size"


def test_stale_metric(cert1, mild):
    with pytest.raises(StaleMetric):
        verify_certificate(cert1, metric=mild)
    d = cert1.to_dict()
    d["metric"] = mild.to_dict()
    with pytest.raises(StaleMetric):
        verify_certificate(resign(d))


def test_verify_against_named_metric(cert1):
    assert verify_certificate(cert1, metric=FlatMetric()).ok
