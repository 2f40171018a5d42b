import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from geoblock.metricfield import Bump, ConformalBumpMetric, FlatMetric  # noqa: E402


@pytest.fixture(scope="session")
def flat():
    return FlatMetric()


@pytest.fixture(scope="session")
def focusing():
    """Strong conformal bump: geodesics through the centre refocus."""
    return ConformalBumpMetric([Bump((0.5, 0.5), 0.5, 0.3)])


@pytest.fixture(scope="session")
def mild():
    return ConformalBumpMetric([Bump((0.5, 0.6), 0.1, 0.3)])


@pytest.fixture(scope="session")
def two_bumps():
    return ConformalBumpMetric([Bump((0.5, 0.5), 0.5, 0.3), Bump((0.1, 0.8), -0.3, 0.2)])


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


@pytest.fixture(scope="session")
def merged():
    """Flat torus with two parallel foliations 1e-3 apart merged by surgery."""
    from geoblock import fermi, surgery

    E1, E2 = np.array([0.0, 1.0]), np.array([1.0, 0.0])
    f1 = fermi.FlatFermiPatch((0.2, 0.3), E1, E2, 0.3, 0.1, 0.3)
    f2 = fermi.FlatFermiPatch((0.2, 0.301), E1, E2, 0.3, 0.1, 0.3)
    return surgery.merge_foliations(FlatMetric(), f1, f2)


SUITE = ["flat", "mild", "focusing", "two_bumps", "merged_metric"]


@pytest.fixture(scope="session")
def merged_metric(merged):
    return merged.metric


@pytest.fixture(params=SUITE)
def suite_metric(request):
    return request.getfixturevalue(request.param)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
