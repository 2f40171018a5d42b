"""Frozen expected values, computed by hand from closed forms (not by the library)."""

import math

SQRT2_2 = math.sqrt(2.0) / 2.0
SQRT2_5 = math.sqrt(2.5)

# lifts (0.5 + j, 0.5 + k) of (0.5, 0.5) with norm <= 2
FLAT_LIFTS_L2 = sorted(
    (0.5 + j, 0.5 + k)
    for j in range(-3, 3)
    for k in range(-3, 3)
    if math.hypot(0.5 + j, 0.5 + k) <= 2.0
)
FLAT_LENGTHS_L2 = [SQRT2_2] * 4 + [SQRT2_5] * 8

# nonzero lattice vectors of norm <= 1.5
FLAT_LOOPS_L15 = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]

# exp(2 * 0.1 * psi(0)) with psi(0) = 1
CONFORMAL_CENTER_FACTOR = math.exp(0.2)  # 1.2214027581601699

MIDPOINTS = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]

# curated subfamily: lifts whose pairwise direction determinants are nonzero
CURATED_LIFTS = [(0.5, 0.5), (0.5, -0.5), (1.5, 0.5), (0.5, 1.5)]


def unit(v):
    n = math.hypot(*v)
    return (v[0] / n, v[1] / n)


def det(a, b):
    return a[0] * b[1] - a[1] * b[0]
