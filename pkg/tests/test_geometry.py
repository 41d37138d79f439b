import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perforated.geometry import (
    Ball,
    Box,
    InvalidPairing,
    StarDomain,
    ball_box_clearance,
    dist_inf,
    inflate,
    unit_ball_volume,
)

coord = st.floats(-5, 5, allow_nan=False)
side = st.floats(0.01, 3, allow_nan=False)


@st.composite
def boxes(draw, d=2):
    lo = np.array([draw(coord) for _ in range(d)])
    sides = np.array([draw(side) for _ in range(d)])
    return Box(lo, lo + sides)


def sampled_dist_inf(a: Box, b: Box, n: int = 41) -> float:
    """Brute-force oracle: per-axis minimum gap over sampled coordinates of both boxes."""
    ga = np.stack(np.meshgrid(*[np.linspace(l, h, n) for l, h in zip(a.lo, a.hi)], indexing="ij"), -1).reshape(-1, a.d)
    gb = np.stack(np.meshgrid(*[np.linspace(l, h, n) for l, h in zip(b.lo, b.hi)], indexing="ij"), -1).reshape(-1, b.d)
    per_axis = []
    for k in range(a.d):
        xa, xb = np.unique(ga[:, k]), np.unique(gb[:, k])
        per_axis.append(np.min(np.abs(xa[:, None] - xb[None, :])))
    return float(max(per_axis))


class TestDistInf:
    def test_identical_boxes(self):
        assert dist_inf(Box((0, 0, 0), (1, 1, 1)), Box((0, 0, 0), (1, 1, 1))) == 0.0

    def test_gap_along_one_axis(self):
        assert dist_inf(Box((0, 0), (1, 1)), Box((3, 0), (4, 1))) == 2.0

    def test_gap_along_both_axes(self):
        assert dist_inf(Box((0, 0), (1, 1)), Box((2, 5), (3, 6))) == 4.0

    @settings(max_examples=60, deadline=None)
    @given(boxes(), boxes())
    def test_matches_sampling_oracle(self, a, b):
        # sampling can only overshoot, and by at most one sample spacing
        sampled = sampled_dist_inf(a, b)
        spacing = max(np.max(a.sides), np.max(b.sides)) / 40
        assert dist_inf(a, b) <= sampled + 1e-12
        assert sampled - dist_inf(a, b) <= spacing + 1e-12

    @given(boxes(3), boxes(3))
    def test_symmetric(self, a, b):
        assert dist_inf(a, b) == dist_inf(b, a)

    @given(boxes(), boxes())
    def test_zero_iff_closures_meet(self, a, b):
        meet = all(al <= bh and bl <= ah for al, ah, bl, bh in zip(a.lo, a.hi, b.lo, b.hi))
        assert (dist_inf(a, b) == 0.0) == meet


class TestInflate:
    def test_zero_margin(self):
        b = Box((0, 0, 0), (1, 1, 1))
        assert inflate(b, 0.0) == b

    def test_half_margin(self):
        assert inflate(Box((0, 0, 0), (1, 1, 1)), 0.5) == Box((-0.5,) * 3, (1.5,) * 3)

    def test_negative_margin_rejected(self):
        with pytest.raises(ValueError):
            inflate(Box((0,), (1,)), -0.1)

    @given(boxes(3), st.floats(0, 2))
    def test_sides_grow_by_twice_the_margin(self, b, m):
        np.testing.assert_allclose(inflate(b, m).sides, b.sides + 2 * m, rtol=1e-12, atol=1e-12)

    @given(boxes(2), st.floats(0, 2), st.floats(0, 2))
    def test_composition(self, b, m1, m2):
        twice = inflate(inflate(b, m1), m2)
        once = inflate(b, m1 + m2)
        np.testing.assert_allclose(twice.lo, once.lo, atol=1e-12)
        np.testing.assert_allclose(twice.hi, once.hi, atol=1e-12)

    @given(boxes(2), st.floats(0, 2))
    def test_contains_original(self, b, m):
        big = inflate(b, m)
        assert big.contains(b.lo_array) and big.contains(b.hi_array)


class TestBallBoxClearance:
    def test_centered_ball(self):
        assert ball_box_clearance(Ball((0.5, 0.5, 0.5), 0.1), Box((0, 0, 0), (1, 1, 1))) == pytest.approx(0.4)

    def test_point_ball(self):
        assert ball_box_clearance(Ball((0.2, 0.7), 0.0), Box((0, 0), (1, 1))) == pytest.approx(0.2)

    def test_poking_out_is_negative(self):
        assert ball_box_clearance(Ball((0.1, 0.5), 0.3), Box((0, 0), (1, 1))) == pytest.approx(-0.2)

    def test_center_outside_rejected(self):
        with pytest.raises(InvalidPairing):
            ball_box_clearance(Ball((2.0, 0.5), 0.1), Box((0, 0), (1, 1)))


def test_box_rejects_inverted_axes():
    with pytest.raises(ValueError):
        Box((0, 1), (1, 0))


def test_ball_rejects_negative_radius():
    with pytest.raises(ValueError):
        Ball((0, 0), -1.0)


def test_unit_ball_volume():
    assert unit_ball_volume(2) == pytest.approx(math.pi)
    assert unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)


DOMAINS = [
    StarDomain.ball(1.0, 2),
    StarDomain.ball(0.5, 3),
    StarDomain.box([1.0, 0.5]),
    StarDomain.box([0.3, 0.4, 0.5]),
    StarDomain.ellipsoid([1.0, 0.4]),
    StarDomain.ellipsoid([0.5, 0.3, 0.2]),
    StarDomain.radial(1.0 + 0.3 * np.cos(3 * np.linspace(0, 2 * np.pi, 64, endpoint=False))),
]


@pytest.mark.parametrize("domain", DOMAINS, ids=lambda D: D.kind)
def test_star_shaped(domain):
    rng = np.random.default_rng(0)
    bb = domain.bounding_box()
    x = bb.lo_array + bb.sides * rng.random((20000, domain.d))
    inside = x[domain.contains(x)]
    lam = rng.random((len(inside), 1))
    assert np.all(domain.contains(lam * inside))
    assert len(inside) > 1000


@pytest.mark.parametrize("domain", DOMAINS, ids=lambda D: D.kind)
def test_membership_matches_distance_sign(domain):
    rng = np.random.default_rng(1)
    bb = domain.bounding_box()
    x = bb.lo_array - 0.1 + (bb.sides + 0.2) * rng.random((5000, domain.d))
    np.testing.assert_array_equal(domain.contains(x), domain.boundary_distance(x) > 0)


@pytest.mark.parametrize("domain", DOMAINS, ids=lambda D: D.kind)
def test_distance_is_one_lipschitz(domain):
    rng = np.random.default_rng(2)
    bb = domain.bounding_box()
    x = bb.lo_array + bb.sides * rng.random((500, domain.d))
    y = x + 0.01 * rng.standard_normal(x.shape)
    lhs = np.abs(domain.boundary_distance(x) - domain.boundary_distance(y))
    assert np.all(lhs <= np.linalg.norm(x - y, axis=1) * (1 + 1e-6) + 1e-9)


def test_ball_distance_closed_form():
    D = StarDomain.ball(1.0, 3)
    x = np.array([[0, 0, 0], [0.5, 0, 0], [0, 0, 2.0]])
    np.testing.assert_allclose(D.boundary_distance(x), [1.0, 0.5, -1.0])


def test_box_distance_closed_form():
    D = StarDomain.box([1.0, 0.5])
    np.testing.assert_allclose(D.boundary_distance(np.array([[0, 0], [0.9, 0], [2.0, 0.5]])), [0.5, 0.1, -1.0])


def test_domain_round_trip():
    for D in DOMAINS:
        assert StarDomain.from_dict(D.to_dict()) == D


def test_volumes():
    assert StarDomain.ball(1.0, 2).volume() == pytest.approx(math.pi)
    assert StarDomain.box([1.0, 0.5, 2.0]).volume() == pytest.approx(8.0)
    assert StarDomain.ellipsoid([1.0, 2.0, 3.0]).volume() == pytest.approx(4 * math.pi / 3 * 6)
