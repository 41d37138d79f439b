import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perforated.geometry import Ball, Box
from perforated.john import (
    CarvedBox,
    ConeNotFound,
    c_cap,
    candidate_directions,
    check_kappa_gap,
    construct_john_path,
    disc_radius,
    estimate_john_constant,
    find_escape_cone,
    reference_scene,
    write_constant_csv,
    write_path_json,
)


def cone_rays(direction, half_angle, n, rng):
    """Unit vectors uniformly spread inside a cone, plus the axis itself."""
    d = len(direction)
    a = direction / np.linalg.norm(direction)
    basis = np.linalg.svd(a[None])[2][1:]  # orthonormal complement of the axis
    if d == 2:
        theta = rng.uniform(-half_angle, half_angle, n - 1)
        rays = np.cos(theta)[:, None] * a + np.sin(theta)[:, None] * basis[0]
    else:
        cos_t = rng.uniform(math.cos(half_angle), 1.0, n - 1)
        sin_t = np.sqrt(1 - cos_t**2)
        phi = rng.uniform(0, 2 * math.pi, n - 1)
        side = np.cos(phi)[:, None] * basis[0] + np.sin(phi)[:, None] * basis[1]
        rays = cos_t[:, None] * a + sin_t[:, None] * side
    return np.vstack([a, rays])


def ray_hits(x, rays, balls):
    """Analytic ray-ball intersection from a point outside every ball."""
    for b in balls:
        oc = x - b.center_array
        proj = rays @ oc
        disc = proj**2 - (oc @ oc - b.radius**2)
        if np.any((proj < 0) & (disc >= 0)):
            return True
    return False


class TestEscapeCone:
    def test_no_balls(self):
        direction, half = find_escape_cone(np.zeros(3), [], 40)
        assert half == pytest.approx(math.pi / 2)
        assert np.linalg.norm(direction) == pytest.approx(1.0)

    @pytest.mark.parametrize("d", [2, 3])
    def test_one_ball(self, d):
        rng = np.random.default_rng(d)
        ball = Ball(tuple(rng.standard_normal(d)), 0.3)
        x = np.zeros(d)
        direction, half = find_escape_cone(x, [ball], 12)
        to_ball = ball.center_array / np.linalg.norm(ball.center_array)
        assert math.acos(direction @ to_ball) > math.pi / 2
        assert half == pytest.approx(disc_radius(12))
        assert not ray_hits(x, cone_rays(direction, half, 10000, rng), [ball])

    def test_random_instances_ray_oracle(self):
        rng = np.random.default_rng(0)
        found = 0
        for _ in range(10000):
            d = int(rng.integers(2, 4))
            N = 12 if d == 2 else 40
            k = int(rng.integers(1, 5))
            balls = []
            for _ in range(k):
                c = rng.standard_normal(d) * rng.uniform(0.5, 3)
                balls.append(Ball(tuple(c), rng.uniform(0.001, 0.05) * np.linalg.norm(c)))
            try:
                direction, half = find_escape_cone(np.zeros(d), balls, N)
            except ConeNotFound:
                continue
            found += 1
            assert not ray_hits(np.zeros(d), cone_rays(direction, half, 50, rng), balls)
        assert found > 9000

    @pytest.mark.parametrize("d,N", [(2, 12), (3, 40), (3, 24)])
    def test_pigeonhole_adversary(self, d, N):
        x = np.zeros(d)
        pole = np.zeros(d)
        pole[-1] = 1.0
        nearest = Ball(tuple(-pole), 0.05)
        cands = candidate_directions(pole, N)
        # N - 1 point-like balls at candidate centers, farther than the nearest ball
        blockers = [Ball(tuple(2.0 * c), 1e-6) for c in cands[:-1]]
        direction, half = find_escape_cone(x, [nearest] + blockers, N)
        np.testing.assert_allclose(direction, cands[-1], atol=1e-12)
        assert not ray_hits(x, cone_rays(direction, half, 5000, np.random.default_rng(1)), [nearest] + blockers)

    def test_all_candidates_blocked(self):
        pole = np.array([0.0, 0.0, 1.0])
        cands = candidate_directions(pole, 24)
        balls = [Ball((0, 0, -1.0), 0.05)] + [Ball(tuple(2.0 * c), 1e-6) for c in cands]
        with pytest.raises(ConeNotFound) as info:
            find_escape_cone(np.zeros(3), balls, 24)
        assert info.value.diagnostics["nearest"] == 0

    def test_candidate_gap(self):
        for d, N in [(2, 12), (3, 40)]:
            cands = candidate_directions(np.eye(d)[0], N)
            ang = np.arccos(np.clip(cands @ cands.T, -1, 1))
            np.fill_diagonal(ang, np.inf)
            # disjoint discs of radius r with gaps of at least r
            assert ang.min() >= 3 * disc_radius(N) - 1e-12


def cube_scene(balls=(), N=12, d=2):
    return CarvedBox(Box((0,) * d, (1,) * d), balls, N)


class TestPaths:
    def test_start_at_x0(self):
        carved = cube_scene()
        path = construct_john_path(carved.x0, carved)
        assert path.total_length == 0.0 and path.witness_constant == 0.0

    @pytest.mark.parametrize("d", [2, 3])
    def test_highway_vertices_at_depth_w(self, d):
        carved = cube_scene(N=12 if d == 2 else 40, d=d)
        start = carved.highway.lo_array.copy()
        start[0] += 0.3 * carved.highway.sides[0]
        path = construct_john_path(start, carved)
        np.testing.assert_allclose(carved.dist_to_boundary(path.vertices), carved.w, rtol=1e-9)
        assert path.regime == "highway"

    @given(st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_paths_stay_inside(self, seed):
        carved = reference_scene(0.1, d=2)
        rng = np.random.default_rng(seed)
        lo, hi = carved.box.lo_array, carved.box.hi_array
        x = lo + (hi - lo) * rng.random(2)
        if not carved.contains(x)[0]:
            return
        path = construct_john_path(x, carved)
        assert np.all(carved.contains(path.samples))
        assert math.isfinite(path.witness_constant)
        lhs = np.linalg.norm(path.samples - x, axis=1)
        assert np.all(lhs <= path.witness_constant * carved.dist_to_boundary(path.samples) * (1 + 1e-12))

    def test_outside_start_rejected(self):
        carved = cube_scene([Ball((0.5, 0.5), 0.1)])
        with pytest.raises(ValueError):
            construct_john_path(np.array([0.5, 0.5]), carved)

    @pytest.mark.parametrize("factor", [1e-3, 7.0])
    def test_scale_invariance(self, factor):
        base = reference_scene(0.1, d=2)
        shift = np.array([3.0, -2.0])
        scaled = CarvedBox(
            Box(tuple(base.box.lo_array * factor + shift), tuple(base.box.hi_array * factor + shift)),
            tuple(Ball(tuple(b.center_array * factor + shift), b.radius * factor) for b in base.balls),
            base.N,
            scale=base.scale * factor,
        )
        x = np.array([0.1, -0.05])
        c1 = construct_john_path(x, base).witness_constant
        c2 = construct_john_path(x * factor + shift, scaled).witness_constant
        assert c2 == pytest.approx(c1, rel=1e-6)

    def test_path_json(self, tmp_path):
        carved = reference_scene(0.1, d=2)
        path = construct_john_path(np.array([0.0, 0.0]), carved)
        write_path_json(path, tmp_path / "p.json")
        assert (tmp_path / "p.json").read_text().startswith("{")


class TestConstant:
    def test_empty_box_finite(self):
        carved = cube_scene(N=12)
        c, _ = estimate_john_constant(carved, 20)
        assert math.isfinite(c) and c > 1

    def test_reference_scene_is_eps_uniform_2d(self):
        values = [estimate_john_constant(reference_scene(eps, d=2), 20)[0] for eps in (0.2, 0.1, 0.05)]
        assert max(values) / min(values) < 1.2
        assert max(values) <= c_cap(12, 2)

    def test_violating_ball_blows_up(self):
        c, _ = estimate_john_constant(reference_scene(0.1, d=2, violate=True), 20)
        assert c > c_cap(12, 2)

    def test_kappa_gap_holds_on_reference_scene(self):
        carved = reference_scene(0.1, d=3)
        worst, bound, ok = check_kappa_gap(carved.box.center, carved)
        assert ok and worst <= bound

    def test_unknown_cap(self):
        with pytest.raises(KeyError):
            c_cap(7, 3)

    def test_reference_scene_clearance(self):
        for d in (2, 3):
            assert reference_scene(0.1, d=d).clearance_margin() > 0
            assert reference_scene(0.1, d=d, violate=True).clearance_margin() < 0

    def test_constant_csv(self, tmp_path):
        write_constant_csv([(0.1, 345.3, np.array([0.1, 0.2]))], tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "eps,c_hat,worst_point"


def test_overlapping_balls_rejected():
    with pytest.raises(ValueError):
        cube_scene([Ball((0.4, 0.5), 0.1), Ball((0.5, 0.5), 0.1)])
