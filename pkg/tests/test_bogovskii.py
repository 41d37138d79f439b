import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import mean_zero_field, random_scene, tiny_scene
from perforated.bogovskii import (
    DivSolver,
    GridBudgetExceeded,
    MaskedGrid,
    SurrogateFamily,
    bogovskii_eps,
    check_literal_budget,
    operator_norm_sweep,
    rasterize,
)
from perforated.bogovskii.grid import (
    EXTERIOR,
    FLUID,
    HOLE,
    UnresolvableHoles,
    divergence,
    flatten,
    grad_diffs,
    grad_norm,
    read_grid_fields,
    unflatten,
    write_grid_fields,
)
from perforated.bogovskii.restriction import (
    MeanDriftError,
    bogovskii_eps_adjoint,
    build_scene,
    divergence_residual,
    layer_cells,
    layer_mean,
    local_estimates,
    naive_projection,
    restriction_adjoint,
    restriction_apply,
    zero_trace_violations,
)
from perforated.bogovskii.solver import NonZeroMean, solve_div_minimal
from perforated.bogovskii.sweep import theory_factor, uniformity, write_sweep_csv
from perforated.geometry import StarDomain
from perforated.sampler import PerforatedDomain


def square_grid(n, mask=None):
    cls = np.full((n, n), FLUID, dtype=np.int8) if mask is None else np.where(mask, FLUID, HOLE).astype(np.int8)
    return MaskedGrid(np.zeros(2), 1.0 / n, (n, n), cls)


def inner(u, v):
    return float(sum(np.sum(a * b) for a, b in zip(u, v)))


# ---------------------------------------------------------------------------
# independent KKT oracle: matrices assembled from the public grid operators


def oracle_solve(grid, region, f):
    """Minimize h^d |G u|^2 subject to B u = f on region, u = 0 off region faces.

    B and G are built column by column from ``divergence`` and ``grad_diffs``
    on unit face vectors, then the KKT system is solved by least squares.
    """
    n = grid.n_faces
    free = []
    for a in range(grid.d):
        left = np.pad(region, [(1, 1) if k == a else (0, 0) for k in range(grid.d)])
        lo = [slice(None)] * grid.d
        hi = [slice(None)] * grid.d
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        free.append((left[tuple(lo)] & left[tuple(hi)]).ravel())
    free = np.concatenate(free)
    cols = np.flatnonzero(free)
    B = np.zeros((int(region.sum()), len(cols)))
    G = []
    for k, c in enumerate(cols):
        e = np.zeros(n)
        e[c] = 1.0
        u = unflatten(grid, e)
        B[:, k] = divergence(grid, u)[region]
        G.append(np.concatenate([g.ravel() for g in grad_diffs(grid, u)]))
    G = np.array(G).T
    A = grid.h**grid.d * G.T @ G
    m = len(cols)
    K = np.block([[A, B.T], [B, np.zeros((B.shape[0], B.shape[0]))]])
    rhs = np.concatenate([np.zeros(m), f[region]])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    out = np.zeros(n)
    out[cols] = sol[:m]
    return unflatten(grid, out)


def random_region(n, rng, holes=3):
    mask = np.ones((n, n), dtype=bool)
    for _ in range(holes):
        i, j = rng.integers(2, n - 3, size=2)
        mask[i : i + 2, j : j + 2] = False
    return mask


# ---------------------------------------------------------------------------
# grid


class TestGrid:
    def test_no_holes_all_fluid(self):
        D = StarDomain.ball(1.0, 2)
        perf = PerforatedDomain(D, 0.1, 4.0, np.zeros((0, 2)), np.zeros(0))
        g = rasterize(perf, [], 64)
        centers = g.cell_centers().reshape(-1, 2)
        np.testing.assert_array_equal(g.fluid.ravel(), D.contains(centers))
        assert not np.any(g.cell_class == HOLE)

    def test_hole_area_count(self):
        D = StarDomain.box([1.0, 1.0])
        h = 2.0 / 200
        perf = PerforatedDomain(D, 0.1, 4.0, np.array([[h / 3, -h / 7]]), np.array([10 * h]))
        g = rasterize(perf, [], 200)
        assert abs(np.count_nonzero(g.cell_class == HOLE) - 100 * math.pi) <= 0.1 * 100 * math.pi

    def test_unresolvable_holes(self):
        D = StarDomain.box([1.0, 1.0])
        perf = PerforatedDomain(D, 0.1, 4.0, np.array([[0.0, 0.0]]), np.array([0.01]))
        with pytest.raises(UnresolvableHoles) as info:
            rasterize(perf, [], 100)
        assert info.value.cells_across == pytest.approx(1.0)

    def test_exterior_marked(self):
        perf = PerforatedDomain(StarDomain.ball(1.0, 2), 0.1, 4.0, np.zeros((0, 2)), np.zeros(0))
        g = rasterize(perf, [], 32)
        assert g.cell_class[0, 0] == EXTERIOR and g.cell_class[16, 16] == FLUID

    def test_divergence_of_linear_field(self):
        g = square_grid(10)
        u = (g.face_centers(0)[..., 0], np.zeros(g.face_shape(1)))
        np.testing.assert_allclose(divergence(g, u), 1.0, atol=1e-12)

    def test_binary_round_trip(self, tmp_path):
        g = random_scene(0, 96).grid
        f = np.random.default_rng(0).standard_normal(g.dims)
        u = tuple(np.random.default_rng(a).standard_normal(g.face_shape(a)) for a in range(2))
        write_grid_fields(tmp_path / "fields", g, {"f": f, "u": u})
        header, data = read_grid_fields(tmp_path / "fields")
        assert header["dims"] == list(g.dims) and header["h"] == g.h
        assert data["f"].tobytes() == f.astype("<f8").tobytes()
        assert data["u[1]"].tobytes() == u[1].astype("<f8").tobytes()
        np.testing.assert_array_equal(data["cell_class"], g.cell_class)


# ---------------------------------------------------------------------------
# minimal-gradient solver


class TestSolver:
    @pytest.mark.parametrize("method", ["schur-cg", "direct", "dense"])
    def test_zero_rhs(self, method):
        g = square_grid(8)
        u = DivSolver(g, g.fluid, method).solve(np.zeros(g.dims))
        assert all(np.all(c == 0) for c in u)

    def test_minimality_against_hand_built_field(self):
        g = square_grid(16)
        # a bump on the x-faces supported away from the boundary
        w = list(g.zero_field())
        x = g.face_centers(0)
        w[0] = np.where((np.abs(x[..., 0] - 0.5) < 0.3) & (np.abs(x[..., 1] - 0.5) < 0.3), np.sin(7 * x[..., 1]), 0.0)
        w = tuple(w)
        f = divergence(g, w)
        u = solve_div_minimal(f, g, g.fluid, tol=1e-12)
        np.testing.assert_allclose(divergence(g, u), f, atol=1e-10 * np.abs(f).max())
        assert grad_norm(g, u) <= grad_norm(g, w) * (1 + 1e-12)

    @pytest.mark.parametrize("method", ["schur-cg", "direct"])
    def test_single_source_matches_dense(self, method):
        g = square_grid(8)
        f = np.full(g.dims, -1.0 / 63)
        f[3, 4] = 1.0
        ref = DivSolver(g, g.fluid, "dense").solve(f)
        u = DivSolver(g, g.fluid, method, tol=1e-13).solve(f)
        np.testing.assert_allclose(flatten(u), flatten(ref), atol=1e-10)
        np.testing.assert_allclose(flatten(ref), flatten(oracle_solve(g, g.fluid, f)), atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_perforated_16_matches_independent_oracle(self, seed):
        rng = np.random.default_rng(seed)
        region = random_region(16, rng)
        g = square_grid(16, region)
        f = np.where(region, rng.standard_normal(g.dims), 0.0)
        f[region] -= f[region].mean()
        ref = oracle_solve(g, region, f)
        for method in ("dense", "direct", "schur-cg"):
            u = DivSolver(g, region, method, tol=1e-13).solve(f)
            np.testing.assert_allclose(divergence(g, u)[region], divergence(g, ref)[region], atol=1e-10)
            np.testing.assert_allclose(flatten(u), flatten(ref), atol=1e-9)

    def test_nonzero_mean_rejected(self):
        g = square_grid(8)
        with pytest.raises(NonZeroMean):
            DivSolver(g, g.fluid).solve(np.ones(g.dims))

    def test_mean_checked_per_component(self):
        mask = np.ones((8, 8), dtype=bool)
        mask[:, 4] = False
        g = square_grid(8, mask)
        f = np.where(mask, 0.0, 0.0)
        f[:, :4] = 1.0
        f[:, 5:] = -4.0 / 3.0
        assert abs(f[mask].sum()) < 1e-12
        with pytest.raises(NonZeroMean):
            DivSolver(g, mask).solve(f)

    def test_faces_off_region_exact_zero(self):
        rng = np.random.default_rng(3)
        region = random_region(16, rng)
        g = square_grid(16, region)
        f = np.where(region, rng.standard_normal(g.dims), 0.0)
        f[region] -= f[region].mean()
        u = DivSolver(g, region, "direct").solve(f)
        from perforated.bogovskii.grid import face_touches

        for a in range(2):
            assert np.all(u[a][face_touches(g, ~region, a)] == 0.0)
            boundary = np.zeros(g.face_shape(a), dtype=bool)
            idx = [slice(None)] * 2
            idx[a] = [0, -1]
            boundary[tuple(idx)] = True
            assert np.all(u[a][boundary] == 0.0)

    @given(st.integers(0, 10**6))
    @settings(max_examples=15, deadline=None)
    def test_adjoint_identity(self, seed):
        rng = np.random.default_rng(seed)
        region = random_region(12, rng, holes=2)
        g = square_grid(12, region)
        s = DivSolver(g, region, "direct")
        f = np.where(region, rng.standard_normal(g.dims), 0.0)
        f[region] -= f[region].mean()
        v = tuple(rng.standard_normal(g.face_shape(a)) for a in range(2))
        lhs = inner(s.solve(f), v)
        rhs = float(np.sum(f * s.solve_adjoint(v)))
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------------------
# cut-offs and layer means


@pytest.fixture(scope="module")
def scene():
    return random_scene(7, 128)


class TestCutoffs:
    def test_ranges(self, scene):
        for field_ in scene.cutoffs.chi + scene.cutoffs.zeta:
            for c in field_:
                assert c.min() >= 0.0 and c.max() <= 1.0

    def test_chi_values(self, scene):
        from perforated.bogovskii.grid import face_touches

        g = scene.grid
        for i, chi in enumerate(scene.cutoffs.chi):
            in_box = g.box_index == i
            inner_cells = in_box & ~g.layer
            for a in range(2):
                assert np.all(chi[a][face_touches(g, ~in_box, a)] == 0.0)
                from perforated.bogovskii.grid import face_within

                assert np.all(chi[a][face_within(g, inner_cells, a)] == 1.0)

    def test_zeta_values(self, scene):
        from perforated.bogovskii.grid import face_touches

        g = scene.grid
        for j, zeta in enumerate(scene.cutoffs.zeta):
            own = g.hole_index == j
            support = own | (g.annulus_index == j)
            for a in range(2):
                assert np.all(zeta[a][face_touches(g, own, a)] == 1.0)
                assert np.all(zeta[a][face_touches(g, ~support, a)] == 0.0)

    def test_gradient_scalings(self):
        for res in (96, 128, 192):
            sc = random_scene(1, res)
            p = sc.params
            for gchi in sc.cutoffs.grad_chi:
                assert 8 * p.N <= gchi * p.s <= 32 * p.N
            for gz, r in zip(sc.cutoffs.grad_zeta, sc.perf.radii):
                # zeta ramps from 1 to 0 over one radius; grid corners can steepen it
                assert gz * r <= 3.0


class TestLayerMean:
    def test_constant(self, scene):
        g = scene.grid
        u = tuple(np.full(g.face_shape(a), 2.5 - a) for a in range(2))
        np.testing.assert_allclose(layer_mean(g, u, 0), [2.5, 1.5], rtol=1e-14)

    def test_linear_field_gives_centroid(self, scene):
        g = scene.grid
        u = tuple(g.face_centers(a)[..., a] for a in range(2))
        cells = layer_cells(g, 0)
        centroid = g.cell_centers()[cells].mean(axis=0)
        np.testing.assert_allclose(layer_mean(g, u, 0), centroid, atol=1e-13)

    def test_checkerboard(self, scene):
        g = scene.grid
        u = tuple(np.indices(g.face_shape(a)).sum(axis=0) % 2 * 2.0 - 1.0 for a in range(2))
        np.testing.assert_allclose(layer_mean(g, u, 0), 0.0, atol=1e-15)

    def test_empty_layer(self, scene):
        with pytest.raises(ValueError):
            layer_mean(scene.grid, scene.grid.zero_field(), 999)


# ---------------------------------------------------------------------------
# restriction and the perforated solver


def global_field(scene, rng):
    return scene.global_solver().solve(mean_zero_field(scene, rng) * scene.grid.fluid + 0.0, check=False)


class TestRestriction:
    def test_identity_without_holes(self):
        perf = PerforatedDomain(StarDomain.box([1.0, 1.0]), 0.1, 4.0, np.zeros((0, 2)), np.zeros(0))
        sc = build_scene(perf, [], None, 32, method="direct")
        rng = np.random.default_rng(0)
        f = mean_zero_field(sc, rng)
        u = sc.global_solver().solve(f)
        out = restriction_apply(u, sc)
        assert all(np.array_equal(a, b) for a, b in zip(out, u))

    def test_exact_zero_on_hole_faces(self, scene):
        rng = np.random.default_rng(1)
        f = mean_zero_field(scene, rng)
        u = bogovskii_eps(f, scene)
        assert zero_trace_violations(scene, u) == 0
        assert divergence_residual(scene, u, f) <= 1e-10

    def test_mean_zero_local_sources(self, scene):
        rng = np.random.default_rng(2)
        from perforated.bogovskii.restriction import extend_by_zero

        u = scene.global_solver().solve(extend_by_zero(scene, mean_zero_field(scene, rng)))
        parts = restriction_apply(u, scene, parts=True)
        g = scene.grid
        for j, beta in enumerate(parts.beta):
            region = (g.annulus_index == j) & g.fluid
            w = divergence(g, beta)[region]
            assert abs(w.mean()) <= 1e-10 * max(np.sqrt(np.mean(w**2)), 1e-300)
        for i, b in enumerate(parts.b):
            region = (g.box_index == i) & g.fluid
            w = divergence(g, b)[region]
            assert abs(w.mean()) <= 1e-10 * max(np.sqrt(np.mean(w**2)), 1e-300)

    def test_drift_detected_for_fields_with_hole_flux(self, scene):
        # a field that is not divergence free inside the holes leaks flux
        rng = np.random.default_rng(3)
        g = scene.grid
        u = tuple(np.where(rng.random(g.face_shape(a)) < 0.5, 1.0, -1.0) for a in range(2))
        with pytest.raises(MeanDriftError):
            restriction_apply(u, scene)

    def test_linearity(self, scene):
        rng = np.random.default_rng(4)
        f, g_ = mean_zero_field(scene, rng), mean_zero_field(scene, rng)
        lhs = bogovskii_eps(2.0 * f - 3.0 * g_, scene)
        rhs = tuple(2.0 * a - 3.0 * b for a, b in zip(bogovskii_eps(f, scene), bogovskii_eps(g_, scene)))
        scale = max(np.abs(c).max() for c in rhs)
        for a, b in zip(lhs, rhs):
            np.testing.assert_allclose(a, b, atol=1e-10 * scale)

    def test_zero_rhs(self, scene):
        u = bogovskii_eps(np.zeros(scene.grid.dims), scene)
        assert all(np.all(c == 0) for c in u)

    def test_nonzero_mean_rejected(self, scene):
        with pytest.raises(NonZeroMean):
            bogovskii_eps(np.where(scene.grid.fluid, 1.0, 0.0), scene)

    def test_restriction_adjoint(self, scene):
        rng = np.random.default_rng(5)
        from perforated.bogovskii.restriction import extend_by_zero

        u = scene.global_solver().solve(extend_by_zero(scene, mean_zero_field(scene, rng)))
        v = tuple(rng.standard_normal(scene.grid.face_shape(a)) for a in range(2))
        lhs = inner(restriction_apply(u, scene), v)
        rhs = inner(u, restriction_adjoint(v, scene))
        assert lhs == pytest.approx(rhs, rel=1e-9)

    def test_full_adjoint(self, scene):
        rng = np.random.default_rng(6)
        f = mean_zero_field(scene, rng)
        v = tuple(rng.standard_normal(scene.grid.face_shape(a)) for a in range(2))
        lhs = inner(bogovskii_eps(f, scene), v)
        rhs = float(np.sum(f * bogovskii_eps_adjoint(v, scene)))
        assert lhs == pytest.approx(rhs, rel=1e-9)

    def test_naive_projection_breaks_divergence(self, scene):
        rng = np.random.default_rng(7)
        from perforated.bogovskii.restriction import extend_by_zero

        f = mean_zero_field(scene, rng)
        u = naive_projection(scene.global_solver().solve(extend_by_zero(scene, f)), scene)
        assert zero_trace_violations(scene, u) == 0
        assert divergence_residual(scene, u, f) > 1e-3

    def test_local_estimates_finite(self, scene):
        rng = np.random.default_rng(8)
        from perforated.bogovskii.restriction import extend_by_zero

        u = scene.global_solver().solve(extend_by_zero(scene, mean_zero_field(scene, rng)))
        est = local_estimates(scene, u)
        assert len(est["b"]) == len(scene.boxes) and len(est["beta"]) == len(scene.perf.radii)
        assert all(np.isfinite(est["b"])) and all(np.isfinite(est["beta"]))

    def test_tiny_scene_matches_dense(self):
        rng = np.random.default_rng(0)
        ref_scene = tiny_scene("dense")
        f = mean_zero_field(ref_scene, rng)
        ref = bogovskii_eps(f, ref_scene)
        for method in ("direct", "schur-cg"):
            u = bogovskii_eps(f, tiny_scene(method))
            for a in range(2):
                np.testing.assert_allclose(divergence(ref_scene.grid, u), divergence(ref_scene.grid, ref), atol=1e-10)
                np.testing.assert_allclose(u[a], ref[a], atol=1e-10)


# ---------------------------------------------------------------------------
# sweeps


def test_literal_budget():
    with pytest.raises(GridBudgetExceeded) as info:
        check_literal_budget([0.2, 0.07], 4.0, StarDomain.ball(1.0, 2))
    assert info.value.cells > 1e9
    check_literal_budget([0.9], 4.0, StarDomain.ball(1.0, 2))


def test_theory_factor():
    assert theory_factor(0.1, 2.0) == 2.0
    assert theory_factor(0.01, 4.0) == pytest.approx(1 + 0.01**-0.5)


def test_small_sweep(tmp_path):
    family = SurrogateFamily(resolution=128, eps_min=0.25, intensity=0.3)
    skipped = []
    rows = operator_norm_sweep(family, [0.35, 0.3], probes=3, power_iters=5, skipped=skipped)
    assert len(rows) + len(skipped) == 2
    for r in rows:
        assert r.div_residual <= 1e-7 and r.trace_violations == 0
        assert r.ratio > 0 and r.normalized_ratio == pytest.approx(r.ratio / 2)
        assert r.naive_ratio > 0
    write_sweep_csv(rows, tmp_path / "sweep.csv")
    head = (tmp_path / "sweep.csv").read_text().splitlines()[0]
    assert head.startswith("eps,q,ratio,normalized_ratio,probes,solver_iters")
    if len(rows) > 1:
        assert uniformity(rows) >= 1.0
