"""Operator-norm sweeps of the perforated divergence solver over an eps ladder.

The literal hole radii ``eps**alpha r`` are far below any affordable grid at
the eps values of interest, so sweeps run on a surrogate family: hole
centers ``eps z_j`` come from one master realization, while the hole radius
and the grid are fixed in cells and the cluster cube is proportional to
``eps``. The hole count grows like ``eps**-d`` while the contents of a
typical box stay the same.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from ..clusterer import ClusterParams, EpsilonTooLarge, build_cluster_boxes
from ..geometry import Box, StarDomain
from ..sampler import PerforatedDomain, ProcessParams, ResourceError, master_window, sample_marked_ppp
from .grid import grad_diffs, grad_norm, scalar_norm
from .restriction import (
    Scene,
    bogovskii_eps,
    bogovskii_eps_adjoint,
    build_scene,
    extend_by_zero,
    local_estimates,
    divergence_residual,
    naive_projection,
    zero_trace_violations,
)

SWEEP_COLUMNS = ("eps", "q", "ratio", "normalized_ratio", "probes", "solver_iters", "holes", "boxes", "naive_ratio", "naive_normalized_ratio", "k_b", "k_beta", "div_residual", "trace_violations")

# literal grids larger than this are refused
MAX_LITERAL_CELLS = 5e7


class GridBudgetExceeded(ResourceError):
    """Resolving the literal hole radii needs more cells than allowed."""

    def __init__(self, message: str, cells: float):
        super().__init__(message)
        self.cells = cells


def literal_grid_cells(eps: float, alpha: float, domain: StarDomain, r_min: float = 1.0, hole_min_cells: float = 3.0) -> float:
    """Cells needed to put ``hole_min_cells`` across the smallest literal hole."""
    h = 2 * eps**alpha * r_min / hole_min_cells
    return float(np.prod(np.ceil(domain.bounding_box().sides / h)))


def check_literal_budget(eps_ladder, alpha: float, domain: StarDomain, max_cells: float = MAX_LITERAL_CELLS) -> None:
    """Raise GridBudgetExceeded if any literal scene of the ladder is unaffordable."""
    for eps in eps_ladder:
        cells = literal_grid_cells(eps, alpha, domain)
        if cells > max_cells:
            raise GridBudgetExceeded(
                f"eps={eps}: literal holes need {cells:.3g} cells, budget is {max_cells:.3g}", cells=cells
            )


# ---------------------------------------------------------------------------
# surrogate scenes


@dataclass(frozen=True)
class SurrogateFamily:
    """Resolution-limited scene family sharing one master realization.

    Hole radius is ``hole_cells * h`` independent of ``eps``. Cluster cubes
    are ``cube_ratio * eps`` wide, so the expected number of centers per cube
    does not depend on ``eps``. Centers closer than ``4 rho + 2 h`` are
    thinned so annuli never share a cell.
    """

    intensity: float = 0.06
    seed: int = 0
    radius: float = 1.0
    resolution: int = 512
    hole_cells: float = 1.5
    cube_ratio: float = 1.5
    N: int = 12
    alpha: float = 4.0
    kappa: float = 1.5
    eps_min: float = 0.05

    @property
    def domain(self) -> StarDomain:
        return StarDomain.ball(self.radius, 2)

    @property
    def h(self) -> float:
        return 2 * self.radius / self.resolution

    @property
    def rho(self) -> float:
        return self.hole_cells * self.h

    def params(self, eps: float) -> ClusterParams:
        delta = (self.alpha - 2) / 2
        p = ClusterParams(eps, delta, self.N, self.kappa, self.alpha)
        return replace(p, scale=2 * self.N * self.cube(eps))

    def cube(self, eps: float) -> float:
        return self.cube_ratio * eps

    def to_dict(self) -> dict:
        return asdict(self)


def _thin(points: np.ndarray, min_dist: float) -> np.ndarray:
    """Greedy thinning in index order: keep a point unless an earlier kept one is too close."""
    if len(points) < 2:
        return np.arange(len(points))
    pairs = cKDTree(points).query_pairs(min_dist, output_type="ndarray")
    neighbours = [[] for _ in range(len(points))]
    for a, b in pairs:
        neighbours[max(a, b)].append(min(a, b))
    kept = np.zeros(len(points), dtype=bool)
    for j in range(len(points)):
        kept[j] = not any(kept[k] for k in neighbours[j])
    return np.flatnonzero(kept)


def _box_inside(box: Box, domain: StarDomain, margin: float) -> bool:
    lo, hi = box.lo_array, box.hi_array
    corners = np.array(np.meshgrid(*zip(lo, hi), indexing="ij")).reshape(len(lo), -1).T
    return bool(np.all(domain.boundary_distance(corners) > margin))


def surrogate_perforation(eps: float, family: SurrogateFamily):
    """Holes and cluster boxes of the surrogate scene at ``eps``."""
    domain = family.domain
    sample = sample_marked_ppp(ProcessParams(family.intensity, seed=family.seed), master_window(domain, family.eps_min))
    pts = eps * sample.z
    margin = max(eps, 2 * family.cube(eps))
    pts = pts[domain.boundary_distance(pts) > margin] if len(pts) else pts.reshape(0, 2)
    pts = pts[_thin(pts, 4 * family.rho + 2 * family.h)]
    params = family.params(eps)
    # drop clusters whose inflated box leaves D, then re-cluster
    while True:
        boxes = build_cluster_boxes(pts, params)
        bad = [b for b in boxes if not _box_inside(b.outer, domain, family.h)]
        if not bad:
            break
        drop = np.concatenate([np.asarray(b.members) for b in bad])
        pts = np.delete(pts, drop, axis=0)
    perf = PerforatedDomain(domain, eps, family.alpha, pts, np.full(len(pts), family.rho))
    return perf, boxes, params


def surrogate_scene(eps: float, family: SurrogateFamily, method: str = "direct", tol: float = 1e-12, global_solver=None) -> Scene:
    perf, boxes, params = surrogate_perforation(eps, family)
    scene = build_scene(perf, boxes, params, family.resolution, method=method, tol=tol)
    if global_solver is not None:
        scene._global = global_solver
    return scene


# ---------------------------------------------------------------------------
# norm estimation


def grad_energy_apply(grid, u: tuple) -> tuple:
    """Gradient of ``0.5 ||grad u||_2^2`` with respect to the face values."""
    out = []
    gen = grad_diffs(grid, u)
    for a in range(grid.d):
        acc = np.zeros(grid.face_shape(a))
        for b in range(grid.d):
            g = next(gen)
            acc -= np.diff(g, axis=b) / grid.h
        out.append(grid.h**grid.d * acc)
    return tuple(out)


def _mean_zero(f: np.ndarray, fluid: np.ndarray) -> np.ndarray:
    out = np.where(fluid, f, 0.0)
    out[fluid] -= out[fluid].mean()
    return out


@dataclass
class NormEstimate:
    ratio: float
    probe_ratio: float
    power_ratio: float
    iterations: int
    top_probe: np.ndarray


def estimate_operator_norm(apply, adjoint, scene: Scene, q: float = 2.0, probes: int = 32, power_iters: int = 40, rtol: float = 1e-4, seed: int = 0) -> NormEstimate:
    """Lower estimate of ``sup ||grad T f||_q / ||f||_q`` over mean-zero ``f``.

    Random probes give one estimate; power iteration on ``T* grad* grad T``
    (the q=2 normal operator) started from the best probe gives another.
    """
    g = scene.grid
    fluid = g.fluid
    rng = np.random.default_rng(seed)
    best, best_f = 0.0, None
    for _ in range(probes):
        f = _mean_zero(rng.standard_normal(g.dims), fluid)
        r = grad_norm(g, apply(f), q) / scalar_norm(g, f, q)
        if r > best:
            best, best_f = r, f
    f = best_f / scalar_norm(g, best_f)
    lam_old, it = 0.0, 0
    for it in range(1, power_iters + 1):
        w = adjoint(grad_energy_apply(g, apply(f))) / g.h**g.d
        w = _mean_zero(w, fluid)
        lam = float(np.sum(w * f))
        f = w / scalar_norm(g, w)
        if abs(lam - lam_old) <= rtol * abs(lam):
            break
        lam_old = lam
    power = grad_norm(g, apply(f), q) / scalar_norm(g, f, q)
    top = f if power >= best else best_f
    return NormEstimate(max(best, power), best, power, it, top)


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepRow:
    eps: float
    q: float
    ratio: float
    normalized_ratio: float
    probes: int
    solver_iters: int
    holes: int
    boxes: int
    naive_ratio: float = math.nan
    naive_normalized_ratio: float = math.nan
    k_b: float = math.nan
    k_beta: float = math.nan
    div_residual: float = math.nan
    trace_violations: int = 0


def theory_factor(eps: float, q: float) -> float:
    return 1.0 + eps ** (2.0 / q - 1.0)


def operator_norm_sweep(family: SurrogateFamily, eps_ladder, q: float = 2.0, probes: int = 32, power_iters: int = 40, naive: bool = True, seed: int = 0, skipped: list | None = None) -> list:
    """Norm table of the perforated solver (and optionally the naive control) per eps.

    ``solver_iters`` counts power iterations of the perforated operator. When
    ``skipped`` is a list, scales whose clustering raises EpsilonTooLarge are
    recorded there and the sweep continues; otherwise the error propagates.
    """
    rows = []
    shared = None
    for eps in eps_ladder:
        try:
            scene = surrogate_scene(eps, family, global_solver=shared)
        except EpsilonTooLarge as exc:
            if skipped is None:
                raise
            skipped.append({"eps": float(eps), "error": str(exc)})
            continue
        shared = scene.global_solver()

        def apply(f, scene=scene):
            return bogovskii_eps(f, scene, check=False)

        def adjoint(v, scene=scene):
            return bogovskii_eps_adjoint(v, scene)

        est = estimate_operator_norm(apply, adjoint, scene, q, probes, power_iters, seed=seed)
        factor = theory_factor(eps, q)
        row = SweepRow(
            float(eps), float(q), est.ratio, est.ratio / factor, probes, est.iterations,
            len(scene.perf.radii), len(scene.boxes),
        )
        out = bogovskii_eps(est.top_probe, scene)
        row.div_residual = divergence_residual(scene, out, est.top_probe)
        row.trace_violations = zero_trace_violations(scene, out)
        if len(scene.boxes):
            u = scene.global_solver().solve(extend_by_zero(scene, est.top_probe), check=False)
            loc = local_estimates(scene, u, q)
            row.k_b = float(np.nanmax(loc["b"])) if loc["b"] else math.nan
            row.k_beta = float(np.nanmax(loc["beta"])) if loc["beta"] else math.nan
        if naive:

            def napply(f, scene=scene):
                return naive_projection(scene.global_solver().solve(extend_by_zero(scene, f), check=False), scene)

            def nadjoint(v, scene=scene):
                return extend_by_zero(scene, scene.global_solver().solve_adjoint(naive_projection(v, scene)))

            nest = estimate_operator_norm(napply, nadjoint, scene, q, probes, power_iters, seed=seed)
            row.naive_ratio = nest.ratio
            row.naive_normalized_ratio = nest.ratio / factor
        rows.append(row)
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c) for c in SWEEP_COLUMNS])


def uniformity(rows, column: str = "normalized_ratio") -> float:
    """Max over min of a sweep column."""
    vals = np.array([getattr(r, column) for r in rows], dtype=float)
    return float(vals.max() / vals.min())
