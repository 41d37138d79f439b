"""Restriction of divergence solutions from ``D`` to the perforated domain.

``R(u) = u - sum_j (beta_j - L_j div beta_j) - sum_i (b_i - L_i div b_i)``
with ``b_i = chi_i (u - m_i)``, ``beta_j = zeta_j m_i`` and ``m_i`` the mean
of ``u`` over the boundary layer of box ``i``. ``L_i`` and ``L_j`` are
minimal-gradient solvers on the perforated box and on the hole annulus.
Every map here is linear and has an explicit adjoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import (
    MaskedGrid,
    divergence,
    face_touches,
    grad_norm,
    rasterize,
)
from .solver import DivSolver

DRIFT_TOL = 1e-10


class MeanDriftError(RuntimeError):
    """A local right-hand side is further from mean zero than rounding explains."""


# ---------------------------------------------------------------------------
# cut-offs


@dataclass
class CutoffPair:
    """Face cut-offs per box (``chi``) and per hole (``zeta``).

    Each entry is a tuple of face arrays, one per component. ``grad_chi`` and
    ``grad_zeta`` hold the measured sup-norms of the discrete gradients.
    """

    chi: list
    zeta: list
    grad_chi: list = field(default_factory=list)
    grad_zeta: list = field(default_factory=list)


def _face_depth(grid: MaskedGrid, a: int, lo, hi) -> np.ndarray:
    x = grid.face_centers(a)
    return np.min(np.minimum(x - np.asarray(lo), np.asarray(hi) - x), axis=-1)


def _sup_grad(grid: MaskedGrid, field_: tuple) -> float:
    best = 0.0
    for comp in field_:
        for b in range(grid.d):
            pad = [(0, 0)] * grid.d
            pad[b] = (1, 1)
            best = max(best, float(np.max(np.abs(np.diff(np.pad(comp, pad), axis=b)))) / grid.h)
    return best


def build_cutoffs(boxes, perf, grid: MaskedGrid, width: float) -> CutoffPair:
    """Linear ramps: ``chi_i`` over the layer of width ``width``, ``zeta_j`` over the annulus.

    ``chi_i`` is 0 on faces touching cells outside box ``i`` and 1 on faces
    touching its holes; ``zeta_j`` is 0 on faces touching cells outside the
    hole or its annulus and 1 on faces touching the hole.
    """
    chi, zeta, gchi, gzeta = [], [], [], []
    hole = grid.hole_index >= 0
    for i, b in enumerate(boxes):
        in_box = grid.box_index == i
        comps = []
        for a in range(grid.d):
            c = np.clip(_face_depth(grid, a, b.outer.lo, b.outer.hi) / width, 0.0, 1.0)
            c[face_touches(grid, ~in_box, a)] = 0.0
            c[face_touches(grid, hole & in_box, a)] = 1.0
            comps.append(c)
        chi.append(tuple(comps))
        gchi.append(_sup_grad(grid, chi[-1]))
    centers = np.asarray(perf.centers, dtype=float).reshape(-1, grid.d)
    for j, (z, r) in enumerate(zip(centers, np.asarray(perf.radii, dtype=float))):
        own = grid.hole_index == j
        support = own | (grid.annulus_index == j)
        comps = []
        for a in range(grid.d):
            dist = np.linalg.norm(grid.face_centers(a) - z, axis=-1)
            c = np.clip((2 * r - dist) / r, 0.0, 1.0)
            c[face_touches(grid, ~support, a)] = 0.0
            c[face_touches(grid, own, a)] = 1.0
            comps.append(c)
        zeta.append(tuple(comps))
        gzeta.append(_sup_grad(grid, zeta[-1]))
    return CutoffPair(chi, zeta, gchi, gzeta)


# ---------------------------------------------------------------------------
# layer means


def layer_cells(grid: MaskedGrid, box_index: int) -> np.ndarray:
    return grid.layer & (grid.box_index == box_index) & grid.fluid


def layer_mean(grid: MaskedGrid, u: tuple, box_index: int) -> np.ndarray:
    """Average of cell-interpolated velocities over the layer cells of a box."""
    cells = layer_cells(grid, box_index)
    n = int(cells.sum())
    if n == 0:
        raise ValueError(f"box {box_index} has an empty boundary layer")
    return _mean_on(grid, u, cells, n)


def _mean_on(grid, u, cells, n) -> np.ndarray:
    out = np.empty(grid.d)
    for a in range(grid.d):
        lo = [slice(None)] * grid.d
        hi = [slice(None)] * grid.d
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        avg = 0.5 * (u[a][tuple(lo)] + u[a][tuple(hi)])
        out[a] = float(avg[cells].sum()) / n
    return out


def _mean_adjoint(grid, g, cells, n) -> tuple:
    out = []
    for a in range(grid.d):
        comp = np.zeros(grid.face_shape(a))
        lo = [slice(None)] * grid.d
        hi = [slice(None)] * grid.d
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        w = np.where(cells, 0.5 * g[a] / n, 0.0)
        comp[tuple(lo)] += w
        comp[tuple(hi)] += w
        out.append(comp)
    return tuple(out)


def _div_adjoint(grid: MaskedGrid, w: np.ndarray) -> tuple:
    """Adjoint of ``divergence`` restricted to cells where ``w`` is given."""
    out = []
    for a in range(grid.d):
        pad = [(0, 0)] * grid.d
        pad[a] = (1, 1)
        p = np.pad(w, pad)
        out.append(-np.diff(p, axis=a) / grid.h)
    return tuple(out)


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    """A rasterized perforated domain with its boxes, cut-offs and solvers."""

    perf: object
    boxes: list
    params: object
    grid: MaskedGrid
    cutoffs: CutoffPair
    method: str = "schur-cg"
    tol: float = 1e-12
    _global: DivSolver = None
    _box_solvers: list = None
    _hole_solvers: list = None
    hole_box: np.ndarray = None

    @property
    def eps(self) -> float:
        return float(self.perf.eps)

    def global_solver(self) -> DivSolver:
        if self._global is None:
            self._global = DivSolver(self.grid, self.grid.inside, self.method, self.tol)
        return self._global

    def box_solver(self, i: int) -> DivSolver:
        if self._box_solvers is None:
            self._box_solvers = [None] * len(self.boxes)
        if self._box_solvers[i] is None:
            region = (self.grid.box_index == i) & self.grid.fluid
            self._box_solvers[i] = DivSolver(self.grid, region, self.method, self.tol)
        return self._box_solvers[i]

    def hole_solver(self, j: int) -> DivSolver:
        if self._hole_solvers is None:
            self._hole_solvers = [None] * len(self.cutoffs.zeta)
        if self._hole_solvers[j] is None:
            region = (self.grid.annulus_index == j) & self.grid.fluid
            self._hole_solvers[j] = DivSolver(self.grid, region, self.method, self.tol)
        return self._hole_solvers[j]


def build_scene(perf, boxes, params, resolution: int, method: str = "schur-cg", tol: float = 1e-12, layer_min_cells: float = 3.0) -> Scene:
    """Rasterize ``perf`` with its cluster boxes and prepare the cut-offs."""
    boxes = list(boxes)
    grid = rasterize(perf, boxes, resolution, params, layer_min_cells=layer_min_cells)
    width = params.clearance_threshold if params is not None else math.inf
    cut = build_cutoffs(boxes, perf, grid, width)
    hole_box = np.full(len(perf.radii), -1, dtype=np.int64)
    for i, b in enumerate(boxes):
        hole_box[np.asarray(b.members, dtype=np.int64)] = i
    return Scene(perf, boxes, params, grid, cut, method, tol, hole_box=hole_box)


def extend_by_zero(scene: Scene, f: np.ndarray) -> np.ndarray:
    """Zero extension into holes and outside ``D``."""
    out = np.where(scene.grid.fluid, f, 0.0)
    return out


def _project_mean(w: np.ndarray, region: np.ndarray, check: bool) -> np.ndarray:
    vals = w[region]
    if vals.size == 0:
        return w
    mean = float(vals.mean())
    norm = math.sqrt(float(np.mean(vals**2)))
    if check and abs(mean) > DRIFT_TOL * max(norm, np.finfo(float).tiny):
        raise MeanDriftError(f"local right-hand side has mean {mean:.3e}, norm {norm:.3e}")
    out = np.where(region, w - mean, 0.0)
    return out


# ---------------------------------------------------------------------------
# restriction


@dataclass
class RestrictionParts:
    """Intermediate fields of one restriction, for diagnostics."""

    means: list
    b: list
    beta: list
    box_corr: list
    hole_corr: list
    result: tuple


def restriction_apply(u: tuple, scene: Scene, parts: bool = False, check: bool = True):
    """Apply ``R`` to a face field ``u`` vanishing outside ``D``.

    The result is exactly zero on faces touching holes or exterior cells and
    has the divergence of ``u`` on fluid cells. With ``parts=True`` the
    intermediate fields are returned as RestrictionParts.
    """
    g = scene.grid
    cut = scene.cutoffs
    means = [layer_mean(g, u, i) for i in range(len(scene.boxes))]
    beta_total = [np.zeros(g.face_shape(a)) for a in range(g.d)]
    b_total = [np.zeros(g.face_shape(a)) for a in range(g.d)]
    corr_total = [np.zeros(g.face_shape(a)) for a in range(g.d)]
    bs, betas, bcs, hcs = [], [], [], []
    for j, zeta in enumerate(cut.zeta):
        i = int(scene.hole_box[j])
        m = means[i] if i >= 0 else np.zeros(g.d)
        beta = tuple(zeta[a] * m[a] for a in range(g.d))
        region = (g.annulus_index == j) & g.fluid
        rhs = _project_mean(divergence(g, beta), region, check)
        corr = scene.hole_solver(j).solve(rhs, check=False)
        for a in range(g.d):
            beta_total[a] += beta[a]
            corr_total[a] += corr[a]
        if parts:
            betas.append(beta)
            hcs.append(corr)
    for i, chi in enumerate(cut.chi):
        m = means[i]
        b = tuple(chi[a] * (u[a] - m[a]) for a in range(g.d))
        region = (g.box_index == i) & g.fluid
        rhs = _project_mean(divergence(g, b), region, check)
        corr = scene.box_solver(i).solve(rhs, check=False)
        for a in range(g.d):
            b_total[a] += b[a]
            corr_total[a] += corr[a]
        if parts:
            bs.append(b)
            bcs.append(corr)
    # the hole faces cancel exactly in (u - beta) - b; corrections vanish there
    result = tuple((u[a] - beta_total[a]) - b_total[a] + corr_total[a] for a in range(g.d))
    if parts:
        return RestrictionParts(means, bs, betas, bcs, hcs, result)
    return result


def restriction_adjoint(v: tuple, scene: Scene) -> tuple:
    """Adjoint of ``restriction_apply`` with respect to the face inner product."""
    g = scene.grid
    cut = scene.cutoffs
    out = [v[a].copy() for a in range(g.d)]
    mean_grad = [np.zeros(g.d) for _ in scene.boxes]
    for j, zeta in enumerate(cut.zeta):
        i = int(scene.hole_box[j])
        region = (g.annulus_index == j) & g.fluid
        w = _project_mean(scene.hole_solver(j).solve_adjoint(v), region, check=False)
        dw = _div_adjoint(g, w)
        if i >= 0:
            for a in range(g.d):
                # d/dm of <zeta m, -v + D^T w>
                mean_grad[i][a] += float(np.sum(zeta[a] * (dw[a] - v[a])))
    for i, chi in enumerate(cut.chi):
        region = (g.box_index == i) & g.fluid
        w = _project_mean(scene.box_solver(i).solve_adjoint(v), region, check=False)
        dw = _div_adjoint(g, w)
        for a in range(g.d):
            t = chi[a] * (dw[a] - v[a])
            out[a] += t
            mean_grad[i][a] -= float(np.sum(t))
    for i in range(len(scene.boxes)):
        cells = layer_cells(g, i)
        adj = _mean_adjoint(g, mean_grad[i], cells, int(cells.sum()))
        for a in range(g.d):
            out[a] += adj[a]
    return tuple(out)


def bogovskii_eps(f: np.ndarray, scene: Scene, check: bool = True) -> tuple:
    """``R(B_D(f~))``: divergence ``f`` on fluid cells, zero on holes and outside ``D``."""
    f_ext = extend_by_zero(scene, np.asarray(f, dtype=float))
    u = scene.global_solver().solve(f_ext, check=check)
    return restriction_apply(u, scene, check=check)


def bogovskii_eps_adjoint(v: tuple, scene: Scene) -> np.ndarray:
    w = scene.global_solver().solve_adjoint(restriction_adjoint(v, scene))
    return extend_by_zero(scene, w)


def naive_projection(u: tuple, scene: Scene) -> tuple:
    """Zero every face touching a hole: the control that skips the correctors."""
    hole = scene.grid.hole_index >= 0
    return tuple(np.where(face_touches(scene.grid, hole, a), 0.0, u[a]) for a in range(scene.grid.d))


# ---------------------------------------------------------------------------
# checks


def zero_trace_violations(scene: Scene, u: tuple) -> int:
    """Number of non-zero values on faces touching hole or exterior cells."""
    bad = ~scene.grid.fluid
    return int(sum(np.count_nonzero(u[a][face_touches(scene.grid, bad, a)]) for a in range(scene.grid.d)))


def divergence_residual(scene: Scene, u: tuple, f: np.ndarray) -> float:
    """``max |div u - f| / max |f|`` over fluid cells."""
    fl = scene.grid.fluid
    r = divergence(scene.grid, u)[fl] - np.asarray(f)[fl]
    scale = float(np.max(np.abs(np.asarray(f)[fl]))) or 1.0
    return float(np.max(np.abs(r))) / scale


def local_estimates(scene: Scene, u: tuple, q: float = 2.0) -> dict:
    """Ratios behind the local bounds on ``b_i`` and ``beta_j``.

    ``b``: ``||grad b_i||_q / ||grad u||_{q, layer_i}``;
    ``beta``: ``||grad beta_j||_q / (eps^((2/q - 1) alpha) ||u||_{q, layer_i})``.
    """
    g = scene.grid
    parts = restriction_apply(u, scene, parts=True, check=False)
    out = {"b": [], "beta": []}
    for i, b in enumerate(parts.b):
        cells = layer_cells(g, i)
        masked = tuple(np.where(face_touches(g, cells, a), u[a], 0.0) for a in range(g.d))
        denom = grad_norm(g, masked, q)
        out["b"].append(grad_norm(g, b, q) / denom if denom > 0 else math.nan)
    alpha = scene.perf.alpha
    for j, beta in enumerate(parts.beta):
        i = int(scene.hole_box[j])
        cells = layer_cells(g, i)
        vals = np.concatenate([u[a][face_touches(g, cells, a)] for a in range(g.d)])
        denom = scene.eps ** ((2 / q - 1) * alpha) * (g.h**g.d * float(np.sum(np.abs(vals) ** q))) ** (1 / q)
        out["beta"].append(grad_norm(g, beta, q) / denom if denom > 0 else math.nan)
    return out
