"""The hole cut-off ``g = min(eps**-alpha dist(x, H), 1)`` and its W^{1,r} gap to 1.

Two representations are provided: a dense field on a MaskedGrid over ``D``
and a sparse lattice that stores only the cells within ``eps**alpha`` of a
hole (``g = 1`` everywhere else), which makes fine 3D lattices affordable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.stats import linregress

from .bogovskii.grid import EXTERIOR, FLUID, HOLE, MaskedGrid


class UnresolvableRamp(ValueError):
    """The grid puts fewer than 3 cells across the ramp width ``eps**alpha``."""


class InadmissibleExponent(ValueError):
    """``r`` violates the admissibility inequalities of the rate estimate."""


RAMP_MIN_CELLS = 3.0


def sigma_theory(r: float, alpha: float, d: int = 3) -> float:
    """Rate ``((d - r) alpha - d) / r``; ``((3 - r) alpha - 3)/r`` in 3D."""
    return ((d - r) * alpha - d) / r


def check_admissible(r: float, alpha: float, d: int = 3) -> None:
    """Raise InadmissibleExponent naming the violated inequality."""
    if not 1 < r < d:
        raise InadmissibleExponent(f"need 1 < r < {d}, got r={r}")
    if not (d - r) * alpha - d > 0:
        raise InadmissibleExponent(f"need ({d} - r) alpha - {d} > 0, got {(d - r) * alpha - d:g} for r={r}, alpha={alpha}")


@dataclass
class CutoffField:
    """Cut-off values on the cells of a grid or of a sparse lattice.

    ``values`` and ``grad`` (the per-cell gradient magnitude) hold the stored
    cells only; in sparse mode every cell not stored has ``g = 1`` and zero
    gradient. ``cell_volume`` is ``h**d``.
    """

    values: np.ndarray
    grad: np.ndarray
    h: float
    d: int
    eps: float
    alpha: float
    hole_cells: np.ndarray
    grid: MaskedGrid | None = None

    @property
    def ramp(self) -> float:
        return self.eps**self.alpha

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    def max_grad_ratio(self) -> float:
        """``max |grad g| * eps**alpha``; the continuum bound is 1."""
        return float(self.grad.max() * self.ramp) if self.grad.size else 0.0

    def grad_tolerance(self) -> float:
        return 1.0 + 3.0 * self.h / self.ramp


def _check_ramp(eps: float, alpha: float, h: float) -> None:
    if eps**alpha / h < RAMP_MIN_CELLS:
        raise UnresolvableRamp(f"ramp eps^alpha = {eps**alpha:.3g} is {eps**alpha / h:.2f} cells, need {RAMP_MIN_CELLS}")


def _ramp_values(x: np.ndarray, centers: np.ndarray, radii: np.ndarray, width: float, out: np.ndarray, reach: np.ndarray) -> None:
    """``out = min(out, clip(dist(x, ball_j) / width, 0, 1))`` over balls whose reach covers ``x``."""
    if len(centers) == 0 or len(x) == 0:
        return
    tree = cKDTree(x)
    for z, r, reach_j in zip(centers, radii, reach):
        idx = tree.query_ball_point(z, reach_j)
        if not idx:
            continue
        idx = np.asarray(idx)
        dist = np.linalg.norm(x[idx] - z, axis=-1) - r
        np.minimum.at(out, idx, np.clip(dist / width, 0.0, 1.0))


def build_g_eps(perf, grid: MaskedGrid) -> CutoffField:
    """Dense cut-off on every cell of ``grid`` (holes are data, not masked out).

    The distance to the hole union is exact: the minimum over the balls.
    """
    _check_ramp(perf.eps, perf.alpha, grid.h)
    width = perf.eps**perf.alpha
    x = grid.cell_centers().reshape(-1, grid.d)
    g = np.ones(len(x))
    radii = np.asarray(perf.radii, dtype=float)
    _ramp_values(x, perf.centers, radii, width, g, radii + width + grid.h)
    g = g.reshape(grid.dims)
    grads = np.gradient(g, grid.h) if grid.d > 1 else [np.gradient(g, grid.h)]
    grad = np.sqrt(sum(c**2 for c in grads))
    hole_cells = (g == 0.0) & _in_holes(x, perf).reshape(grid.dims)
    return CutoffField(g, grad, grid.h, grid.d, perf.eps, perf.alpha, hole_cells, grid)


def _in_holes(x: np.ndarray, perf) -> np.ndarray:
    out = np.zeros(len(x), dtype=bool)
    if len(perf.radii) == 0:
        return out
    tree = cKDTree(x)
    for z, r in zip(perf.centers, perf.radii):
        idx = tree.query_ball_point(z, r)
        out[idx] = True
    return out


def cutoff_grid(perf, cells_per_ramp: float = 6.0, max_cells: float = 2e7) -> MaskedGrid:
    """Dense grid over ``bbox(D)`` with ``h = eps**alpha / cells_per_ramp``."""
    bb = perf.domain.bounding_box()
    h = perf.eps**perf.alpha / cells_per_ramp
    dims = tuple(int(math.ceil(s / h)) for s in bb.sides)
    if float(np.prod(dims)) > max_cells:
        raise MemoryError(f"dense cut-off grid needs {float(np.prod(dims)):.3g} cells, limit {max_cells:.3g}")
    grid = MaskedGrid(bb.lo_array, h, dims, np.full(dims, FLUID, dtype=np.int8))
    x = grid.cell_centers().reshape(-1, grid.d)
    grid.cell_class[~perf.domain.contains(x).reshape(dims)] = EXTERIOR
    grid.cell_class[_in_holes(x, perf).reshape(dims)] = HOLE
    return grid


def build_g_eps_sparse(perf, cells_per_ramp: float = 6.0) -> CutoffField:
    """Cut-off on the lattice ``h (Z^d + 1/2)`` restricted to cells near holes.

    Stored cells are those within ``r_j + eps**alpha + 2h`` of some center
    ``z_j``, so every cell with ``g < 1`` has all lattice neighbours stored.
    Holes whose stored balls overlap are processed together; separate groups
    cannot influence each other.
    """
    eps, alpha, d = perf.eps, perf.alpha, perf.domain.d
    width = eps**alpha
    h = width / cells_per_ramp
    _check_ramp(eps, alpha, h)
    centers = np.asarray(perf.centers, dtype=float).reshape(-1, d)
    radii = np.asarray(perf.radii, dtype=float)
    if len(radii) == 0:
        empty = np.zeros(0)
        return CutoffField(empty, empty, h, d, eps, alpha, np.zeros(0, dtype=bool))
    reach = radii + width + 2 * h
    pairs = cKDTree(centers).query_pairs(2 * float(reach.max()), output_type="ndarray")
    pairs = pairs[np.linalg.norm(centers[pairs[:, 0]] - centers[pairs[:, 1]], axis=-1) <= reach[pairs[:, 0]] + reach[pairs[:, 1]]]
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(radii), len(radii)))
    _, label = connected_components(adj, directed=False)
    order = np.argsort(label, kind="stable")
    splits = np.flatnonzero(np.diff(label[order])) + 1
    values, grads, holes = [], [], []
    for group in np.split(order, splits):
        g, grad, x = _group_lattice(centers[group], radii[group], reach[group], width, h)
        inside = perf.domain.contains(x)
        values.append(g[inside])
        grads.append(grad[inside])
        holes.append(_in_balls(x[inside], centers[group], radii[group]))
    return CutoffField(np.concatenate(values), np.concatenate(grads), h, d, eps, alpha, np.concatenate(holes))


def _group_lattice(centers, radii, reach, width, h):
    """Cut-off values, central-difference gradients and cell centers near one hole group."""
    d = centers.shape[1]
    k_lo = np.floor((centers - reach[:, None]) / h - 0.5).astype(np.int64)
    k_hi = np.ceil((centers + reach[:, None]) / h - 0.5).astype(np.int64)
    base = k_lo.min(axis=0) - 1
    span = k_hi.max(axis=0) - base + 2
    strides = np.cumprod(np.concatenate([[1], span[::-1][:-1]]))[::-1]
    codes = []
    for lo, hi, z, rr in zip(k_lo, k_hi, centers, reach):
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        k = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        k = k[np.linalg.norm((k + 0.5) * h - z, axis=-1) <= rr]
        codes.append((k - base) @ strides)
    codes = np.unique(np.concatenate(codes))
    x = (_decode(codes, base, strides) + 0.5) * h
    g = np.ones(len(codes))
    for z, r in zip(centers, radii):
        g = np.minimum(g, np.clip((np.linalg.norm(x - z, axis=-1) - r) / width, 0.0, 1.0))
    # neighbours not stored have g = 1
    grad2 = np.zeros(len(codes))
    for a in range(d):
        nb = []
        for step in (1, -1):
            c = codes + step * strides[a]
            pos = np.clip(np.searchsorted(codes, c), 0, len(codes) - 1)
            nb.append(np.where(codes[pos] == c, g[pos], 1.0))
        grad2 += ((nb[0] - nb[1]) / (2 * h)) ** 2
    return g, np.sqrt(grad2), x


def _in_balls(x, centers, radii) -> np.ndarray:
    out = np.zeros(len(x), dtype=bool)
    for z, r in zip(centers, radii):
        out |= np.linalg.norm(x - z, axis=-1) <= r
    return out


def _decode(codes, base, strides):
    out = np.empty((len(codes), len(strides)), dtype=np.int64)
    rest = codes.copy()
    for a, s in enumerate(strides):
        out[:, a] = rest // s
        rest = rest % s
    return out + base


# ---------------------------------------------------------------------------
# norms and rates


def w1r_norm_gap(field: CutoffField, r: float, check: bool = True) -> float:
    """``(sum over cells of (|g - 1|^r + |grad g|^r) h^d)^(1/r)``.

    With ``check`` the exponent must satisfy the admissibility inequalities
    in the field's dimension.
    """
    if check:
        check_admissible(r, field.alpha, field.d)
    vals = field.values
    mask = field.grid.inside if field.grid is not None else slice(None)
    total = float(np.sum(np.abs(vals[mask] - 1.0) ** r) + np.sum(field.grad[mask] ** r))
    return (total * field.cell_volume) ** (1.0 / r)


def hole_volume_part(field: CutoffField, r: float) -> float:
    """``(sum over hole cells of |g - 1|^r h^d)^(1/r)``, the hole-volume share of the gap."""
    return (float(np.count_nonzero(field.hole_cells)) * field.cell_volume) ** (1.0 / r)


@dataclass
class RateFit:
    slope: float
    stderr: float
    intercept: float


def rate_fit(results) -> RateFit:
    """Least-squares slope of ``log gap`` against ``log eps`` from ``(eps, gap)`` pairs."""
    results = list(results)
    if len(results) < 3:
        raise ValueError(f"need at least 3 ladder points, got {len(results)}")
    eps = np.array([e for e, _ in results], dtype=float)
    gap = np.array([g for _, g in results], dtype=float)
    if np.any(gap <= 0):
        raise ValueError("gaps must be positive for a log-log fit")
    if np.ptp(np.log(gap)) == 0:
        return RateFit(0.0, 0.0, float(np.log(gap[0])))
    fit = linregress(np.log(eps), np.log(gap))
    return RateFit(float(fit.slope), float(fit.stderr), float(fit.intercept))


@dataclass
class RateRow:
    eps: float
    gap: float
    sigma_theory: float
    holes: int
    h: float
    hole_part: float
    max_grad_ratio: float
    grad_tolerance: float


RATE_COLUMNS = ("eps", "gap", "sigma_theory", "holes", "h", "hole_part", "max_grad_ratio", "grad_tolerance")


def rate_ladder(perforations, r: float, cells_per_ramp: float = 6.0) -> list:
    """Gap rows for a list of perforated domains (one per eps) on sparse lattices."""
    rows = []
    for perf in perforations:
        check_admissible(r, perf.alpha, perf.domain.d)
        f = build_g_eps_sparse(perf, cells_per_ramp)
        rows.append(
            RateRow(
                float(perf.eps),
                w1r_norm_gap(f, r),
                sigma_theory(r, perf.alpha, perf.domain.d),
                len(perf.radii),
                f.h,
                hole_volume_part(f, r),
                f.max_grad_ratio(),
                f.grad_tolerance(),
            )
        )
    return rows


def write_rate_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RATE_COLUMNS)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(row, c) for c in RATE_COLUMNS)])
