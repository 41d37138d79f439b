"""Masked staggered grids for perforated domains.

Scalars live at cell centers and component ``a`` of a vector field lives on
the faces normal to axis ``a``. Face ``k`` along axis ``a`` separates cells
``k-1`` and ``k``, so a component array has ``dims[a] + 1`` entries along
axis ``a``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

FLUID, HOLE, EXTERIOR = 0, 1, 2
CLASS_NAMES = {FLUID: "fluid", HOLE: "hole", EXTERIOR: "exterior"}


class UnresolvableHoles(ValueError):
    """The smallest hole is fewer than the required cells across."""

    def __init__(self, message: str, cells_across: float):
        super().__init__(message)
        self.cells_across = cells_across


class UnresolvableLayer(ValueError):
    """A box boundary layer or hole annulus is too thin for the grid."""


class ClearanceViolation(ValueError):
    """Rasterized holes or annuli reach into a boundary layer or leave their box."""


@dataclass
class MaskedGrid:
    """Uniform grid with per-cell classes and the index maps of a scene.

    ``hole_index``, ``box_index`` and ``annulus_index`` hold ``-1`` where a
    cell belongs to no hole, box or annulus; ``layer`` marks the boundary
    layer cells of each box.
    """

    origin: np.ndarray
    h: float
    dims: tuple
    cell_class: np.ndarray
    hole_index: np.ndarray = None
    box_index: np.ndarray = None
    annulus_index: np.ndarray = None
    layer: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.dims = tuple(int(n) for n in self.dims)
        self.cell_class = np.asarray(self.cell_class, dtype=np.int8)
        if self.cell_class.shape != self.dims:
            raise ValueError("cell_class shape must equal dims")
        for name in ("hole_index", "box_index", "annulus_index"):
            if getattr(self, name) is None:
                setattr(self, name, np.full(self.dims, -1, dtype=np.int64))
        if self.layer is None:
            self.layer = np.zeros(self.dims, dtype=bool)

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    def face_shape(self, a: int) -> tuple:
        s = list(self.dims)
        s[a] += 1
        return tuple(s)

    @property
    def n_faces(self) -> int:
        return sum(int(np.prod(self.face_shape(a))) for a in range(self.d))

    def cell_centers(self) -> np.ndarray:
        """Array of shape ``dims + (d,)``."""
        axes = [self.origin[k] + (np.arange(n) + 0.5) * self.h for k, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def face_centers(self, a: int) -> np.ndarray:
        axes = []
        for k, n in enumerate(self.dims):
            if k == a:
                axes.append(self.origin[k] + np.arange(n + 1) * self.h)
            else:
                axes.append(self.origin[k] + (np.arange(n) + 0.5) * self.h)
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @property
    def fluid(self) -> np.ndarray:
        return self.cell_class == FLUID

    @property
    def inside(self) -> np.ndarray:
        """Cells of ``D``: fluid or hole."""
        return self.cell_class != EXTERIOR

    def zero_field(self) -> tuple:
        return tuple(np.zeros(self.face_shape(a)) for a in range(self.d))

    def header(self) -> dict:
        return {
            "dims": list(self.dims),
            "h": self.h,
            "origin": self.origin.tolist(),
            "classes": {str(k): v for k, v in CLASS_NAMES.items()},
        }


def face_neighbours(grid: MaskedGrid, mask: np.ndarray, a: int) -> tuple:
    """Cell-mask values on both sides of every ``a``-face (outside counts as False)."""
    pad = [(0, 0)] * grid.d
    pad[a] = (1, 1)
    m = np.pad(mask, pad, constant_values=False)
    lo = [slice(None)] * grid.d
    hi = [slice(None)] * grid.d
    lo[a] = slice(0, -1)
    hi[a] = slice(1, None)
    return m[tuple(lo)], m[tuple(hi)]


def face_touches(grid: MaskedGrid, mask: np.ndarray, a: int) -> np.ndarray:
    """``a``-faces with at least one adjacent cell in ``mask``."""
    left, right = face_neighbours(grid, mask, a)
    return left | right


def face_within(grid: MaskedGrid, mask: np.ndarray, a: int) -> np.ndarray:
    """``a``-faces whose two adjacent cells are both in ``mask``."""
    left, right = face_neighbours(grid, mask, a)
    return left & right


def cell_average(grid: MaskedGrid, u: tuple) -> np.ndarray:
    """Cell-center interpolation of a face field, shape ``dims + (d,)``."""
    out = np.empty(grid.dims + (grid.d,))
    for a in range(grid.d):
        lo = [slice(None)] * grid.d
        hi = [slice(None)] * grid.d
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        out[..., a] = 0.5 * (u[a][tuple(lo)] + u[a][tuple(hi)])
    return out


def divergence(grid: MaskedGrid, u: tuple) -> np.ndarray:
    """Face-flux difference over ``h`` in every cell."""
    div = np.zeros(grid.dims)
    for a in range(grid.d):
        div += np.diff(u[a], axis=a)
    return div / grid.h


def grad_diffs(grid: MaskedGrid, u: tuple):
    """Neighbour differences over ``h`` of each component along each axis.

    Values beyond the array edge count as zero, matching the zero trace.
    """
    for a in range(grid.d):
        for b in range(grid.d):
            pad = [(0, 0)] * grid.d
            pad[b] = (1, 1)
            yield np.diff(np.pad(u[a], pad), axis=b) / grid.h


def grad_norm(grid: MaskedGrid, u: tuple, q: float = 2.0) -> float:
    """Discrete ``||grad u||_q`` with the cell volume ``h^d`` as weight."""
    total = 0.0
    for g in grad_diffs(grid, u):
        total += float(np.sum(np.abs(g) ** q))
    return (grid.h**grid.d * total) ** (1.0 / q)


def scalar_norm(grid: MaskedGrid, f: np.ndarray, q: float = 2.0) -> float:
    return (grid.h**grid.d * float(np.sum(np.abs(f) ** q))) ** (1.0 / q)


def field_norm(grid: MaskedGrid, u: tuple, q: float = 2.0) -> float:
    """``||u||_q`` with face values weighted by ``h^d``."""
    return (grid.h**grid.d * sum(float(np.sum(np.abs(c) ** q)) for c in u)) ** (1.0 / q)


def flatten(u: tuple) -> np.ndarray:
    return np.concatenate([c.ravel() for c in u])


def unflatten(grid: MaskedGrid, v: np.ndarray) -> tuple:
    out, k = [], 0
    for a in range(grid.d):
        n = int(np.prod(grid.face_shape(a)))
        out.append(v[k : k + n].reshape(grid.face_shape(a)).copy())
        k += n
    return tuple(out)


# ---------------------------------------------------------------------------
# rasterization


def rasterize(perf, boxes, resolution: int, params=None, layer_min_cells: float = 3.0, hole_min_cells: float = 3.0):
    """Classify cells of a grid covering the bounding box of ``perf.domain``.

    Parameters
    ----------
    perf : PerforatedDomain
    boxes : sequence of ClusterBox
        Boxes of ``perf``'s holes, as produced by the clusterer.
    resolution : int
        Cells along the longest side of the bounding box; the cell size is
        shared by all axes.
    params : ClusterParams, optional
        Needed when ``boxes`` is non-empty: the layer width is the
        clearance threshold ``s / (16 N)``.

    Raises
    ------
    UnresolvableHoles
        A hole is fewer than ``hole_min_cells`` cells across.
    UnresolvableLayer
        A box layer is thinner than ``layer_min_cells`` cells.
    ClearanceViolation
        A hole or its annulus is not inside the inner part of its box.
    """
    domain = perf.domain
    bb = domain.bounding_box()
    h = float(np.max(bb.sides)) / int(resolution)
    dims = tuple(int(math.ceil(s / h - 1e-9)) for s in bb.sides)
    origin = bb.lo_array
    grid = MaskedGrid(origin, h, dims, np.full(dims, EXTERIOR, dtype=np.int8))
    centers = grid.cell_centers()
    flat = centers.reshape(-1, grid.d)
    inside = domain.contains(flat).reshape(dims)
    grid.cell_class[inside] = FLUID

    holes_c = np.asarray(perf.centers, dtype=float).reshape(-1, grid.d)
    holes_r = np.asarray(perf.radii, dtype=float)
    if len(holes_r):
        across = 2 * holes_r.min() / h
        if across < hole_min_cells:
            raise UnresolvableHoles(
                f"smallest hole is {across:.2f} cells across, need {hole_min_cells}", cells_across=across
            )
    for j, (c, r) in enumerate(zip(holes_c, holes_r)):
        sl, pts = _patch(grid, centers, c, 2 * r)
        dist = np.linalg.norm(pts - c, axis=-1)
        hole = dist <= r
        ann = (dist > r) & (dist <= 2 * r)
        hi = grid.hole_index[sl]
        ai = grid.annulus_index[sl]
        if np.any(hi[hole | ann] >= 0) or np.any(ai[hole | ann] >= 0):
            raise ClearanceViolation(f"hole {j} or its annulus overlaps another hole's annulus")
        cls = grid.cell_class[sl]
        if np.any(cls[hole | ann] == EXTERIOR):
            raise ClearanceViolation(f"hole {j} or its annulus reaches outside the domain")
        hi[hole] = j
        ai[ann] = j
        cls[hole] = HOLE

    if len(boxes):
        if params is None:
            raise ValueError("params are required to rasterize boxes")
        width = params.clearance_threshold
        if width / h < layer_min_cells:
            raise UnresolvableLayer(f"box layer is {width / h:.2f} cells wide, need {layer_min_cells}")
        for i, b in enumerate(boxes):
            lo, hi_ = np.asarray(b.outer.lo), np.asarray(b.outer.hi)
            depth = np.min(np.minimum(centers - lo, hi_ - centers), axis=-1)
            in_box = depth > 0
            if np.any(grid.box_index[in_box] >= 0):
                raise ClearanceViolation(f"box {i} overlaps another box on the grid")
            if np.any(grid.cell_class[in_box] == EXTERIOR):
                raise ClearanceViolation(f"box {i} reaches outside the domain")
            grid.box_index[in_box] = i
            grid.layer[in_box & (depth < width)] = True
            members = np.asarray(b.members, dtype=np.int64)
            own = np.isin(grid.hole_index, members) | np.isin(grid.annulus_index, members)
            if np.any(own & ~(in_box & ~grid.layer)):
                raise ClearanceViolation(f"a hole of box {i} or its annulus reaches the boundary layer")
        if np.any((grid.hole_index >= 0) & (grid.box_index < 0)):
            raise ClearanceViolation("a hole lies outside every box")
    grid.meta = {"resolution": int(resolution), "holes": int(len(holes_r)), "boxes": int(len(boxes))}
    return grid


def _patch(grid: MaskedGrid, centers: np.ndarray, c: np.ndarray, reach: float):
    lo = np.floor((c - reach - grid.origin) / grid.h).astype(int) - 1
    hi = np.ceil((c + reach - grid.origin) / grid.h).astype(int) + 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array(grid.dims))
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    return sl, centers[sl]


# ---------------------------------------------------------------------------
# binary I/O


def write_grid_fields(path, grid: MaskedGrid, fields: dict) -> None:
    """Write ``<path>.bin`` (little-endian float64, concatenated) and ``<path>.json``.

    The header lists the grid geometry, the class codes and for each field
    its name, shape and offset in values.
    """
    header = grid.header()
    entries = []
    offset = 0
    arrays = [("cell_class", grid.cell_class.astype("<f8"))]
    for name, val in fields.items():
        if isinstance(val, tuple):
            for a, comp in enumerate(val):
                arrays.append((f"{name}[{a}]", np.asarray(comp, dtype="<f8")))
        else:
            arrays.append((name, np.asarray(val, dtype="<f8")))
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header["fields"] = entries
    header["dtype"] = "<f8"
    with open(f"{path}.bin", "wb") as fh:
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(f"{path}.json", "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_grid_fields(path) -> tuple:
    """Inverse of ``write_grid_fields``: ``(header, {name: array})``."""
    with open(f"{path}.json") as fh:
        header = json.load(fh)
    data = np.fromfile(f"{path}.bin", dtype=header.get("dtype", "<f8"))
    out = {}
    for e in header["fields"]:
        n = int(np.prod(e["shape"]))
        out[e["name"]] = data[e["offset"] : e["offset"] + n].reshape(e["shape"])
    return header, out
