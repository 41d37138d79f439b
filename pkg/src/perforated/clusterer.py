"""
Grid-cube box growing and merging with separation guarantees.

Points are first binned into half-open cubes ``[k l, (k+1) l)`` of side
``l = s / (2N)`` where ``s = eps**(1+delta)``. Boxes whose closures touch are
replaced by their bounding box until no two boxes touch; each final box is
then inflated by ``s / (8N)``.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import Box

REL_TOL = 1e-12


class EpsilonTooLarge(RuntimeError):
    """A merged box would hold more than ``N`` points.

    The realization is outside the regime ``eps <= eps_0(omega)``; sweeps
    record it and move on to a smaller ``eps``.
    """

    def __init__(self, message: str, members=None, count: int = 0, capacity: int = 0):
        super().__init__(message)
        self.members = np.asarray(members if members is not None else [], dtype=np.int64)
        self.count = int(count)
        self.capacity = int(capacity)


def n_of_delta(delta: float, d: int = 3) -> int:
    """Box capacity ``2**d * (2 + ceil(1/delta))``."""
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    return 2**d * (2 + math.ceil(1.0 / delta - 1e-12))


def delta_of_alpha(alpha: float, d: int = 3) -> float:
    """``(alpha - d) / d``; equals ``(alpha - 3)/3`` in three dimensions."""
    return (alpha - d) / d


@dataclass(frozen=True)
class ClusterParams:
    """Scale, exponents and capacity of the box construction.

    ``scale`` defaults to ``eps**(1 + delta)``; passing it explicitly decouples
    the box size from ``eps`` (used by resolution-limited scenes).
    """

    eps: float
    delta: float
    N: int
    kappa: float
    alpha: float | None = None
    scale: float | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if int(self.N) < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.alpha is not None:
            lo, hi = max(1.0, self.delta), self.alpha - 2
            if not lo < self.kappa < hi:
                raise ValueError(f"kappa={self.kappa} must lie in ({lo}, {hi})")
        elif not self.kappa > max(1.0, self.delta):
            raise ValueError(f"kappa={self.kappa} must exceed max(1, delta)")
        if self.scale is not None and not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    @classmethod
    def from_alpha(cls, eps: float, alpha: float, d: int = 3, kappa: float | None = None, N: int | None = None):
        delta = delta_of_alpha(alpha, d)
        if kappa is None:
            kappa = 0.5 * (max(1.0, delta) + alpha - 2)
        return cls(eps, delta, N if N is not None else n_of_delta(delta, d), kappa, alpha)

    @property
    def s(self) -> float:
        return self.scale if self.scale is not None else self.eps ** (1 + self.delta)

    @property
    def cube(self) -> float:
        return self.s / (2 * self.N)

    @property
    def inflation(self) -> float:
        return self.s / (8 * self.N)

    @property
    def clearance_threshold(self) -> float:
        return self.s / (16 * self.N)

    @property
    def separation_threshold(self) -> float:
        return self.s / (4 * self.N)

    @property
    def ball_radius(self) -> float:
        return self.eps ** (1 + self.kappa)

    def cover_precondition(self) -> bool:
        """``eps**(1+kappa) <= s / (16 N)``, needed before (a) and (c) can hold."""
        return self.ball_radius <= self.clearance_threshold

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "delta": self.delta,
            "N": int(self.N),
            "kappa": self.kappa,
            "alpha": self.alpha,
            "scale": self.scale,
        }


@dataclass(frozen=True)
class ClusterBox:
    """Grid-aligned inner box, its inflation and the indices of its points."""

    inner: Box
    outer: Box
    members: np.ndarray
    cells_lo: tuple
    cells_hi: tuple

    def to_dict(self) -> dict:
        return {
            "inner": self.inner.to_list(),
            "outer": self.outer.to_list(),
            "members": [int(m) for m in self.members],
        }


def _touching(lo_a, hi_a, lo_b, hi_b) -> np.ndarray:
    """Closed integer boxes meet iff their intervals overlap on every axis."""
    return np.all((lo_a <= hi_b) & (lo_b <= hi_a), axis=-1)


class ClusterBoxes(Sequence):
    """Array-backed list of ClusterBox, materialized on access.

    Attributes ``inner_lo``, ``inner_hi``, ``outer_lo``, ``outer_hi`` have
    shape ``(m, d)``; ``cells_lo``/``cells_hi`` hold the integer corners.
    """

    def __init__(self, cells_lo, cells_hi, members, params: ClusterParams):
        self.params = params
        self.cells_lo = np.asarray(cells_lo, dtype=np.int64)
        self.cells_hi = np.asarray(cells_hi, dtype=np.int64)
        l = params.cube
        self.inner_lo = self.cells_lo * l
        self.inner_hi = self.cells_hi * l
        self.outer_lo = self.inner_lo - params.inflation
        self.outer_hi = self.inner_hi + params.inflation
        self.members = list(members)

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        inner = Box._unchecked(tuple(self.inner_lo[i].tolist()), tuple(self.inner_hi[i].tolist()))
        outer = Box._unchecked(tuple(self.outer_lo[i].tolist()), tuple(self.outer_hi[i].tolist()))
        return ClusterBox(
            inner, outer, self.members[i], tuple(self.cells_lo[i].tolist()), tuple(self.cells_hi[i].tolist())
        )

    def counts(self) -> np.ndarray:
        return np.array([len(m) for m in self.members], dtype=np.int64)


def _finish(points, cell_lo, cell_hi, point_box, params: ClusterParams) -> ClusterBoxes:
    nb = len(cell_lo)
    by_box = np.argsort(point_box, kind="stable")
    splits = np.searchsorted(point_box[by_box], np.arange(nb + 1))
    order = np.lexsort(cell_lo.T[::-1])
    members = [by_box[splits[b] : splits[b + 1]] for b in order.tolist()]
    return ClusterBoxes(cell_lo[order], cell_hi[order], members, params)


def _occupied_cells(points: np.ndarray, params: ClusterParams):
    cells = np.floor(points / params.cube).astype(np.int64)
    ucells, inverse = np.unique(cells, axis=0, return_inverse=True)
    return ucells, inverse.ravel()


def _check_capacity(counts, members_of, params: ClusterParams):
    bad = np.flatnonzero(counts > params.N)
    if bad.size:
        b = bad[0]
        raise EpsilonTooLarge(
            f"a merged box holds {counts[b]} points, capacity is {params.N}",
            members=members_of(b),
            count=counts[b],
            capacity=params.N,
        )


def build_cluster_boxes(points, params: ClusterParams, method: str = "batched", rng=None) -> "ClusterBoxes":
    """Cover the points by well separated boxes holding at most ``N`` points each.

    Parameters
    ----------
    points : array of shape (n, d)
        Hole centers ``eps * z_j`` in physical coordinates.
    params : ClusterParams
    method : {"batched", "sequential"}
        ``batched`` merges whole connected components of the touching
        relation per round (fast path). ``sequential`` merges one touching
        pair at a time with an O(m^2) scan; with ``rng`` the pair is drawn at
        random, which exercises merge-order independence.

    Returns
    -------
    ClusterBoxes
        Sequence of ClusterBox, sorted by the lower cell corner.

    Raises
    ------
    EpsilonTooLarge
        When a merged box would contain more than ``N`` points.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ValueError("points must have shape (n, d)")
    if len(points) == 0:
        return ClusterBoxes(np.zeros((0, points.shape[1])), np.zeros((0, points.shape[1])), [], params)
    ucells, point_cell = _occupied_cells(points, params)
    if method == "batched":
        lo, hi, cell_box = _merge_batched(ucells, point_cell, params)
    elif method == "sequential":
        lo, hi, cell_box = _merge_sequential(ucells, point_cell, params, rng)
    else:
        raise ValueError(f"unknown merge method {method!r}")
    return _finish(points, lo, hi, cell_box[point_cell], params)


def _merge_batched(ucells, point_cell, params):
    m = len(ucells)
    lo = ucells.copy()
    hi = ucells + 1
    counts = np.bincount(point_cell, minlength=m)
    cell_box = np.arange(m)
    while True:
        nb = len(lo)
        if nb < 2:
            break
        c2 = lo + hi
        side = hi - lo
        tree = cKDTree(c2)
        pairs = tree.query_pairs(r=2 * int(side.max()) + 0.5, p=np.inf, output_type="ndarray")
        if len(pairs):
            ok = _touching(lo[pairs[:, 0]], hi[pairs[:, 0]], lo[pairs[:, 1]], hi[pairs[:, 1]])
            pairs = pairs[ok]
        if len(pairs) == 0:
            break
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(nb, nb))
        ncomp, comp = connected_components(graph, directed=False)
        new_lo = np.full((ncomp, lo.shape[1]), np.iinfo(np.int64).max)
        new_hi = np.full((ncomp, lo.shape[1]), np.iinfo(np.int64).min)
        np.minimum.at(new_lo, comp, lo)
        np.maximum.at(new_hi, comp, hi)
        new_counts = np.bincount(comp, weights=counts, minlength=ncomp).astype(np.int64)
        cell_box = comp[cell_box]
        _check_capacity(new_counts, lambda b: np.flatnonzero(cell_box[point_cell] == b), params)
        # every slice of a box holds a point, so a box spans at most N cells
        assert int((new_hi - new_lo).max()) <= params.N, "box side exceeds N cubes"
        lo, hi, counts = new_lo, new_hi, new_counts
    return lo, hi, cell_box


def _merge_sequential(ucells, point_cell, params, rng):
    m = len(ucells)
    boxes = {b: [ucells[b].copy(), ucells[b] + 1] for b in range(m)}
    counts = dict(enumerate(np.bincount(point_cell, minlength=m).tolist()))
    owner = np.arange(m)
    next_id = m
    while True:
        ids = sorted(boxes)
        pairs = [
            (a, b)
            for i, a in enumerate(ids)
            for b in ids[i + 1 :]
            if bool(_touching(boxes[a][0], boxes[a][1], boxes[b][0], boxes[b][1]))
        ]
        if not pairs:
            break
        a, b = pairs[int(rng.integers(len(pairs)))] if rng is not None else pairs[0]
        new_lo = np.minimum(boxes[a][0], boxes[b][0])
        new_hi = np.maximum(boxes[a][1], boxes[b][1])
        count = counts.pop(a) + counts.pop(b)
        del boxes[a], boxes[b]
        owner[(owner == a) | (owner == b)] = next_id
        if count > params.N:
            raise EpsilonTooLarge(
                f"a merged box holds {count} points, capacity is {params.N}",
                members=np.flatnonzero(owner[point_cell] == next_id),
                count=count,
                capacity=params.N,
            )
        assert int((new_hi - new_lo).max()) <= params.N, "box side exceeds N cubes"
        boxes[next_id] = [new_lo, new_hi]
        counts[next_id] = count
        next_id += 1
    ids = sorted(boxes)
    remap = {b: i for i, b in enumerate(ids)}
    lo = np.array([boxes[b][0] for b in ids])
    hi = np.array([boxes[b][1] for b in ids])
    return lo, hi, np.array([remap[o] for o in owner])


def partition(boxes: list) -> frozenset:
    """Point partition induced by a box list, for order-independence checks."""
    return frozenset(frozenset(int(m) for m in b.members) for b in boxes)


# ---------------------------------------------------------------------------
# verification


@dataclass
class PropertyRow:
    prop: str
    margin: float
    threshold: float
    passed: bool


@dataclass
class ClusterReport:
    """Worst-case margins of properties (a) to (e) with pass flags."""

    rows: list = field(default_factory=list)
    precondition_ok: bool = True

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def row(self, prop: str) -> PropertyRow:
        for r in self.rows:
            if r.prop == prop:
                return r
        raise KeyError(prop)

    def failures(self) -> list:
        return [r.prop for r in self.rows if not r.passed]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["property", "margin", "threshold", "pass"])
            for r in self.rows:
                w.writerow([r.prop, repr(float(r.margin)), repr(float(r.threshold)), int(r.passed)])


def _ge(value, threshold):
    return value >= threshold - REL_TOL * abs(threshold)


def _le(value, threshold):
    return value <= threshold + REL_TOL * abs(threshold)


def verify_cluster_properties(boxes: list, perf, params: ClusterParams) -> ClusterReport:
    """Check (a) cover, (b) capacity, (c) clearance, (d) separation, (e) sides.

    ``perf`` is a PerforatedDomain or an ``(n, d)`` array of hole centers.
    Never raises on a failed property; the report carries the margins.
    """
    points = np.asarray(getattr(perf, "centers", perf), dtype=float)
    report = ClusterReport(precondition_ok=params.cover_precondition())
    rho = params.ball_radius
    n = len(points)
    if len(boxes) == 0 and n == 0:
        for name, thr in (
            ("a_cover", 0.0),
            ("b_count", params.N),
            ("c_clearance", params.clearance_threshold),
            ("d_separation", params.separation_threshold),
            ("e_min_side", params.cube),
            ("e_max_side", params.s),
        ):
            report.rows.append(PropertyRow(name, math.nan, thr, True))
        return report

    if isinstance(boxes, ClusterBoxes):
        lo, hi, members = boxes.outer_lo, boxes.outer_hi, boxes.members
    else:
        lo = np.array([b.outer.lo for b in boxes]).reshape(-1, points.shape[1] if n else 1)
        hi = np.array([b.outer.hi for b in boxes]).reshape(lo.shape)
        members = [b.members for b in boxes]
    owner = np.full(n, -1)
    multiplicity = np.zeros(n, dtype=int)
    if members:
        flat = np.concatenate([np.asarray(m, dtype=np.int64) for m in members])
        box_of = np.repeat(np.arange(len(members)), [len(m) for m in members])
        np.add.at(multiplicity, flat, 1)
        owner[flat] = box_of
    assigned = bool(np.all(multiplicity == 1))

    if n:
        own = np.where(owner >= 0, owner, 0)
        face = np.min(np.minimum(points - lo[own], hi[own] - points), axis=1)
        face = np.where(owner >= 0, face, -np.inf)
        clearance = face - rho
        min_clear = float(clearance.min())
    else:
        min_clear = math.inf
    report.rows.append(PropertyRow("a_cover", min_clear, 0.0, assigned and _ge(min_clear, 0.0)))

    counts = np.array([len(m) for m in members]) if members else np.zeros(1, int)
    report.rows.append(PropertyRow("b_count", int(counts.max()), params.N, int(counts.max()) <= params.N))

    thr_c = params.clearance_threshold
    report.rows.append(PropertyRow("c_clearance", min_clear, thr_c, assigned and _ge(min_clear, thr_c)))

    thr_d = params.separation_threshold
    min_sep = math.inf
    if len(boxes) > 1:
        c = 0.5 * (lo + hi)
        # pairs at gap up to twice the threshold are found, so a margin at the threshold is reported
        reach = float(np.max(hi - lo)) + 2 * thr_d
        pairs = cKDTree(c).query_pairs(r=reach, p=np.inf, output_type="ndarray")
        if len(pairs):
            gap = np.maximum(0.0, np.maximum(lo[pairs[:, 1]] - hi[pairs[:, 0]], lo[pairs[:, 0]] - hi[pairs[:, 1]]))
            min_sep = float(np.max(gap, axis=1).min())
    report.rows.append(PropertyRow("d_separation", min_sep, thr_d, _ge(min_sep, thr_d)))

    sides = hi - lo
    smin, smax = float(sides.min()), float(sides.max())
    report.rows.append(PropertyRow("e_min_side", smin, params.cube, _ge(smin, params.cube)))
    report.rows.append(PropertyRow("e_max_side", smax, params.s, _le(smax, params.s)))
    return report


def shrink_outer(boxes, factor: float, params: ClusterParams) -> list:
    """Copies of ``boxes`` whose inflation margin is scaled by ``factor``."""
    out = []
    m = params.inflation * factor
    for b in boxes:
        outer = Box(b.inner.lo_array - m, b.inner.hi_array + m)
        out.append(ClusterBox(b.inner, outer, b.members, b.cells_lo, b.cells_hi))
    return out


def write_boxes_json(boxes: list, path) -> None:
    with open(path, "w") as fh:
        json.dump([b.to_dict() for b in boxes], fh, indent=1)
        fh.write("\n")


def read_boxes_json(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    out = []
    for rec in data:
        inner = Box(*rec["inner"])
        outer = Box(*rec["outer"])
        out.append(ClusterBox(inner, outer, np.array(rec["members"], dtype=np.int64), (), ()))
    return out
