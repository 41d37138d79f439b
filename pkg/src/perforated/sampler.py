"""
Marked Poisson point process sampling and perforated-domain assembly.

Randomness comes from numpy's counter-based Philox generator. Every sample
uses three independent streams keyed by ``(seed, stream)``: one for the
Poisson count, one for positions and one for marks. Position ``j`` and mark
``j`` are the ``j``-th draws of their streams, so enlarging a sample never
changes the points already drawn.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Ball, Box, StarDomain, unit_ball_volume

MAX_EXPECTED_POINTS = 1e8

STREAM_COUNT = 0
STREAM_POSITION = 1
STREAM_MARK = 2


class ResourceError(RuntimeError):
    """Raised when a request would allocate an unreasonable number of points."""


def stream(seed: int, which: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, which)``."""
    key = np.array([int(seed) % 2**64, int(which) % 2**64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class MarkDist:
    """Law of the radius marks.

    ``kind`` is ``constant`` (params ``(r0,)``), ``uniform`` (``(a, b)``) or
    ``pareto-truncated`` (``(shape, cap)`` or ``(shape, cap, scale)``), the
    latter with density proportional to ``x**(-shape-1)`` on ``[scale, cap]``.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        p = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", p)
        if self.kind == "constant":
            if len(p) != 1 or p[0] < 0:
                raise ValueError(f"constant marks need one value >= 0, got {p}")
        elif self.kind == "uniform":
            if len(p) != 2 or not 0 <= p[0] < p[1]:
                raise ValueError(f"uniform marks need 0 <= a < b, got {p}")
        elif self.kind == "pareto-truncated":
            if len(p) == 2:
                p = p + (1.0,)
                object.__setattr__(self, "params", p)
            if len(p) != 3:
                raise ValueError(f"pareto-truncated needs (shape, cap[, scale]), got {p}")
            shape, cap, scale = p
            if shape <= 3:
                raise ValueError(f"pareto shape must exceed 3 for a finite third moment, got {shape}")
            if not 0 < scale < cap < math.inf:
                raise ValueError(f"pareto needs 0 < scale < cap < inf, got scale={scale}, cap={cap}")
        else:
            raise ValueError(f"unknown mark distribution {self.kind!r}")

    def ppf(self, u) -> np.ndarray:
        """Inverse CDF."""
        u = np.asarray(u, dtype=float)
        if self.kind == "constant":
            return np.full(u.shape, self.params[0])
        if self.kind == "uniform":
            a, b = self.params
            return a + (b - a) * u
        shape, cap, scale = self.params
        z = 1.0 - (scale / cap) ** shape
        return scale * (1.0 - u * z) ** (-1.0 / shape)

    def moment(self, m: float) -> float:
        """Closed form of ``E(r**m)``."""
        if self.kind == "constant":
            return self.params[0] ** m
        if self.kind == "uniform":
            a, b = self.params
            return (b ** (m + 1) - a ** (m + 1)) / ((m + 1) * (b - a))
        k, cap, s = self.params
        z = 1.0 - (s / cap) ** k
        if math.isclose(m, k):
            return k * s**k * math.log(cap / s) / z
        return k * s**k * (cap ** (m - k) - s ** (m - k)) / ((m - k) * z)

    @property
    def max_value(self) -> float:
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "uniform":
            return self.params[1]
        return self.params[1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, data: dict) -> "MarkDist":
        return cls(data["kind"], tuple(data["params"]))


@dataclass(frozen=True)
class ProcessParams:
    """Intensity, mark law and seed of a marked Poisson process."""

    intensity: float
    marks: MarkDist = MarkDist("constant", (1.0,))
    seed: int = 0

    def __post_init__(self):
        if not self.intensity > 0:
            raise ValueError(f"intensity must be > 0, got {self.intensity}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def to_dict(self) -> dict:
        return {"intensity": self.intensity, "marks": self.marks.to_dict(), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, data: dict) -> "ProcessParams":
        return cls(float(data["intensity"]), MarkDist.from_dict(data["marks"]), int(data["seed"]))


@dataclass(frozen=True)
class MarkedPointSample:
    """Realization of the process on a window: centers ``z`` and marks ``r``."""

    z: np.ndarray
    r: np.ndarray
    window: Box
    params: ProcessParams | None = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(-1, self.window.d)
        r = np.asarray(self.r, dtype=float).ravel()
        if len(z) != len(r):
            raise ValueError(f"{len(z)} centers but {len(r)} marks")
        z.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "r", r)

    @property
    def d(self) -> int:
        return self.window.d

    def __len__(self) -> int:
        return len(self.r)

    def restrict(self, window: Box) -> "MarkedPointSample":
        """Points of this sample inside a sub-window (closed-open per axis)."""
        lo, hi = window.lo_array, window.hi_array
        keep = np.all((self.z >= lo) & (self.z < hi), axis=1)
        return MarkedPointSample(self.z[keep], self.r[keep], window, self.params)

    def translate(self, shift) -> "MarkedPointSample":
        shift = np.asarray(shift, dtype=float)
        w = Box(self.window.lo_array + shift, self.window.hi_array + shift)
        return MarkedPointSample(self.z + shift, self.r, w, self.params)


def sample_marked_ppp(params: ProcessParams, window: Box) -> MarkedPointSample:
    """Sample the marked Poisson process on ``window``.

    The count is Poisson with mean ``intensity * |window|``; positions are
    i.i.d. uniform in the window and marks i.i.d. from ``params.marks``.
    """
    if window.is_degenerate():
        raise ValueError(f"sampling window must have positive volume, got {window.to_list()}")
    mean = params.intensity * window.volume
    if not mean <= MAX_EXPECTED_POINTS:
        raise ResourceError(f"expected {mean:.3g} points exceeds the limit {MAX_EXPECTED_POINTS:.0e}")
    n = int(stream(params.seed, STREAM_COUNT).poisson(mean))
    u = stream(params.seed, STREAM_POSITION).random((n, window.d))
    z = window.lo_array + u * window.sides
    r = params.marks.ppf(stream(params.seed, STREAM_MARK).random(n))
    return MarkedPointSample(z, r, window, params)


def master_window(domain: StarDomain, eps_min: float) -> Box:
    """Window ``eps_min**-1 * bbox(D)`` shared by every ``eps >= eps_min``."""
    bb = domain.bounding_box()
    return Box(bb.lo_array / eps_min, bb.hi_array / eps_min)


def select_interior(sample: MarkedPointSample, domain: StarDomain, eps: float) -> np.ndarray:
    """Indices ``j`` with ``eps*z_j`` in ``D`` at distance more than ``eps`` from its boundary."""
    bb = domain.bounding_box()
    need = Box(bb.lo_array / eps, bb.hi_array / eps)
    tol = 1e-12 * float(np.max(need.sides))
    if np.any(sample.window.lo_array > need.lo_array + tol) or np.any(
        sample.window.hi_array < need.hi_array - tol
    ):
        raise ValueError("sample window does not cover eps**-1 * bbox(D)")
    if len(sample) == 0:
        return np.zeros(0, dtype=np.int64)
    dist = domain.boundary_distance(eps * sample.z)
    return np.flatnonzero(dist > eps).astype(np.int64)


@dataclass(frozen=True)
class PerforatedDomain:
    """``D`` with balls of radius ``eps**alpha * r_j`` removed around ``eps*z_j``."""

    domain: StarDomain
    eps: float
    alpha: float
    centers: np.ndarray
    radii: np.ndarray
    interior_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    marks: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, self.domain.d)
        r = np.asarray(self.radii, dtype=float).ravel()
        if len(c) != len(r):
            raise ValueError("centers and radii differ in length")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def holes(self) -> list:
        return [Ball(c, r) for c, r in zip(self.centers, self.radii)]

    @property
    def oversized(self) -> np.ndarray:
        """Holes whose radius exceeds ``eps``; reported, never dropped."""
        return np.flatnonzero(self.radii > self.eps)

    def __len__(self) -> int:
        return len(self.radii)

    def contains(self, x) -> np.ndarray:
        """Membership in ``D`` minus the closed holes."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        inside = self.domain.contains(x)
        if len(self.radii):
            from scipy.spatial import cKDTree

            tree = cKDTree(self.centers)
            near = tree.query_ball_point(x, self.radii.max())
            for i, cand in enumerate(near):
                if inside[i] and cand:
                    dd = np.linalg.norm(self.centers[cand] - x[i], axis=1)
                    if np.any(dd <= self.radii[cand]):
                        inside[i] = False
        return inside

    def hole_volume(self) -> float:
        """Sum of hole volumes (an upper bound for the volume of their union)."""
        return float(unit_ball_volume(self.d) * np.sum(self.radii**self.d))

    def hole_volume_bound(self) -> float:
        """``|B_1| eps**(d(alpha-1)) * (eps**d * sum r_j**d)``."""
        if self.marks is None:
            raise ValueError("hole_volume_bound needs the admitted marks")
        d = self.d
        return float(
            unit_ball_volume(d) * self.eps ** (d * (self.alpha - 1)) * self.eps**d * np.sum(self.marks**d)
        )


def admissible_alpha(alpha: float, d: int) -> bool:
    """Hole exponent range: ``alpha > 3`` in three dimensions, ``alpha > 2`` in two."""
    return alpha > d


def build_perforation(sample: MarkedPointSample, domain: StarDomain, eps: float, alpha: float) -> PerforatedDomain:
    """Assemble ``D_eps`` from the admitted points of ``sample``."""
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if not admissible_alpha(alpha, domain.d):
        raise ValueError(f"alpha={alpha} is not admissible in dimension {domain.d} (need alpha > {domain.d})")
    idx = select_interior(sample, domain, eps)
    marks = sample.r[idx]
    return PerforatedDomain(
        domain=domain,
        eps=float(eps),
        alpha=float(alpha),
        centers=eps * sample.z[idx],
        radii=eps**alpha * marks,
        interior_indices=idx,
        marks=marks,
    )


# ---------------------------------------------------------------------------
# JSON lines


def write_jsonl(sample: MarkedPointSample, path) -> None:
    """One header record followed by one ``{"z": [...], "r": ...}`` record per point."""
    header = {
        "type": "header",
        "d": sample.d,
        "count": len(sample),
        "window": sample.window.to_list(),
        "params": sample.params.to_dict() if sample.params is not None else None,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for zj, rj in zip(sample.z.tolist(), sample.r.tolist()):
            fh.write(json.dumps({"z": zj, "r": rj}) + "\n")


def read_jsonl(path) -> MarkedPointSample:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("type") != "header":
            raise ValueError(f"{path}: first record must be the header")
        rows = [json.loads(line) for line in fh if line.strip()]
    d = int(header["d"])
    z = np.array([row["z"] for row in rows], dtype=float).reshape(-1, d)
    r = np.array([row["r"] for row in rows], dtype=float)
    if len(r) != header["count"]:
        raise ValueError(f"{path}: header announces {header['count']} points, found {len(r)}")
    lo, hi = header["window"]
    params = ProcessParams.from_dict(header["params"]) if header.get("params") else None
    return MarkedPointSample(z, r, Box(lo, hi), params)
