"""John paths in a box with a few small balls removed.

Points are joined to a fixed center ``x0`` by the three-regime construction:
points near the box boundary step straight onto the highway ``L`` (the
shell at l-infinity distance ``w`` inside the box); interior points follow
the axis of a cone that misses every ball until they reach ``L``; along
``L`` the path is the shortest route over at most three unfolded faces.
The witness constant of a path is ``max |G(t) - x| / dist(G(t), dU)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Ball, Box

TIE_TOL = 1e-12

# Witness caps per (d, N), measured on admissible scenes and then frozen.
# The cap is checked on scenes whose longest side is at most twice the
# shortest side, with ``scale`` equal to the longest side.
C_CAP = {(3, 40): 2.0e3, (2, 12): 7.0e2}


class ConeNotFound(RuntimeError):
    """Every candidate disc meets a ball projection."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class KappaGapViolation(AssertionError):
    """A projected ball radius exceeds the separation-to-size bound."""


@dataclass(frozen=True)
class CarvedBox:
    """A box with balls removed: ``U = box minus the union of balls``.

    ``scale`` is the box scale ``eps**(1+delta)`` in the same units as the
    box; the highway sits at depth ``w = scale / (32 N)``. ``unit`` records
    the physical length of one coordinate unit after normalization, and
    ``eps``/``alpha`` (optional) enable the projection-size check.
    """

    box: Box
    balls: tuple = ()
    N: int = 1
    scale: float | None = None
    unit: float = 1.0
    eps: float | None = None
    alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "balls", tuple(self.balls))
        if self.scale is None:
            object.__setattr__(self, "scale", float(np.max(self.box.sides)))
        if self.N < 1:
            raise ValueError("N must be >= 1")
        for b in self.balls:
            if b.d != self.box.d:
                raise ValueError("ball dimension does not match the box")
        c = self.centers
        if len(c) > 1:
            gap = np.linalg.norm(c[:, None] - c[None], axis=2) - (self.radii[:, None] + self.radii[None])
            np.fill_diagonal(gap, np.inf)
            if gap.min() <= 0:
                raise ValueError("balls must be pairwise disjoint")

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def centers(self) -> np.ndarray:
        return np.array([b.center for b in self.balls], dtype=float).reshape(-1, self.d)

    @property
    def radii(self) -> np.ndarray:
        return np.array([b.radius for b in self.balls], dtype=float)

    @property
    def w(self) -> float:
        """Depth of the highway below the box boundary."""
        return self.scale / (32 * self.N)

    @property
    def top_axis(self) -> int:
        """Axis of the shortest side; ``x0`` sits on its upper face of ``L``."""
        return int(np.argmin(self.box.sides))

    @property
    def highway(self) -> Box:
        return Box(tuple(self.box.lo_array + self.w), tuple(self.box.hi_array - self.w))

    @property
    def x0(self) -> np.ndarray:
        j = self.highway
        x = j.center.copy()
        x[self.top_axis] = j.hi[self.top_axis]
        return x

    def clearance_margin(self) -> float:
        """Smallest gap between a ball and the box boundary, minus ``2 w``."""
        if not self.balls:
            return math.inf
        c = self.centers
        face = np.min(np.minimum(c - self.box.lo_array, self.box.hi_array - c), axis=1)
        return float(np.min(face - self.radii)) - 2 * self.w

    def normalized(self) -> "CarvedBox":
        """Rescaled copy whose shortest side is 1, anchored at the box center."""
        k = float(np.min(self.box.sides))
        p = self.box.center
        box = Box(tuple((self.box.lo_array - p) / k), tuple((self.box.hi_array - p) / k))
        balls = tuple(Ball(tuple((b.center_array - p) / k), b.radius / k) for b in self.balls)
        return replace(self, box=box, balls=balls, scale=self.scale / k, unit=self.unit * k)

    def dist_to_boundary(self, x) -> np.ndarray:
        """Exact ``dist(x, dU)``; negative outside ``U``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        face = np.min(np.minimum(x - self.box.lo_array, self.box.hi_array - x), axis=1)
        if not self.balls:
            return face
        c, r = self.centers, self.radii
        ball = np.min(np.linalg.norm(x[:, None, :] - c[None], axis=2) - r[None], axis=1)
        return np.minimum(face, ball)

    def contains(self, x) -> np.ndarray:
        return self.dist_to_boundary(x) > 0

    def to_dict(self) -> dict:
        return {
            "box": self.box.to_list(),
            "balls": [[list(b.center), b.radius] for b in self.balls],
            "N": self.N,
            "scale": self.scale,
        }


@dataclass
class JohnPath:
    """Polyline from ``x`` to ``x0`` and its witness constant."""

    vertices: np.ndarray
    total_length: float
    witness_constant: float
    regime: str = ""
    samples: np.ndarray = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "vertices": np.asarray(self.vertices).tolist(),
            "total_length": self.total_length,
            "witness_constant": self.witness_constant,
            "regime": self.regime,
        }


# ---------------------------------------------------------------------------
# escape cone


def disc_radius(N: int) -> float:
    """Angular radius of the candidate discs, ``pi / (4N + 4)``."""
    return math.pi / (4 * N + 4)


def _orthonormal_frame(pole: np.ndarray) -> tuple:
    d = len(pole)
    helper = np.eye(d)[int(np.argmin(np.abs(pole)))]
    u = helper - pole * (helper @ pole)
    u /= np.linalg.norm(u)
    if d == 2:
        return (u,)
    v = np.cross(pole, u)
    return u, v


def candidate_directions(pole: np.ndarray, N: int) -> np.ndarray:
    """Centers of the ``N`` candidate discs around the rim of the half-sphere.

    In 3D they lie on the circle at polar angle ``pi/2 - 2r`` from ``pole``
    with azimuths ``2 pi k / N``; in 2D they are evenly spaced over the arc
    ``[-pi/2 + 2r, pi/2 - 2r]``.
    """
    pole = np.asarray(pole, dtype=float)
    pole = pole / np.linalg.norm(pole)
    r = disc_radius(N)
    frame = _orthonormal_frame(pole)
    if len(pole) == 2:
        (u,) = frame
        phis = np.linspace(-math.pi / 2 + 2 * r, math.pi / 2 - 2 * r, N) if N > 1 else np.zeros(1)
        return np.cos(phis)[:, None] * pole + np.sin(phis)[:, None] * u
    u, v = frame
    theta = math.pi / 2 - 2 * r
    az = 2 * math.pi * np.arange(N) / N
    ring = np.cos(az)[:, None] * u + np.sin(az)[:, None] * v
    return math.cos(theta) * pole + math.sin(theta) * ring


def projected_radii(x, centers, radii) -> np.ndarray:
    """Angular radii of the balls seen from ``x``."""
    dist = np.linalg.norm(np.asarray(centers) - np.asarray(x), axis=1)
    return np.arcsin(np.clip(np.asarray(radii) / dist, 0.0, 1.0))


def find_escape_cone(x, balls, N: int) -> tuple:
    """A cone at ``x`` that meets no ball.

    Returns ``(direction, half_angle)``. With no balls the whole half-space
    is free and ``half_angle = pi/2``. Otherwise the pole opposite the
    nearest ball is used, ties broken by index, and the first free candidate
    disc is returned with ``half_angle = pi / (4N + 4)``.

    Raises
    ------
    ConeNotFound
        When every candidate disc meets a projected ball.
    """
    x = np.asarray(x, dtype=float)
    d = len(x)
    if not balls:
        e = np.zeros(d)
        e[0] = 1.0
        return e, math.pi / 2
    centers = np.array([b.center for b in balls], dtype=float)
    radii = np.array([b.radius for b in balls], dtype=float)
    offset = centers - x
    dist = np.linalg.norm(offset, axis=1)
    if np.any(dist <= radii):
        raise ValueError("x lies inside a ball")
    nearest = int(np.argmin(dist))
    ties = np.flatnonzero(np.abs(dist - dist[nearest]) <= TIE_TOL * dist[nearest])
    pole = -offset[nearest] / dist[nearest]
    r = disc_radius(N)
    cands = candidate_directions(pole, N)
    ball_dirs = offset / dist[:, None]
    ang_ball = np.arcsin(np.clip(radii / dist, 0.0, 1.0))
    sep = np.arccos(np.clip(cands @ ball_dirs.T, -1.0, 1.0))
    free = np.all(sep >= r + ang_ball[None, :], axis=1)
    if not free.any():
        raise ConeNotFound(
            "no candidate disc is free of ball projections",
            {
                "nearest": nearest,
                "ties": ties.tolist(),
                "disc_radius": r,
                "projected_radii": ang_ball.tolist(),
                "max_other_radius": float(np.delete(ang_ball, nearest).max()) if len(balls) > 1 else 0.0,
            },
        )
    return cands[int(np.argmax(free))], r


def check_kappa_gap(x, carved: CarvedBox) -> tuple:
    """Largest projected radius of the non-nearest balls against ``eps^(alpha/d - 1)``.

    Returns ``(largest sine, bound, ok)``. The sine of the angular radius is
    ``radius / distance``, which the separation and size bounds keep below
    ``eps^(kappa2 - kappa1)`` with ``kappa1 = alpha/d``, ``kappa2 = 2 alpha/d - 1``.
    """
    if carved.eps is None or carved.alpha is None or len(carved.balls) < 2:
        return 0.0, math.inf, True
    c, r = carved.centers, carved.radii
    dist = np.linalg.norm(c - np.asarray(x, dtype=float), axis=1)
    others = np.delete(r / dist, int(np.argmin(dist)))
    bound = carved.eps ** (carved.alpha / carved.d - 1)
    worst = float(others.max())
    return worst, bound, worst <= bound * (1 + TIE_TOL)


# ---------------------------------------------------------------------------
# highway


def _faces_containing(y, lo, hi, tol) -> list:
    out = []
    for k in range(len(y)):
        if abs(y[k] - lo[k]) <= tol:
            out.append((k, -1))
        if abs(y[k] - hi[k]) <= tol:
            out.append((k, 1))
    return out


def highway_route(y, carved: CarvedBox) -> tuple:
    """Shortest route on ``L`` from ``y`` to ``x0`` over unfolded faces.

    Returns ``(vertices, length)``. Routes pass from the face of ``y``
    through at most one side face onto the top face; ties go to the lower
    axis, then to the negative side.
    """
    j = carved.highway
    lo, hi = j.lo_array, j.hi_array
    a = carved.top_axis
    x0 = carved.x0
    y = np.asarray(y, dtype=float)
    tol = 1e-9 * float(np.max(hi - lo))
    faces = _faces_containing(y, lo, hi, tol)
    if not faces:
        raise ValueError("point is not on the highway")
    height = hi[a] - lo[a]
    best = None
    for k, s in faces:
        if k == a and s == 1:
            cand = [(np.array([y, x0]), float(np.linalg.norm(x0 - y)))]
        elif k == a and s == -1:
            cand = []
            for m in range(len(y)):
                if m == a:
                    continue
                for sm in (-1, 1):
                    edge = hi[m] if sm == 1 else lo[m]
                    y_un = y.copy()
                    y_un[a] = hi[a]
                    y_un[m] = edge + sm * (height + abs(edge - y[m]))
                    length = float(np.linalg.norm(x0 - y_un))
                    t1 = (edge + sm * height - y_un[m]) / (x0[m] - y_un[m])
                    t2 = (edge - y_un[m]) / (x0[m] - y_un[m])
                    p1 = y_un + t1 * (x0 - y_un)
                    p2 = y_un + t2 * (x0 - y_un)
                    p1[m], p1[a] = edge, lo[a]
                    p2[m], p2[a] = edge, hi[a]
                    cand.append((np.array([y, p1, p2, x0]), length))
        else:
            edge = hi[k] if s == 1 else lo[k]
            y_un = y.copy()
            y_un[a] = hi[a]
            y_un[k] = edge + s * (hi[a] - y[a])
            length = float(np.linalg.norm(x0 - y_un))
            denom = x0[k] - y_un[k]
            t = (edge - y_un[k]) / denom if denom != 0 else 0.0
            q = y_un + t * (x0 - y_un)
            q[k], q[a] = edge, hi[a]
            cand = [(np.array([y, q, x0]), length)]
        for verts, length in cand:
            if best is None or length < best[1] * (1 - TIE_TOL):
                best = (verts, length)
    verts, length = best
    # drop repeated vertices
    keep = np.concatenate([[True], np.linalg.norm(np.diff(verts, axis=0), axis=1) > 0])
    return verts[keep], length


# ---------------------------------------------------------------------------
# path construction


def _to_highway(x, carved: CarvedBox) -> tuple:
    """First leg from ``x`` to a point of ``L`` and the regime name."""
    j = carved.highway
    lo, hi = j.lo_array, j.hi_array
    w = carved.w
    depth = float(np.min(np.minimum(x - carved.box.lo_array, carved.box.hi_array - x)))
    tol = 1e-12 * float(np.max(carved.box.sides))
    if abs(depth - w) <= tol:
        return x.copy(), "highway"
    if depth < 2 * w:
        if depth < w:
            y = np.clip(x, lo, hi)
        else:
            gaps = np.concatenate([x - lo, hi - x])
            k = int(np.argmin(gaps))
            y = x.copy()
            y[k % len(x)] = lo[k] if k < len(x) else hi[k - len(x)]
        return y, "ring"
    if carved.eps is not None:
        worst, bound, ok = check_kappa_gap(x, carved)
        if not ok:
            raise KappaGapViolation(f"projected radius {worst:.3e} exceeds bound {bound:.3e}")
    if carved.balls:
        direction, _ = find_escape_cone(x, list(carved.balls), carved.N)
    else:
        # any direction is free; head for the nearest face of L
        gaps = np.concatenate([x - lo, hi - x])
        k = int(np.argmin(gaps))
        direction = np.zeros(len(x))
        direction[k % len(x)] = -1.0 if k < len(x) else 1.0
    with np.errstate(divide="ignore"):
        t_hi = np.where(direction > 0, (hi - x) / direction, np.inf)
        t_lo = np.where(direction < 0, (lo - x) / direction, np.inf)
    t = float(min(t_hi.min(), t_lo.min()))
    y = x + t * direction
    y = np.clip(y, lo, hi)
    return y, "interior"


def _sample_polyline(vertices: np.ndarray, step: float, carved: CarvedBox, max_rounds: int = 60) -> np.ndarray:
    """Samples along the polyline, at most ``step`` apart and finer near ``dU``.

    An interval is bisected while its length exceeds a tenth of the smaller
    boundary distance at its ends. Since the distance is 1-Lipschitz this
    keeps the ratio sampled at about one percent accuracy.
    """
    pts = [vertices[:1]]
    for a, b in zip(vertices[:-1], vertices[1:]):
        seg = float(np.linalg.norm(b - a))
        if seg == 0:
            continue
        n = max(1, int(math.ceil(seg / step)))
        t = np.arange(n + 1) / n
        dist = carved.dist_to_boundary(a + t[:, None] * (b - a))
        for _ in range(max_rounds):
            if np.any(dist <= 0):
                break
            h = np.diff(t) * seg
            split = np.flatnonzero(h > 0.1 * np.minimum(dist[:-1], dist[1:]))
            if split.size == 0:
                break
            mid = 0.5 * (t[split] + t[split + 1])
            t = np.insert(t, split + 1, mid)
            dist = np.insert(dist, split + 1, carved.dist_to_boundary(a + mid[:, None] * (b - a)))
        pts.append(a + t[1:, None] * (b - a))
    return np.concatenate(pts)


def witness(x, samples: np.ndarray, carved: CarvedBox) -> float:
    """``max |p - x| / dist(p, dU)`` over sample points; infinite outside ``U``."""
    dist = carved.dist_to_boundary(samples)
    if np.any(dist <= 0):
        return math.inf
    return float(np.max(np.linalg.norm(samples - x, axis=1) / dist))


def construct_john_path(x, carved: CarvedBox, rel_tol: float = 0.01, max_doublings: int = 8) -> JohnPath:
    """Path from ``x`` to ``x0`` by the three-regime construction.

    The witness is sampled at arc-length steps of a tenth of the ring width,
    refined wherever the path runs closer to ``dU`` than ten steps; the step
    is halved until the witness changes by less than ``rel_tol``.

    Raises
    ------
    ValueError
        If ``x`` is not in ``U``.
    ConeNotFound
        If no escape direction exists.
    """
    x = np.asarray(x, dtype=float)
    if not bool(carved.contains(x)[0]):
        raise ValueError("x must lie in U")
    x0 = carved.x0
    if np.allclose(x, x0, rtol=0, atol=1e-14 * float(np.max(carved.box.sides))):
        return JohnPath(np.array([x0]), 0.0, 0.0, "center", np.array([x0]))
    y, regime = _to_highway(x, carved)
    route, route_len = highway_route(y, carved)
    vertices = np.vstack([x[None], route]) if regime != "highway" else route
    keep = np.concatenate([[True], np.linalg.norm(np.diff(vertices, axis=0), axis=1) > 0])
    vertices = vertices[keep]
    total = float(np.sum(np.linalg.norm(np.diff(vertices, axis=0), axis=1)))
    step = 0.1 * carved.w
    samples = _sample_polyline(vertices, step, carved)
    c = witness(x, samples, carved)
    for _ in range(max_doublings):
        if not math.isfinite(c):
            break
        step /= 2
        finer = _sample_polyline(vertices, step, carved)
        c_new = witness(x, finer, carved)
        samples = finer
        converged = abs(c_new - c) <= rel_tol * c
        c = max(c, c_new)
        if converged:
            break
    return JohnPath(vertices, total, c, regime, samples)


# ---------------------------------------------------------------------------
# constant estimation


def adversarial_points(carved: CarvedBox, offset: float = 1e-3) -> np.ndarray:
    """Hard starting points: near ball surfaces, near corners, mid-ring."""
    d = carved.d
    lo, hi = carved.box.lo_array, carved.box.hi_array
    w = carved.w
    pts = []
    if carved.balls:
        dirs = np.vstack([np.eye(d), -np.eye(d)])
        for c, r in zip(carved.centers, carved.radii):
            pts.extend(c + (r * (1 + offset)) * dirs)
    inset = offset * w
    for corner in np.ndindex(*(2,) * d):
        sel = np.array(corner, dtype=bool)
        pts.append(np.where(sel, hi - inset, lo + inset))
    center = carved.box.center
    for k in range(d):
        for depth in (0.5 * w, 1.5 * w):
            for sign in (-1, 1):
                p = center.copy()
                p[k] = lo[k] + depth if sign < 0 else hi[k] - depth
                pts.append(p)
    pts = np.array(pts)
    return pts[carved.contains(pts)]


def estimate_john_constant(carved: CarvedBox, samples: int, seed: int = 0) -> tuple:
    """Largest witness over random and adversarial starting points.

    Returns ``(c_hat, worst_point)``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = carved.box.lo_array, carved.box.hi_array
    chosen = []
    while len(chosen) < samples:
        cand = lo + (hi - lo) * rng.random((2 * samples, carved.d))
        chosen.extend(cand[carved.contains(cand)])
    pts = np.vstack([np.array(chosen[:samples]), adversarial_points(carved)])
    best, worst = -math.inf, None
    for p in pts:
        c = construct_john_path(p, carved).witness_constant
        if c > best:
            best, worst = c, p
    return best, worst


_SCENE_SIDES = {2: (1.0, 0.75), 3: (1.0, 0.75, 0.5)}
_SCENE_BALLS = {
    2: ((0.3, 0.4), (0.6, 0.55), (0.45, 0.75)),
    3: ((0.3, 0.4, 0.5), (0.6, 0.5, 0.45), (0.45, 0.7, 0.6)),
}


def reference_scene(eps: float, alpha: float = 4.0, N: int | None = None, d: int = 3, violate: bool = False) -> CarvedBox:
    """Normalized box of scale ``eps**(alpha/d)`` with three holes of radius ``0.05 eps**alpha``.

    With ``violate`` a ball of radius ``w/2`` is pushed into the highway of
    the top face, breaking the clearance the construction relies on.
    """
    if N is None:
        delta = (alpha - d) / d
        N = 2**d * (2 + math.ceil(1 / delta))
    s = eps ** (alpha / d)
    sides = np.array(_SCENE_SIDES[d]) * s
    box = Box(tuple(np.zeros(d)), tuple(sides))
    balls = [Ball(tuple(np.array(rel) * sides), 0.05 * eps**alpha) for rel in _SCENE_BALLS[d]]
    if violate:
        w = s / (32 * N)
        c = 0.5 * sides
        c[-1] = sides[-1] - 1.05 * w
        balls.append(Ball(tuple(c), 0.5 * w))
    return CarvedBox(box, balls, N, scale=s, eps=eps, alpha=alpha).normalized()


def c_cap(N: int, d: int = 3) -> float:
    """Frozen witness cap for capacity ``N`` in dimension ``d``."""
    try:
        return C_CAP[(d, N)]
    except KeyError:
        raise KeyError(f"no calibrated witness cap for d={d}, N={N}") from None


# ---------------------------------------------------------------------------
# output


def write_path_json(path: JohnPath, fname) -> None:
    with open(fname, "w") as fh:
        json.dump(path.to_dict(), fh, indent=1)
        fh.write("\n")


def write_constant_csv(rows, fname) -> None:
    """Rows of ``(eps, c_hat, worst_point)``."""
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eps", "c_hat", "worst_point"])
        for eps, c, p in rows:
            w.writerow([repr(float(eps)), repr(float(c)), " ".join(repr(float(v)) for v in p)])
