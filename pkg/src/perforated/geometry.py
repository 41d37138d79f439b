"""
Axis-aligned boxes, balls and star-shaped domains.

Everything here is immutable and works in dimension 2 or 3. Point arguments
accept either a single point of shape ``(d,)`` or a batch of shape ``(n, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import gamma


class InvalidPairing(ValueError):
    """Raised when a ball is paired with a box that does not contain its center."""


def unit_ball_volume(d: int) -> float:
    """Lebesgue measure of the unit ball in R^d."""
    return math.pi ** (d / 2) / gamma(d / 2 + 1)


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``[lo_1, hi_1] x ... x [lo_d, hi_d]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.ravel(self.lo))
        hi = tuple(float(v) for v in np.ravel(self.hi))
        if len(lo) != len(hi):
            raise ValueError(f"lo has {len(lo)} entries but hi has {len(hi)}")
        if any(b < a for a, b in zip(lo, hi)):
            raise ValueError(f"box needs lo <= hi per axis, got lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def _unchecked(cls, lo: tuple, hi: tuple) -> "Box":
        obj = object.__new__(cls)
        object.__setattr__(obj, "lo", lo)
        object.__setattr__(obj, "hi", hi)
        return obj

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def lo_array(self) -> np.ndarray:
        return np.array(self.lo)

    @property
    def hi_array(self) -> np.ndarray:
        return np.array(self.hi)

    @property
    def sides(self) -> np.ndarray:
        return self.hi_array - self.lo_array

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo_array + self.hi_array)

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    def is_degenerate(self) -> bool:
        return bool(np.any(self.sides <= 0.0))

    def contains(self, x) -> np.ndarray:
        """Closed-box membership."""
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo_array) & (x <= self.hi_array), axis=-1)

    def face_distance(self, x) -> np.ndarray:
        """Distance from interior points to the boundary (negative outside)."""
        x = np.asarray(x, dtype=float)
        return np.min(np.minimum(x - self.lo_array, self.hi_array - x), axis=-1)

    def to_list(self) -> list:
        return [list(self.lo), list(self.hi)]


@dataclass(frozen=True)
class Ball:
    """Closed Euclidean ball."""

    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in np.ravel(self.center)))
        object.__setattr__(self, "radius", float(self.radius))
        if not self.radius >= 0.0:
            raise ValueError(f"ball radius must be >= 0, got {self.radius}")

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def center_array(self) -> np.ndarray:
        return np.array(self.center)


def dist_inf(a: Box, b: Box) -> float:
    """Infimum of the max-coordinate distance between points of ``a`` and ``b``.

    Examples
    --------
    >>> dist_inf(Box((0, 0), (1, 1)), Box((3, 0), (4, 1)))
    2.0
    """
    gap = np.maximum(0.0, np.maximum(b.lo_array - a.hi_array, a.lo_array - b.hi_array))
    return float(np.max(gap))


def dist_inf_arrays(lo_a, hi_a, lo_b, hi_b) -> np.ndarray:
    """Vectorized ``dist_inf`` for stacked boxes of shape ``(..., d)``."""
    gap = np.maximum(0.0, np.maximum(lo_b - hi_a, lo_a - hi_b))
    return np.max(gap, axis=-1)


def inflate(b: Box, margin: float) -> Box:
    """Return ``{x : dist_inf(x, b) <= margin}``."""
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    return Box(b.lo_array - margin, b.hi_array + margin)


def ball_box_clearance(ball: Ball, b: Box) -> float:
    """Distance from the ball surface to the box boundary.

    Equals the distance of the center to the nearest face minus the radius;
    negative when the ball pokes out of the box.
    """
    c = ball.center_array
    if not bool(b.contains(c)):
        raise InvalidPairing(f"ball center {ball.center} is outside box {b.to_list()}")
    return float(b.face_distance(c)) - ball.radius


# ---------------------------------------------------------------------------
# star-shaped domains


_KINDS = ("unit-ball", "axis-box", "ellipsoid", "radial-function")


@dataclass(frozen=True)
class StarDomain:
    """Bounded domain star-shaped with respect to the origin.

    Parameters
    ----------
    kind : str
        One of ``unit-ball`` (a ball of given radius centred at 0),
        ``axis-box`` (half widths), ``ellipsoid`` (semi axes) or
        ``radial-function`` (boundary radii at equally spaced polar angles,
        two dimensions only, linear interpolation in the angle).
    params : tuple of float
        Radius, half widths, semi axes or the radius table.
    d : int
        Space dimension.
    """

    kind: str
    params: tuple
    d: int
    _tree: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown domain kind {self.kind!r}; expected one of {_KINDS}")
        params = tuple(float(v) for v in np.ravel(self.params))
        object.__setattr__(self, "params", params)
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if any(p <= 0 for p in params) or not params:
            raise ValueError(f"{self.kind} parameters must be positive, got {params}")
        if self.kind == "unit-ball" and len(params) != 1:
            raise ValueError("unit-ball takes a single radius")
        if self.kind in ("axis-box", "ellipsoid") and len(params) != self.d:
            raise ValueError(f"{self.kind} needs {self.d} lengths, got {len(params)}")
        if self.kind == "radial-function":
            if self.d != 2:
                raise ValueError("radial-function domains are two dimensional")
            if len(params) < 3:
                raise ValueError("radial-function needs at least 3 radii")

    # constructors -------------------------------------------------------

    @classmethod
    def ball(cls, radius: float = 1.0, d: int = 2) -> "StarDomain":
        return cls("unit-ball", (radius,), d)

    @classmethod
    def box(cls, half_widths) -> "StarDomain":
        hw = tuple(np.ravel(half_widths))
        return cls("axis-box", hw, len(hw))

    @classmethod
    def ellipsoid(cls, semi_axes) -> "StarDomain":
        ax = tuple(np.ravel(semi_axes))
        return cls("ellipsoid", ax, len(ax))

    @classmethod
    def radial(cls, radii) -> "StarDomain":
        return cls("radial-function", tuple(np.ravel(radii)), 2)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params), "d": self.d}

    @classmethod
    def from_dict(cls, data: dict) -> "StarDomain":
        return cls(data["kind"], tuple(data["params"]), int(data["d"]))

    # measures -----------------------------------------------------------

    def bounding_box(self) -> Box:
        if self.kind == "unit-ball":
            r = np.full(self.d, self.params[0])
        elif self.kind == "radial-function":
            r = np.full(self.d, max(self.params))
        else:
            r = np.array(self.params)
        return Box(-r, r)

    def volume(self) -> float:
        if self.kind == "unit-ball":
            return unit_ball_volume(self.d) * self.params[0] ** self.d
        if self.kind == "axis-box":
            return float(np.prod(2.0 * np.array(self.params)))
        if self.kind == "ellipsoid":
            return unit_ball_volume(self.d) * float(np.prod(self.params))
        rho = np.array(self.params)
        nxt = np.roll(rho, -1)
        dtheta = 2 * math.pi / rho.size
        return float(0.5 * dtheta * np.sum(rho**2 + rho * nxt + nxt**2) / 3.0)

    def inradius(self) -> float:
        """Distance from the origin to the boundary."""
        if self.kind in ("unit-ball", "axis-box", "ellipsoid"):
            return min(self.params)
        return float(self.boundary_distance(np.zeros(2)))

    # membership and distance -------------------------------------------

    def radius_at(self, theta) -> np.ndarray:
        """Boundary radius of a radial-function domain at polar angle ``theta``."""
        rho = np.array(self.params)
        m = rho.size
        s = np.mod(np.asarray(theta, dtype=float), 2 * math.pi) * m / (2 * math.pi)
        k = np.floor(s).astype(int) % m
        frac = s - np.floor(s)
        return rho[k] * (1 - frac) + rho[(k + 1) % m] * frac

    def contains(self, x) -> np.ndarray:
        """Open-domain membership."""
        return self.boundary_distance(x) > 0.0

    def boundary_distance(self, x) -> np.ndarray:
        """Signed Euclidean distance to the boundary, positive inside."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        if pts.shape[-1] != self.d:
            raise ValueError(f"points have dimension {pts.shape[-1]}, domain has {self.d}")
        if self.kind == "unit-ball":
            out = self.params[0] - np.linalg.norm(pts, axis=1)
        elif self.kind == "axis-box":
            out = _box_signed_distance(np.array(self.params), pts)
        elif self.kind == "ellipsoid":
            out = _ellipsoid_signed_distance(np.array(self.params), pts)
        else:
            out = self._radial_signed_distance(pts)
        return out[0] if single else out

    def _radial_signed_distance(self, pts: np.ndarray) -> np.ndarray:
        rho = np.array(self.params)
        m = rho.size
        dense = 64 * m
        if self._tree is None:
            t = np.arange(dense) * (2 * math.pi / dense)
            curve = self.radius_at(t)[:, None] * np.column_stack([np.cos(t), np.sin(t)])
            object.__setattr__(self, "_tree", cKDTree(curve))
        _, idx = self._tree.query(pts)
        step = 2 * math.pi / dense
        a = idx * step - step
        b = idx * step + step

        def sqdist(t):
            r = self.radius_at(t)
            return (pts[:, 0] - r * np.cos(t)) ** 2 + (pts[:, 1] - r * np.sin(t)) ** 2

        # vectorized golden-section refinement inside one sample spacing
        g = (math.sqrt(5) - 1) / 2
        c = b - g * (b - a)
        e = a + g * (b - a)
        fc, fe = sqdist(c), sqdist(e)
        for _ in range(80):
            left = fc < fe
            b = np.where(left, e, b)
            a = np.where(left, a, c)
            c_new = b - g * (b - a)
            e_new = a + g * (b - a)
            c, e = c_new, e_new
            fc, fe = sqdist(c), sqdist(e)
        dist = np.sqrt(np.minimum(np.minimum(fc, fe), sqdist(0.5 * (a + b))))
        theta = np.arctan2(pts[:, 1], pts[:, 0])
        inside = np.linalg.norm(pts, axis=1) < self.radius_at(theta)
        return np.where(inside, dist, -dist)


def _box_signed_distance(half: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a = np.abs(pts)
    inside = np.all(a < half, axis=1)
    inner = np.min(half - a, axis=1)
    outer = np.linalg.norm(np.maximum(a - half, 0.0), axis=1)
    return np.where(inside, inner, -outer)


def _ellipsoid_signed_distance(axes: np.ndarray, pts: np.ndarray, iters: int = 200) -> np.ndarray:
    """Distance to an axis-aligned ellipsoid by bisection on the Lagrange multiplier."""
    y = np.abs(pts)
    a2 = axes**2
    amin2 = a2.min()
    inside = np.sum((y / axes) ** 2, axis=1) < 1.0
    if np.allclose(axes, axes[0]):
        out = axes[0] - np.linalg.norm(y, axis=1)
        return out
    small = np.isclose(a2, amin2, rtol=1e-14, atol=0.0)
    big = ~small
    # degenerate branch: y vanishes on the shortest axes and the multiplier
    # sits at its lower limit
    on_small_axes = np.all(y[:, small] == 0.0, axis=1)
    denom = a2[big] - amin2
    xb = a2[big] * y[:, big] / denom
    G = np.sum((xb / axes[big]) ** 2, axis=1)
    degenerate = on_small_axes & (G < 1.0)

    ay = axes * y
    lo = np.full(len(y), -amin2)
    hi = np.maximum(np.sqrt(np.sum(ay**2, axis=1)), 0.0) + 1e-300
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            F = np.sum((ay / (mid[:, None] + a2)) ** 2, axis=1)
        up = F > 1.0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    t = 0.5 * (lo + hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = a2 * y / (t[:, None] + a2)
    x = np.where(np.isfinite(x), x, 0.0)
    dist = np.linalg.norm(x - y, axis=1)
    if np.any(degenerate):
        rest = np.sum((xb - y[:, big]) ** 2, axis=1) + amin2 * (1.0 - G)
        dist = np.where(degenerate, np.sqrt(np.maximum(rest, 0.0)), dist)
    return np.where(inside, dist, -dist)
