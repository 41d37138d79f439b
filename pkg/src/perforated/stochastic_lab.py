"""Monte Carlo checks of the probabilistic estimates behind the clustering.

Estimators cover the Poisson tail inequality, the occupancy of small cubes,
close pairs of rescaled balls and the law of large numbers for point counts
and mark moments. Every trial is keyed by its seed and aggregated through
sums, so the worker count never changes a result.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .clusterer import n_of_delta
from .geometry import Box, StarDomain
from .sampler import MarkDist, ProcessParams, sample_marked_ppp

# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class TrialConfig:
    """Monte Carlo plumbing: trial count, seed range, scales and CI level."""

    trials: int = 1000
    seed_start: int = 0
    eps_ladder: tuple = ()
    confidence: float = 0.95
    workers: int = 1

    def __post_init__(self):
        if int(self.trials) < 100:
            raise ValueError(f"trials must be >= 100, got {self.trials}")
        ladder = tuple(float(e) for e in self.eps_ladder)
        if any(e <= 0 for e in ladder):
            raise ValueError("eps_ladder entries must be positive")
        if any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError("eps_ladder must be strictly decreasing")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if int(self.workers) < 1:
            raise ValueError("workers must be >= 1")
        object.__setattr__(self, "eps_ladder", ladder)

    @property
    def seeds(self) -> range:
        return range(self.seed_start, self.seed_start + self.trials)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps_ladder"] = list(self.eps_ladder)
        return d


@dataclass(frozen=True)
class EventEstimate:
    """Empirical event probability with a Wilson interval and a theory value."""

    p_hat: float
    ci_lo: float
    ci_hi: float
    theory_bound: float
    n: int
    eps: float = math.nan
    estimator: str = ""
    events: int = 0

    def __post_init__(self):
        if not 0 <= self.ci_lo <= self.p_hat <= self.ci_hi <= 1:
            raise ValueError("interval must satisfy 0 <= ci_lo <= p_hat <= ci_hi <= 1")

    @property
    def sigma(self) -> float:
        """Binomial standard error of ``p_hat``."""
        return math.sqrt(self.p_hat * (1 - self.p_hat) / self.n)


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple:
    """Wilson score interval for ``k`` successes out of ``n``."""
    if n <= 0:
        raise ValueError("n must be positive")
    z = stats.norm.ppf(0.5 + confidence / 2)
    p = k / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if k == 0 else max(0.0, min(p, center - half))
    hi = 1.0 if k == n else min(1.0, max(p, center + half))
    return lo, hi


def _estimate(k: int, n: int, bound: float, confidence: float, eps: float, name: str) -> EventEstimate:
    lo, hi = wilson_interval(k, n, confidence)
    return EventEstimate(k / n, lo, hi, bound, n, eps, name, k)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    points: int


def fit_loglog(x, y) -> SlopeFit:
    """Least squares slope of ``log y`` against ``log x``; zero ``y`` is dropped."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        raise ValueError("need at least two positive points for a slope fit")
    res = stats.linregress(np.log(x[keep]), np.log(y[keep]))
    stderr = float(res.stderr) if keep.sum() > 2 else math.nan
    return SlopeFit(float(res.slope), float(res.intercept), stderr, int(keep.sum()))


def _run_trials(fn, args: tuple, config: TrialConfig) -> int:
    """Sum ``fn(seed, *args)`` over the seed range, optionally in parallel."""
    seeds = list(config.seeds)
    if config.workers == 1:
        return sum(fn(s, *args) for s in seeds)
    chunks = [seeds[i :: config.workers] for i in range(config.workers)]
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        parts = pool.map(_sum_chunk, [fn] * len(chunks), [args] * len(chunks), chunks)
        return sum(parts)


def _sum_chunk(fn, args, seeds) -> int:
    return sum(fn(s, *args) for s in seeds)


# ---------------------------------------------------------------------------
# Poisson tail


def poisson_tail_bound(x: float, n: int) -> tuple:
    """Tail ``P(Poisson(x) >= n)`` and the bound ``x**n / n!``.

    The tail is summed forward from the ``n``-th term, with every term formed
    in log space so that large ``n`` or ``x`` never overflow.
    """
    if not x > 0:
        raise ValueError(f"x must be > 0, got {x}")
    n = int(n)
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    log_bound = n * math.log(x) - math.lgamma(n + 1)
    bound = math.exp(log_bound) if log_bound < 709 else math.inf
    if n == 0:
        return 1.0, bound
    term = math.exp(log_bound - x)
    terms = [term]
    k = n
    while True:
        term *= x / (k + 1)
        k += 1
        terms.append(term)
        if k > x and term <= 1e-18 * terms[0]:
            break
        if term == 0.0:
            break
    tail = min(1.0, math.fsum(terms))
    return tail, bound


# ---------------------------------------------------------------------------
# cube occupancy


def grid_cube_counts(points: np.ndarray, side: float) -> np.ndarray:
    """Point counts of the occupied half-open cubes ``side * (z + [0, 1)^d)``."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    cells = np.floor(points / side).astype(np.int64)
    _, counts = np.unique(cells, axis=0, return_counts=True)
    return counts


def _max_closed_1d(v: np.ndarray, side: float) -> int:
    v = np.sort(v)
    return int((np.searchsorted(v, v + side, side="right") - np.arange(len(v))).max())


def _max_closed(P: np.ndarray, side: float, axis: int) -> int:
    if axis == P.shape[1] - 1:
        return _max_closed_1d(P[:, axis], side)
    best = 0
    for a in np.unique(P[:, axis]):
        sub = P[(P[:, axis] >= a) & (P[:, axis] <= a + side)]
        if len(sub) > best:
            best = max(best, _max_closed(sub, side, axis + 1))
    return best


def max_cube_count(points: np.ndarray, side: float, floor: int = 0) -> int:
    """Largest number of points inside any closed axis-aligned cube of ``side``.

    An optimal cube can be slid until each lower face touches a point, so it
    suffices to anchor cubes at point coordinates. Anchors are only tried
    where the surrounding ``3^d`` grid block holds more than ``floor``
    points; below that the grid count already answers. Returns at least the
    largest grid count.
    """
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        return 0
    d = points.shape[1]
    cells = np.floor(points / side).astype(np.int64)
    ucells, inv, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    best = int(counts.max())
    tree = cKDTree(ucells)
    block = np.zeros(len(ucells), dtype=np.int64)
    for i, nb in enumerate(tree.query_ball_point(ucells, r=1.0, p=np.inf)):
        block[i] = counts[nb].sum()
    hot = np.flatnonzero(block[inv] > max(best, floor))
    if hot.size == 0:
        return best
    ptree = cKDTree(points)
    for i in hot:
        nb = points[ptree.query_ball_point(points[i], r=side, p=np.inf)]
        nb = nb[nb[:, 0] >= points[i, 0]]
        if len(nb) <= best:
            continue
        sub = nb[nb[:, 0] <= points[i, 0] + side]
        best = max(best, _max_closed(sub, side, 1) if d > 1 else len(sub))
    return best


def covering_count(domain: StarDomain, side: float) -> int:
    """Number of half-open grid cubes of ``side`` that meet ``domain``.

    A cube is counted when its center lies within half a diagonal of the
    domain, which can only overcount, so bounds built on it stay valid.
    """
    bb = domain.bounding_box()
    lo = np.floor(bb.lo_array / side).astype(np.int64)
    hi = np.ceil(bb.hi_array / side).astype(np.int64)
    d = domain.d
    reach = 0.5 * math.sqrt(d) * side
    total = 0
    axes = [np.arange(lo[k], hi[k]) for k in range(d)]
    # stream over the first axis to bound memory
    for a in axes[0]:
        rest = np.meshgrid(*axes[1:], indexing="ij") if d > 1 else []
        pts = np.column_stack([np.full(rest[0].size if d > 1 else 1, a)] + [g.ravel() for g in rest])
        centers = (pts + 0.5) * side
        total += int(np.count_nonzero(domain.boundary_distance(centers) > -reach))
    return total


def occupancy_theory_bound(lam: float, eps: float, delta: float, d: int, n1: int, cubes: int) -> float:
    """Union bound ``cubes * (lam 2^d)^N1 eps^(delta d N1) / N1!``, capped at 1."""
    log_b = math.log(cubes) + n1 * math.log(lam * 2**d) + delta * d * n1 * math.log(eps) - math.lgamma(n1 + 1)
    return min(1.0, math.exp(min(log_b, 0.0)))


def _occupancy_trial(seed, lam, eps, delta, domain_dict, threshold, mode) -> int:
    domain = StarDomain.from_dict(domain_dict)
    half = eps / 2
    window = Box(tuple(domain.bounding_box().lo_array / half), tuple(domain.bounding_box().hi_array / half))
    sample = sample_marked_ppp(ProcessParams(lam, MarkDist("constant", (1.0,)), seed), window)
    pts = half * np.asarray(sample.z)
    pts = pts[domain.contains(pts)]
    side = eps ** (1 + delta)
    if mode == "grid":
        counts = grid_cube_counts(pts, side)
        return int(counts.size > 0 and counts.max() > threshold)
    return int(max_cube_count(pts, side, floor=threshold) > threshold)


def estimate_max_occupancy(
    lam: float,
    eps: float,
    delta: float,
    d: int,
    config: TrialConfig,
    domain: StarDomain | None = None,
    threshold: float | None = None,
    mode: str = "grid",
) -> EventEstimate:
    """Probability that some cube of side ``eps**(1+delta)`` is overfull.

    Points are ``(eps/2) * Phi`` restricted to ``domain``. With
    ``mode="grid"`` the half-open grid cubes are scanned; with
    ``mode="all"`` every closed cube is. The default threshold is
    ``N1 = 2 + ceil(1/delta)`` in both modes; pass ``math.inf`` to make the
    event impossible. The theory value is the union bound over the exact
    covering count of the grid.
    """
    if not (lam > 0 and eps > 0 and delta > 0):
        raise ValueError("lam, eps and delta must be positive")
    if mode not in ("grid", "all"):
        raise ValueError(f"unknown mode {mode!r}")
    domain = domain or StarDomain.ball(1.0, d)
    if domain.d != d:
        raise ValueError("domain dimension does not match d")
    n1 = n_of_delta(delta, d) // 2**d
    thr = n1 if threshold is None else threshold
    side = eps ** (1 + delta)
    bound = occupancy_theory_bound(lam, eps, delta, d, n1, covering_count(domain, side))
    name = f"occupancy_{mode}"
    if math.isinf(thr):
        return _estimate(0, config.trials, bound, config.confidence, eps, name)
    k = _run_trials(_occupancy_trial, (lam, eps, delta, domain.to_dict(), thr, mode), config)
    return _estimate(k, config.trials, bound, config.confidence, eps, name)


# ---------------------------------------------------------------------------
# close pairs of balls


def _pairs_close(pts, ia, ib, limit2) -> bool:
    diff = pts[ia] - pts[ib]
    return bool(np.any(np.einsum("ij,ij->i", diff, diff) <= limit2))


def has_close_pair(points: np.ndarray, radius: float) -> bool:
    """Whether two of the closed balls ``B(points_i, radius)`` intersect.

    Uses a spatial hash with cell size ``2 * radius``: a close pair lies in
    the same or in neighbouring cells.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or len(points) < 2:
        return False
    d = points.shape[1]
    cell = 2.0 * radius
    limit2 = cell * cell
    keys = np.floor(points / cell).astype(np.int64)
    keys -= keys.min(axis=0) - 1
    extent = keys.max(axis=0) + 2
    radix = np.concatenate([np.cumprod(extent[::-1])[::-1][1:], [1]])
    code = keys @ radix
    order = np.argsort(code, kind="stable")
    code, pts = code[order], points[order]
    ucode, start, counts = np.unique(code, return_index=True, return_counts=True)
    # pairs inside one cell
    multi = np.flatnonzero(counts > 1)
    for c in np.unique(counts[multi]):
        s0 = start[multi[counts[multi] == c]]
        for i in range(c):
            for j in range(i + 1, c):
                if _pairs_close(pts, s0 + i, s0 + j, limit2):
                    return True
    # pairs in neighbouring cells, each unordered neighbour direction once
    for o in np.ndindex(*(3,) * d):
        shift = np.array(o) - 1
        if tuple(shift) <= (0,) * d:
            continue
        target = ucode + shift @ radix
        pos = np.searchsorted(ucode, target)
        pos_c = np.minimum(pos, len(ucode) - 1)
        hit = np.flatnonzero(ucode[pos_c] == target)
        if hit.size == 0:
            continue
        j = pos_c[hit]
        for ca in np.unique(counts[hit]):
            for cb in np.unique(counts[j]):
                sel = (counts[hit] == ca) & (counts[j] == cb)
                if not sel.any():
                    continue
                sa, sb = start[hit[sel]], start[j[sel]]
                for x in range(ca):
                    for y in range(cb):
                        if _pairs_close(pts, sa + x, sb + y, limit2):
                            return True
    return False


def _separation_trial(seed, lam, eps, kappa, tau, domain_dict) -> int:
    domain = StarDomain.from_dict(domain_dict)
    bb = domain.bounding_box()
    window = Box(tuple(bb.lo_array / eps), tuple(bb.hi_array / eps))
    sample = sample_marked_ppp(ProcessParams(lam, MarkDist("constant", (1.0,)), seed), window)
    centers = eps * np.asarray(sample.z)
    if len(centers) < 2:
        return 0
    centers = centers[domain.boundary_distance(centers) > eps]
    return int(has_close_pair(centers, tau * eps ** (1 + kappa)))


def estimate_separation_event(
    lam: float,
    eps: float,
    kappa: float,
    tau: float,
    d: int,
    config: TrialConfig,
    domain: StarDomain | None = None,
) -> EventEstimate:
    """Probability that two balls of radius ``tau * eps**(1+kappa)`` meet.

    Balls sit at the admitted centers ``eps * z`` with
    ``dist(eps z, boundary) > eps``. The theory value is the expected number
    of close pairs, which decays like ``eps**(d*(kappa-1))``.
    """
    if not kappa > 1:
        raise ValueError(f"kappa must be > 1, got {kappa}")
    if not tau >= 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    domain = domain or StarDomain.ball(1.0, d)
    if domain.d != d:
        raise ValueError("domain dimension does not match d")
    k = _run_trials(_separation_trial, (lam, eps, kappa, tau, domain.to_dict()), config)
    vol_ball = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
    pairs = 0.5 * lam**2 * domain.volume() * vol_ball * (2 * tau) ** d * eps ** (d * (kappa - 1))
    return _estimate(k, config.trials, min(1.0, pairs), config.confidence, eps, "separation")


def separation_slope_target(d: int, kappa: float) -> float:
    return d * (kappa - 1)


def occupancy_slope_target(d: int, delta: float) -> float:
    n1 = n_of_delta(delta, d) // 2**d
    return delta * d * n1 - d * (1 + delta)


# ---------------------------------------------------------------------------
# law of large numbers


@dataclass(frozen=True)
class SllnRow:
    eps: float
    count_mean: float
    count_ci_lo: float
    count_ci_hi: float
    count_limit: float
    moment_mean: float
    moment_ci_lo: float
    moment_ci_hi: float
    moment_limit: float
    n_seeds: int


def _slln_trial(seed, lam, marks_dict, domain_dict, m, eps) -> tuple:
    domain = StarDomain.from_dict(domain_dict)
    bb = domain.bounding_box()
    window = Box(tuple(bb.lo_array / eps), tuple(bb.hi_array / eps))
    sample = sample_marked_ppp(ProcessParams(lam, MarkDist.from_dict(marks_dict), seed), window)
    inside = domain.contains(eps * np.asarray(sample.z))
    r = np.asarray(sample.r)[inside]
    scale = eps**domain.d
    return scale * float(inside.sum()), scale * float(np.sum(r**m))


def slln_estimate(
    lam: float, mark_dist: MarkDist, S: StarDomain, m: float, eps_ladder, config: TrialConfig
) -> list:
    """Rescaled count and mark moment over ``eps^-1 S`` for each scale.

    Returns one SllnRow per scale with normal-approximation intervals over
    seeds and the limits ``lam |S|`` and ``lam E(r^m) |S|``.
    """
    moment = mark_dist.moment(m)
    if not math.isfinite(moment):
        raise ValueError(f"mark moment of order {m} is not finite")
    z = stats.norm.ppf(0.5 + config.confidence / 2)
    rows = []
    for eps in eps_ladder:
        vals = np.array([_slln_trial(s, lam, mark_dist.to_dict(), S.to_dict(), m, eps) for s in config.seeds])
        mean = vals.mean(axis=0)
        half = z * vals.std(axis=0, ddof=1) / math.sqrt(len(vals))
        rows.append(
            SllnRow(
                float(eps),
                float(mean[0]),
                float(mean[0] - half[0]),
                float(mean[0] + half[0]),
                lam * S.volume(),
                float(mean[1]),
                float(mean[1] - half[1]),
                float(mean[1] + half[1]),
                lam * moment * S.volume(),
                len(vals),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# output

ESTIMATE_COLUMNS = ("eps", "estimator", "p_hat", "ci_lo", "ci_hi", "theory_bound", "n_trials")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_estimates_csv(estimates, path, config: dict | None = None) -> None:
    """One row per (eps, estimator); ``config`` goes to ``<path>.json``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_COLUMNS)
        for e in estimates:
            w.writerow([_fmt(e.eps), e.estimator, _fmt(e.p_hat), _fmt(e.ci_lo), _fmt(e.ci_hi), _fmt(e.theory_bound), e.n])
    if config is not None:
        write_sidecar(path, config)


def write_slln_csv(rows, path, config: dict | None = None) -> None:
    names = list(SllnRow.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in names])
    if config is not None:
        write_sidecar(path, config)


def write_sidecar(path, config: dict) -> None:
    with open(f"{path}.json", "w") as fh:
        json.dump(config, fh, indent=1, sort_keys=True)
        fh.write("\n")
