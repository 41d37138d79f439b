"""Scene builders shared by the divergence-solver tests and the acceptance suite."""

import numpy as np

from perforated.bogovskii import build_scene
from perforated.clusterer import ClusterParams, build_cluster_boxes
from perforated.geometry import StarDomain
from perforated.sampler import PerforatedDomain

N_BOX = 12


def cube_params(cube: float) -> ClusterParams:
    """Box parameters whose grid cube has side ``cube``."""
    return ClusterParams(0.1, 1.0, N_BOX, 1.5, alpha=4.0, scale=2 * N_BOX * cube)


def random_scene(seed: int, resolution: int = 128, method: str = "direct", max_cubes: int = 4):
    """Square domain ``[-1, 1]^2`` with holes in a few random grid cubes.

    Cubes are 28 cells wide, so the box layer is 3.5 cells and holes of
    radius 1.5 to 2 cells with their annuli keep clear of it.
    """
    rng = np.random.default_rng(seed)
    h = 2.0 / resolution
    cube = 28 * h
    params = cube_params(cube)
    lo_i = int(np.ceil((-1 + h + cube / 4) / cube))
    hi_i = int(np.floor((1 - h - cube / 4) / cube)) - 1
    cells = [(i, j) for i in range(lo_i, hi_i + 1) for j in range(lo_i, hi_i + 1)]
    k = int(rng.integers(1, min(max_cubes, len(cells)) + 1))
    chosen = [cells[c] for c in rng.choice(len(cells), size=k, replace=False)]
    centers, radii = [], []
    for ci in chosen:
        lo = np.array(ci) * cube + 2 * h
        hi = np.array(ci) * cube + cube - 2 * h
        for _ in range(int(rng.integers(1, 3))):
            for _attempt in range(50):
                z = lo + (hi - lo) * rng.random(2)
                r = h * rng.uniform(1.5, 2.0)
                if all(np.linalg.norm(z - c) >= 2 * r + 2 * rc + 2 * h for c, rc in zip(centers, radii)):
                    centers.append(z)
                    radii.append(r)
                    break
    centers = np.array(centers).reshape(-1, 2)
    perf = PerforatedDomain(StarDomain.box([1.0, 1.0]), 0.1, 4.0, centers, np.array(radii))
    boxes = build_cluster_boxes(centers, params)
    return build_scene(perf, boxes, params, resolution, method=method)


def tiny_scene(method: str = "direct"):
    """Smallest scene holding a box: 24^2 cells, two holes in corner-touching cubes.

    The box layer is one cell wide, below the production gate of three.
    """
    h = 2.0 / 24
    cube = 8 * h
    params = cube_params(cube)
    centers = np.array([[4 * h, 4 * h], [-4 * h, -4 * h]])
    perf = PerforatedDomain(StarDomain.box([1.0, 1.0]), 0.1, 4.0, centers, np.full(2, 1.5 * h))
    boxes = build_cluster_boxes(centers, params)
    return build_scene(perf, boxes, params, 24, method=method, layer_min_cells=1.0)


def mean_zero_field(scene, rng) -> np.ndarray:
    fluid = scene.grid.fluid
    f = np.where(fluid, rng.standard_normal(scene.grid.dims), 0.0)
    f[fluid] -= f[fluid].mean()
    return f
