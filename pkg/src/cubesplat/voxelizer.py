"""Point-cloud masking, cuboid normalization, voxel hashing, and pooling.

The raw cloud is randomly subsampled (self-supervision mask), mapped into the
unit cube by a uniform similarity (longest bounding-box edge governs the
scale so rigid camera poses stay valid), hashed to voxel indices, and pooled
into a dense feature volume whose occupied cells become Gaussian anchors.

Scatter pooling is an arithmetic mean accumulated in a canonical order
(points sorted by voxel id with a lexicographic feature tie-break), which
makes the result bit-identical under any permutation of the input points.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidInputError
from .geometry import SimilarityTransform

# padding added to the longest bounding-box edge so points land strictly
# inside [0, 1)
EDGE_EPS = 1e-6


@dataclass
class PointCloud:
    """coords: (n, 3) scene units; attrs: (n, 6) = RGB in [0,1] then normals."""

    coords: np.ndarray
    attrs: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.attrs = np.asarray(self.attrs, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise InvalidInputError("coords must have shape (n, 3)")
        if self.coords.shape[0] < 1:
            raise InvalidInputError("point cloud must contain at least one point")
        if self.attrs.shape != (self.coords.shape[0], 6):
            raise InvalidInputError("attrs must have shape (n, 6)")
        rgb = self.attrs[:, :3]
        if rgb.min() < 0 or rgb.max() > 1:
            raise InvalidInputError("RGB attributes must lie in [0, 1]")
        norms = np.linalg.norm(self.attrs[:, 3:], axis=1)
        bad = (norms > 1e-9) & ((norms < 1 - 1e-3) | (norms > 1 + 1e-3))
        if np.any(bad):
            raise InvalidInputError("normals must be unit length or zero (missing)")

    def __len__(self):
        return self.coords.shape[0]


@dataclass(frozen=True)
class GridSpec:
    """Voxel counts per axis."""

    x: int
    y: int
    z: int

    def __post_init__(self):
        for n in (self.x, self.y, self.z):
            if n < 1 or n > 512:
                raise InvalidInputError("grid resolution must lie in [1, 512]")

    @property
    def ncells(self):
        return self.x * self.y * self.z

    @property
    def edges(self):
        """Cell edge lengths in normalized units."""
        return np.array([1.0 / self.x, 1.0 / self.y, 1.0 / self.z])


@dataclass(frozen=True)
class MaskConfig:
    """Random-masking ratio and seed; deterministic for a fixed seed."""

    ratio: float
    seed: int


@dataclass
class DenseVolume:
    """X*Y*Z*dim feature grid; unoccupied cells carry all-zero features."""

    grid: GridSpec
    dim: int
    data: np.ndarray  # (X, Y, Z, dim)
    occupied: np.ndarray  # (X, Y, Z) bool

    @property
    def centers(self):
        """(X, Y, Z, 3) cell midpoints in the unit cube."""
        g = self.grid
        ix = (np.arange(g.x) + 0.5) / g.x
        iy = (np.arange(g.y) + 0.5) / g.y
        iz = (np.arange(g.z) + 0.5) / g.z
        return np.stack(np.meshgrid(ix, iy, iz, indexing="ij"), axis=-1)


def cell_centers_for_ids(grid, ids):
    """Midpoints of cells given flat ids (id = ix + X*(iy + Y*iz))."""
    ids = np.asarray(ids, dtype=np.int64)
    ix = ids % grid.x
    iy = (ids // grid.x) % grid.y
    iz = ids // (grid.x * grid.y)
    return np.stack([(ix + 0.5) / grid.x, (iy + 0.5) / grid.y, (iz + 0.5) / grid.z], axis=-1)


def mask_points(pc, cfg):
    """Keep a uniformly random subset of n - floor(ratio*n) points,
    order-stable by original index."""
    if not 0.0 <= cfg.ratio < 1.0:
        raise InvalidInputError("mask ratio must lie in [0, 1)")
    n = len(pc)
    keep = n - int(np.floor(cfg.ratio * n))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return PointCloud(pc.coords[idx], pc.attrs[idx])


def normalize_to_cuboid(pc):
    """Uniform similarity mapping the cloud's AABB into [0, 1]^3, centered.

    Returns the normalized cloud and the original->normalized transform.
    """
    lo = pc.coords.min(axis=0)
    hi = pc.coords.max(axis=0)
    longest = float((hi - lo).max())
    if longest <= 0.0:
        raise DegenerateInputError("all points coincide; bounding box is degenerate")
    s = 1.0 / (longest + EDGE_EPS)
    t = 0.5 - s * (lo + hi) / 2.0
    transform = SimilarityTransform(s, t)
    return PointCloud(pc.coords * s + t, pc.attrs), transform


def voxel_index(coords, grid):
    """Flat voxel ids: id = ix + X*(iy + Y*iz), top boundary clamped."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.min() < -1e-9 or coords.max() > 1 + 1e-9:
        raise InvalidInputError("coordinates must lie in the unit cube")
    ix = np.clip(np.floor(coords[:, 0] * grid.x).astype(np.int64), 0, grid.x - 1)
    iy = np.clip(np.floor(coords[:, 1] * grid.y).astype(np.int64), 0, grid.y - 1)
    iz = np.clip(np.floor(coords[:, 2] * grid.z).astype(np.int64), 0, grid.z - 1)
    return ix + grid.x * (iy + grid.y * iz)


def canonical_scatter_order(features, ids):
    """Permutation sorting points by (id, feature row lexicographically)."""
    keys = tuple(features[:, c] for c in range(features.shape[1] - 1, -1, -1)) + (ids,)
    return np.lexsort(keys)


def scatter_sums(features, ids, ncells):
    """Per-cell sums and counts in the canonical accumulation order."""
    features = np.asarray(features, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != ids.shape[0]:
        raise InvalidInputError("features must be (m, d) matching ids")
    if ids.size and (ids.min() < 0 or ids.max() >= ncells):
        raise InvalidInputError("voxel id out of range for grid")
    order = canonical_scatter_order(features, ids)
    sums = np.zeros((ncells, features.shape[1]))
    np.add.at(sums, ids[order], features[order])
    counts = np.bincount(ids, minlength=ncells)
    return sums, counts


def scatter_mean(features, ids, grid):
    """Pool features into a DenseVolume by arithmetic mean per occupied cell."""
    sums, counts = scatter_sums(features, ids, grid.ncells)
    occupied_flat = counts > 0
    flat = np.zeros_like(sums)
    flat[occupied_flat] = sums[occupied_flat] / counts[occupied_flat, None]
    dim = sums.shape[1]
    data = flat.reshape(grid.z, grid.y, grid.x, dim).transpose(2, 1, 0, 3)
    occupied = occupied_flat.reshape(grid.z, grid.y, grid.x).transpose(2, 1, 0)
    return DenseVolume(grid=grid, dim=dim, data=data, occupied=occupied)


def occupied_ids(volume):
    """Flat ids of occupied cells in ascending order."""
    flat = volume.occupied.transpose(2, 1, 0).reshape(-1)
    return np.flatnonzero(flat)


def anchors(volume):
    """One (center, feature) pair per occupied cell, ascending id order."""
    ids = occupied_ids(volume)
    centers = cell_centers_for_ids(volume.grid, ids)
    flat = volume.data.transpose(2, 1, 0, 3).reshape(-1, volume.dim)
    return [(centers[k], flat[ids[k]]) for k in range(ids.size)]
