"""BEV voxelization and point/grid interpolation.

Grid nodes sit at cell centers: node ``i`` along x is at
``x0 + (i + 0.5) * resolution``. A query inside the ROI but within half a
cell of its edge is clamped onto the edge nodes, so every in-ROI query has
well-defined weights that sum to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridGeometry:
    """Regular BEV grid. ``z_resolution`` defaults to ``resolution``."""

    origin: tuple[float, float, float]
    resolution: float
    H: int
    W: int
    Z: int
    z_resolution: float | None = None

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if self.z_resolution is not None and not self.z_resolution > 0:
            raise ValueError(f"z_resolution must be positive, got {self.z_resolution}")
        if min(self.H, self.W, self.Z) < 1:
            raise ValueError(f"grid dims must be >= 1, got H={self.H} W={self.W} Z={self.Z}")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def dz(self) -> float:
        return self.resolution if self.z_resolution is None else self.z_resolution

    @property
    def extent(self) -> tuple[float, float, float]:
        return (self.W * self.resolution, self.H * self.resolution, self.Z * self.dz)

    def downsample(self, stride: int) -> "GridGeometry":
        """Geometry of a feature map produced with the given BEV stride (Z kept)."""
        return GridGeometry(self.origin, self.resolution * stride,
                            math.ceil(self.H / stride), math.ceil(self.W / stride), self.Z,
                            self.dz)

    def in_roi(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        x0, y0, z0 = self.origin
        ex, ey, ez = self.extent
        return ((p[:, 0] >= x0) & (p[:, 0] < x0 + ex) & (p[:, 1] >= y0) & (p[:, 1] < y0 + ey)
                & (p[:, 2] >= z0) & (p[:, 2] < z0 + ez))

    def node_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """BEV coordinates (meters) of node columns and rows."""
        x0, y0, _ = self.origin
        return (x0 + (np.arange(self.W) + 0.5) * self.resolution,
                y0 + (np.arange(self.H) + 0.5) * self.resolution)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "resolution": self.resolution, "H": self.H,
                "W": self.W, "Z": self.Z, "z_resolution": self.z_resolution}


DESK_GEOMETRY = GridGeometry((-8.0, -8.0, -1.0), 0.25, 64, 64, 8, z_resolution=0.5)
PAPER_GEOMETRY = GridGeometry((-80.0, -80.0, -2.0), 0.15625, 1024, 1024, 32)


@dataclass
class BevTensor:
    """Dense ``C x H x W`` grid with its geometry."""

    data: np.ndarray
    geom: GridGeometry
    dropped: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def _axis(coord: np.ndarray, lo: float, res: float, n: int):
    u = np.clip((coord - lo) / res - 0.5, 0.0, n - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), max(n - 2, 0))
    f = u - i0
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, f


def trilinear_weights(points: np.ndarray, geom: GridGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Corner indices into the flattened ``Z x H x W`` grid and their weights.

    Returns ``(idx, w)`` of shape ``(N, 8)``. Weights are nonnegative and sum
    to one per point.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x0, y0, z0 = geom.origin
    ix0, ix1, fx = _axis(p[:, 0], x0, geom.resolution, geom.W)
    iy0, iy1, fy = _axis(p[:, 1], y0, geom.resolution, geom.H)
    iz0, iz1, fz = _axis(p[:, 2], z0, geom.dz, geom.Z)
    idx = np.empty((len(p), 8), dtype=np.int64)
    w = np.empty((len(p), 8))
    k = 0
    for iz, wz in ((iz0, 1 - fz), (iz1, fz)):
        for iy, wy in ((iy0, 1 - fy), (iy1, fy)):
            for ix, wx in ((ix0, 1 - fx), (ix1, fx)):
                idx[:, k] = (iz * geom.H + iy) * geom.W + ix
                w[:, k] = wz * wy * wx
                k += 1
    return idx, w


def bilinear_weights(xy: np.ndarray, geom: GridGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Corner indices into the flattened ``H x W`` grid and weights, shape ``(N, 4)``."""
    q = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    x0, y0, _ = geom.origin
    ix0, ix1, fx = _axis(q[:, 0], x0, geom.resolution, geom.W)
    iy0, iy1, fy = _axis(q[:, 1], y0, geom.resolution, geom.H)
    idx = np.stack([iy0 * geom.W + ix0, iy0 * geom.W + ix1, iy1 * geom.W + ix0, iy1 * geom.W + ix1], axis=1)
    w = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1)
    return idx, w


def gather(grid: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Interpolate a ``(F, M)`` flattened grid at precomputed corners -> ``(N, F)``."""
    return np.einsum("fnk,nk->nf", grid[:, idx], w)


def scatter(values: np.ndarray, idx: np.ndarray, w: np.ndarray, size: int) -> np.ndarray:
    """Adjoint of :func:`gather`: ``(N, F)`` values -> ``(F, size)`` grid."""
    values = np.asarray(values, dtype=np.float64).reshape(len(idx), -1)
    flat_idx = idx.ravel()
    out = np.empty((values.shape[1], size))
    for f in range(values.shape[1]):
        out[f] = np.bincount(flat_idx, weights=(w * values[:, f:f + 1]).ravel(), minlength=size)
    return out


def voxelize(points: np.ndarray, geom: GridGeometry) -> BevTensor:
    """Scatter unit point masses onto the grid; the Z axis becomes channels.

    Occupancy is the raw sum of masses (not clamped). Points outside the ROI
    are dropped and counted in ``BevTensor.dropped``.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = geom.in_roi(p)
    idx, w = trilinear_weights(p[keep], geom)
    size = geom.Z * geom.H * geom.W
    grid = np.bincount(idx.ravel(), weights=w.ravel(), minlength=size)
    return BevTensor(grid.reshape(geom.Z, geom.H, geom.W), geom, dropped=int((~keep).sum()))


def trilinear_sample(volume: np.ndarray, points: np.ndarray, geom: GridGeometry) -> np.ndarray:
    """Sample an ``F x Z x H x W`` volume at 3D points -> ``(N, F)``."""
    F = volume.shape[0]
    idx, w = trilinear_weights(points, geom)
    return gather(volume.reshape(F, -1), idx, w)


def bilinear_sample(feature_map: np.ndarray, xy: np.ndarray, geom: GridGeometry) -> np.ndarray:
    """Sample a ``K x H x W`` map at BEV positions -> ``(N, K)``."""
    K = feature_map.shape[0]
    idx, w = bilinear_weights(xy, geom)
    return gather(feature_map.reshape(K, -1), idx, w)
