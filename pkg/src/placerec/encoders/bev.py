"""Point cloud branch: bird's-eye-view occupancy grid fed to the 1-channel CNN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from placerec.encoders.cnn import CnnEncoder, CnnEncoderConfig
from placerec.errors import DataError
from placerec.numcore import Module, Tensor, no_grad


@dataclass
class BevConfig:
    half_extent: float = 20.0  # meters, grid covers [-e, e) on x and y
    resolution: int = 64
    saturation_count: int = 5

    def __post_init__(self):
        if self.half_extent <= 0:
            raise ValueError("half_extent must be positive")
        if self.resolution < 4:
            raise ValueError("resolution must be >= 4")
        if self.saturation_count < 1:
            raise ValueError("saturation_count must be >= 1")

    @property
    def bounds(self):
        e = self.half_extent
        return ((-e, e), (-e, e))


def voxelize_bev(points: np.ndarray, bounds, resolution: int, saturation_count: int = 5) -> np.ndarray:
    """Occupancy grid (1, R, R): row = y cell, column = x cell, value = min(1, count / saturation).

    ``bounds`` is ((xmin, xmax), (ymin, ymax)), half-open. z is discarded.
    Raises DataError on an empty cloud or when no point falls inside the bounds.
    """
    if resolution < 4:
        raise ValueError("resolution must be >= 4")
    (x0, x1), (y0, y1) = bounds
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"invalid bounds {bounds}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"point cloud must be (n, 3), got {pts.shape}")
    if len(pts) == 0:
        raise DataError("cannot voxelize an empty point cloud")
    if not np.isfinite(pts).all():
        raise DataError("point cloud contains non-finite coordinates")
    x, y = pts[:, 0], pts[:, 1]
    inside = (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
    if not inside.any():
        raise DataError("every point lies outside the BEV bounds")
    ix = np.floor((x[inside] - x0) / (x1 - x0) * resolution).astype(np.int64)
    iy = np.floor((y[inside] - y0) / (y1 - y0) * resolution).astype(np.int64)
    np.minimum(ix, resolution - 1, out=ix)
    np.minimum(iy, resolution - 1, out=iy)
    counts = np.bincount(iy * resolution + ix, minlength=resolution * resolution)
    grid = np.minimum(1.0, counts / float(saturation_count))
    return grid.reshape(1, resolution, resolution)


class PointCloudEncoder(Module):
    def __init__(self, bev: BevConfig, cnn: CnnEncoderConfig, rng: np.random.Generator):
        if cnn.in_channels != 1:
            raise ValueError("the BEV encoder consumes a 1-channel grid")
        self.bev = bev
        self.cnn = CnnEncoder(cnn, rng)

    def grid(self, points: np.ndarray) -> np.ndarray:
        """Channels-last (R, R, 1) occupancy raster; not differentiable."""
        g = voxelize_bev(points, self.bev.bounds, self.bev.resolution, self.bev.saturation_count)
        return g.transpose(1, 2, 0)

    def forward(self, grids) -> Tensor:
        return self.cnn(grids)


def encode_pointcloud(points: np.ndarray, encoder: PointCloudEncoder) -> np.ndarray:
    with no_grad():
        return encoder(Tensor(encoder.grid(points)[None])).data[0].copy()
