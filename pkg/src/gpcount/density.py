"""Point annotations and their rasterization into density maps.

Each annotated point contributes one isotropic Gaussian evaluated at pixel
centers, truncated at the image boundary and renormalized so the point's
total mass is exactly one.  Summing a map therefore recovers the number of
annotated points up to floating-point error, which is what makes density
maps usable as counting targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AnnotationError, DataDomainError, ShapeError

DEFAULT_SIGMA = 2.0


@dataclass(frozen=True)
class PointAnnotation:
    """One annotated head position in pixel coordinates (x right, y down)."""
    x: float
    y: float


@dataclass(frozen=True)
class DensityMap:
    """A nonnegative H x W density surface whose integral is a count."""
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"DensityMap: values must be 2-D, got {v.shape}")
        if np.any(v < 0.0) or not np.all(np.isfinite(v)):
            raise DataDomainError("DensityMap: values must be finite and >= 0")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def synthesize_density(points, height: int, width: int,
                       sigma: float = DEFAULT_SIGMA) -> DensityMap:
    """Rasterize point annotations into a density map.

    Every point must satisfy 0 <= x < width and 0 <= y < height; each one
    adds a unit-mass truncated Gaussian of spread ``sigma`` (pixels).
    """
    height, width = int(height), int(width)
    if height < 1 or width < 1:
        raise ShapeError("synthesize_density: image extents must be positive")
    if not sigma > 0.0:
        raise DataDomainError(f"synthesize_density: sigma must be > 0, got {sigma}")
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    out = np.zeros((height, width), dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    for i, p in enumerate(points):
        px, py = float(p.x), float(p.y)
        if not (0.0 <= px < width and 0.0 <= py < height):
            raise AnnotationError(
                f"point {i} at ({px}, {py}) lies outside a {width}x{height} image")
        # The kernel is separable, so build it as an outer product and
        # renormalize by the discrete (truncated) total.
        gx = np.exp(-((xs - px) ** 2) * inv)
        gy = np.exp(-((ys - py) ** 2) * inv)
        total = gy.sum() * gx.sum()
        out += np.outer(gy, gx) / total
    return DensityMap(out)


def count(density: DensityMap) -> float:
    """Total mass of a density map (the estimated object count)."""
    return float(density.values.sum())
