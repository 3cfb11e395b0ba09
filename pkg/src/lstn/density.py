"""Ground-truth density maps from head annotations."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import AnnotationError, ParameterError
from .tensor import Tensor, default_dtype

DEFAULT_SIGMA = 3.0


@dataclass(frozen=True)
class HeadAnnotation:
    x: float
    y: float


@dataclass
class DensityMap:
    """Non-negative grid whose sum is a crowd count.

    ``grid`` may carry an autodiff graph (regressor output) or be a plain
    leaf (ground truth).
    """

    grid: Tensor
    downsample_factor: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def numpy(self) -> np.ndarray:
        return self.grid.data


def gaussian_kernel(sigma: float, radius: int) -> Tensor:
    """Isotropic 2-D Gaussian sampled at integer offsets ``-radius..radius``."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if radius < 0:
        raise ParameterError(f"radius must be non-negative, got {radius}")
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    r2 = d[:, None] ** 2 + d[None, :] ** 2
    k = np.exp(-r2 / (2 * sigma**2)) / (2 * math.pi * sigma**2)
    return Tensor(k, dtype=default_dtype())


def kernel_radius(sigma: float) -> int:
    return int(math.ceil(3 * sigma))


def _axis_weights(frac: float, radius: int, sigma: float) -> np.ndarray:
    # Offsets of cell centers m + 0.5 from a head at fractional position frac.
    d = np.arange(-radius, radius + 1, dtype=np.float64) + 0.5 - frac
    return np.exp(-(d * d) / (2 * sigma**2))


def rasterize_density(heads: Iterable, height: int, width: int, sigma: float = DEFAULT_SIGMA,
                      renormalize: bool = True, frame: int | None = None,
                      downsample_factor: int = 1) -> DensityMap:
    """Sum one truncated Gaussian per head on a ``height x width`` grid.

    Head coordinates are in grid pixels; cell ``(i, j)`` spans
    ``[j, j+1) x [i, i+1)`` and its value is the Gaussian evaluated at the
    cell center.  Each kernel is truncated at radius ``ceil(3 * sigma)`` and
    clipped to the grid; with ``renormalize`` the clipped kernel is
    rescaled to unit mass so the map sums to the head count.

    The per-head stamp depends only on the fractional part of the
    coordinate, so integer translations of all heads translate the map
    exactly.
    """
    if height <= 0 or width <= 0:
        raise ParameterError(f"grid dimensions must be positive, got {height}x{width}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    r = kernel_radius(sigma)
    acc = np.zeros((height, width), dtype=np.float64)
    norm = 1.0 / (2 * math.pi * sigma**2)
    where = f"frame {frame} " if frame is not None else ""
    for idx, head in enumerate(heads):
        x, y = (head.x, head.y) if isinstance(head, HeadAnnotation) else head
        if not (0 <= x < width and 0 <= y < height):
            raise AnnotationError(f"{where}head {idx} at ({x}, {y}) outside {width}x{height} grid")
        cx, cy = math.floor(x), math.floor(y)
        stamp = np.outer(_axis_weights(y - cy, r, sigma), _axis_weights(x - cx, r, sigma)) * norm
        y0, x0 = cy - r, cx - r
        sy0, sx0 = max(0, -y0), max(0, -x0)
        sy1 = stamp.shape[0] - max(0, y0 + stamp.shape[0] - height)
        sx1 = stamp.shape[1] - max(0, x0 + stamp.shape[1] - width)
        part = stamp[sy0:sy1, sx0:sx1]
        if renormalize:
            part = part / part.sum()
        acc[y0 + sy0:y0 + sy1, x0 + sx0:x0 + sx1] += part
    return DensityMap(Tensor(acc.astype(default_dtype())), downsample_factor)


def count(density) -> float:
    """Integrate a density map (sum of all cells), accumulated in float64."""
    grid = density.grid if isinstance(density, DensityMap) else density
    data = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    return float(data.sum(dtype=np.float64))


def density_for_frame(heads: Sequence, frame_h: int, frame_w: int, downsample: int,
                      sigma: float = DEFAULT_SIGMA, frame: int | None = None) -> DensityMap:
    """Rasterize frame-pixel head coordinates onto the regressor's output grid."""
    scaled = [(x / downsample, y / downsample) for x, y in heads]
    return rasterize_density(scaled, frame_h // downsample, frame_w // downsample, sigma,
                             renormalize=True, frame=frame, downsample_factor=downsample)
