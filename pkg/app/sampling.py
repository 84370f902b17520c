import logging
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Sequence, Tuple, Union

import numpy as np

from app.errors import ParameterError

log = logging.getLogger(__name__)

Stride = Union[int, float, str, Fraction]

# grid pixels
BOUNDS_TOL = 1e-9


def as_stride(stride: Stride) -> Fraction:
    value = Fraction(stride).limit_denominator(1 << 16)
    if value <= 0:
        raise ParameterError(f"stride must be positive, got {stride}")
    return value


@dataclass(frozen=True)
class FeatureGrid:
    """
    H x W x C float32 grid at `stride` source pixels per grid pixel.

    Args:
        data (np.ndarray): H x W x C values
        stride (Stride): Source-image pixels per feature pixel
        source_size (Tuple[int, int]): (W0, H0) of the originating image
    """

    data: np.ndarray
    stride: Fraction
    source_size: Tuple[int, int]

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3:
            raise ParameterError(f"feature grid must be H x W x C, got {data.shape}")
        stride = as_stride(self.stride)
        W0, H0 = (int(v) for v in self.source_size)
        H, W = data.shape[:2]
        if math.ceil(W0 / stride) < W or math.ceil(H0 / stride) < H:
            raise ParameterError(
                f"{W}x{H} grid at stride {stride} exceeds its {W0}x{H0} source"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "source_size", (W0, H0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"<FeatureGrid {self.height}x{self.width}x{self.channels} stride={self.stride}>"


class SeedPolicy(str, Enum):
    center = "center"
    index0 = "index0"


def center_seed(points: np.ndarray, size: Tuple[int, int]) -> int:
    """Index of the point closest to the center of a W x H image (smallest index on ties)."""
    W, H = size
    center = np.array([(W - 1) / 2, (H - 1) / 2])
    return int(np.argmin(np.sum((np.asarray(points) - center) ** 2, axis=1)))


def farthest_point_sample(points: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """
    Greedy farthest point sampling.

    Starting at `seed`, repeatedly take the point with the largest distance to the selected set;
    ties go to the smallest index. Distances are compared squared.

    Args:
        points (np.ndarray): M x D coordinates
        k (int): Number of points to select
        seed (int, optional): Index of the first point. Defaults to 0.

    Raises:
        ParameterError: If k is not in [1, M] or seed is not in [0, M)

    Returns:
        np.ndarray: k indices in selection order
    """
    points = np.asarray(points, dtype=np.float64)
    M = len(points)
    if not 1 <= k <= M:
        raise ParameterError(f"k must lie in [1, {M}], got {k}")
    if not 0 <= seed < M:
        raise ParameterError(f"seed must lie in [0, {M}), got {seed}")

    selected = np.empty(k, dtype=np.int64)
    selected[0] = seed
    min_dist = np.sum((points - points[seed]) ** 2, axis=1)
    min_dist[seed] = -1.0

    for i in range(1, k):
        # argmax returns the first maximum
        nxt = int(np.argmax(min_dist))
        selected[i] = nxt
        # selected points stay at -1 since distances are never negative
        np.minimum(min_dist, np.sum((points - points[nxt]) ** 2, axis=1), out=min_dist)
        min_dist[nxt] = -1.0

    return selected


def in_bounds(positions: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """
    Closed-bounds test [0, W-1] x [0, H-1] with a BOUNDS_TOL slack; NaN is out of bounds.
    Spline round-off puts exact border queries a few ulps outside the grid.
    """
    W, H = size
    x, y = positions[:, 0], positions[:, 1]
    with np.errstate(invalid="ignore"):
        return (
            (x >= -BOUNDS_TOL)
            & (x <= W - 1 + BOUNDS_TOL)
            & (y >= -BOUNDS_TOL)
            & (y <= H - 1 + BOUNDS_TOL)
        )


def bilinear_sample_many(grid: FeatureGrid, positions: np.ndarray) -> np.ndarray:
    """
    Bilinearly sample a feature grid at continuous (x, y) grid coordinates.

    Positions failing in_bounds return zeros. Indices are floor and floor + 1
    clamped to the last row/column; at an exact edge the clamped neighbor has zero weight.

    Args:
        grid (FeatureGrid): Grid to sample
        positions (np.ndarray): M x 2 positions

    Returns:
        np.ndarray: M x C float32 samples
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    H, W, C = grid.shape
    out = np.zeros((len(positions), C), dtype=np.float32)

    inside = in_bounds(positions, (W, H))
    if not inside.any():
        return out

    x = np.clip(positions[inside, 0], 0, W - 1)
    y = np.clip(positions[inside, 1], 0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (x - x0)[:, None]
    wy = (y - y0)[:, None]

    data = grid.data
    top = data[y0, x0] * (1 - wx) + data[y0, x1] * wx
    bottom = data[y1, x0] * (1 - wx) + data[y1, x1] * wx
    out[inside] = top * (1 - wy) + bottom * wy
    return out


def bilinear_sample(grid: FeatureGrid, pos: Sequence[float]) -> np.ndarray:
    """
    Sample one position; see bilinear_sample_many.

    Returns:
        np.ndarray: C-vector
    """
    return bilinear_sample_many(grid, np.asarray(pos, dtype=np.float64).reshape(1, 2))[0]
