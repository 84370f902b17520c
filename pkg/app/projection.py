import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence, Tuple, Union

import numpy as np

from app.errors import BehindCameraError
from app.pointcloud_io import CalibrationSet
from app.range_image import RangeImage
from app.utils import atomic_write_bytes

log = logging.getLogger(__name__)

EPS_DEPTH = 1e-6


def project_point(
    P: np.ndarray, X: Sequence[float], eps_depth: float = EPS_DEPTH
) -> Tuple[float, float]:
    """
    Project a 3D point with a 3x4 matrix: (a, b, w) = P [x, y, z, 1], pixel = (a / w, b / w).

    Args:
        P (np.ndarray): 3x4 projection
        X (Sequence[float]): Point in LiDAR coordinates, meters
        eps_depth (float, optional): Minimum depth. Defaults to 1e-6.

    Raises:
        BehindCameraError: If w <= eps_depth

    Returns:
        Tuple[float, float]: (u, v) in pixels
    """
    a, b, w = np.asarray(P, dtype=np.float64) @ np.append(np.asarray(X, dtype=np.float64)[:3], 1.0)
    if not w > eps_depth:
        raise BehindCameraError(f"point {tuple(X)} has depth {w} <= {eps_depth}")
    return float(a / w), float(b / w)


def project_points(
    P: np.ndarray, xyz: np.ndarray, eps_depth: float = EPS_DEPTH
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised project_point.

    Returns:
        Tuple[np.ndarray, np.ndarray]: N x 2 pixel coordinates (NaN where rejected) and the
            boolean mask of points in front of the camera
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    homogeneous = np.hstack([xyz, np.ones((len(xyz), 1))]) @ np.asarray(P, dtype=np.float64).T
    depth = homogeneous[:, 2]
    in_front = depth > eps_depth
    uv = np.full((len(xyz), 2), np.nan)
    uv[in_front] = homogeneous[in_front, :2] / depth[in_front, None]
    return uv, in_front


def inside_image(uv: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Closed bounds [0, W-1] x [0, H-1] under the pixel-center convention. NaN is outside."""
    W, H = size
    with np.errstate(invalid="ignore"):
        return (
            (uv[:, 0] >= 0) & (uv[:, 0] <= W - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= H - 1)
        )


class Correspondence(NamedTuple):
    range_px: Tuple[float, float]
    rgb_px: Tuple[float, float]


@dataclass(frozen=True)
class CorrespondenceSet:
    """
    Range pixel to RGB pixel pairs, at most one per range pixel, in row-major scan order.

    Args:
        range_px (np.ndarray): N x 2 (column, row)
        rgb_px (np.ndarray): N x 2 (u, v)
        rgb_size (Tuple[int, int]): (W, H) of the RGB image
        range_size (Tuple[int, int]): (W, H) of the range image
    """

    range_px: np.ndarray
    rgb_px: np.ndarray
    rgb_size: Tuple[int, int]
    range_size: Tuple[int, int]

    def __post_init__(self):
        for array in (self.range_px, self.rgb_px):
            array.setflags(write=False)

    def __len__(self) -> int:
        return len(self.range_px)

    def __iter__(self) -> Iterator[Correspondence]:
        for (c, r), (u, v) in zip(self.range_px.tolist(), self.rgb_px.tolist()):
            yield Correspondence(range_px=(c, r), rgb_px=(u, v))

    def __repr__(self) -> str:
        return f"<CorrespondenceSet items={len(self)} rgb_size={self.rgb_size} range_size={self.range_size}>"

    def subset(self, indices: np.ndarray) -> "CorrespondenceSet":
        indices = np.asarray(indices, dtype=np.int64)
        return CorrespondenceSet(
            range_px=self.range_px[indices],
            rgb_px=self.rgb_px[indices],
            rgb_size=self.rgb_size,
            range_size=self.range_size,
        )


def build_correspondences(
    img: RangeImage, calib: CalibrationSet, rgb_size: Tuple[int, int]
) -> CorrespondenceSet:
    """
    Project the stored point of every valid range pixel into the RGB image.
    Pixels behind the camera or projecting outside [0, W-1] x [0, H-1] are skipped.

    Args:
        img (RangeImage): Source range image
        calib (CalibrationSet): Calibration holding P
        rgb_size (Tuple[int, int]): (W, H) of the RGB image

    Returns:
        CorrespondenceSet: The correspondences
    """
    rgb_size = (int(rgb_size[0]), int(rgb_size[1]))
    rows, columns = np.nonzero(img.valid)
    uv, in_front = project_points(calib.P, img.xyz[rows, columns])
    keep = in_front & inside_image(uv, rgb_size)

    log.debug(
        f"{int(keep.sum())} of {len(rows)} valid pixels project into the {rgb_size} image"
    )
    return CorrespondenceSet(
        range_px=np.stack([columns[keep], rows[keep]], axis=1).astype(np.float64),
        rgb_px=uv[keep],
        rgb_size=rgb_size,
        range_size=img.size,
    )


def write_correspondences(
    correspondences: CorrespondenceSet, path: Union[str, os.PathLike]
) -> Path:
    """Write one "rcol rrow u v" line per correspondence."""
    lines = "".join(
        f"{c:g} {r:g} {u!r} {v!r}\n"
        for (c, r), (u, v) in correspondences
    )
    return atomic_write_bytes(path, lines.encode())
