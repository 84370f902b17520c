import logging
import math
import os
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.errors import (
    DegenerateDirectionError,
    FormatError,
    ParameterError,
    PreconditionError,
)
from app.pointcloud_io import PointCloud
from app.utils import atomic_write_bytes

log = logging.getLogger(__name__)

CHANNELS = ("x", "y", "z", "range", "intensity")
RANGE_IMAGE_MAGIC = b"RIMG"
# magic, width, height, azimuth_min, azimuth_max
HEADER = struct.Struct("<4sIIdd")
# fraction of a bin
EDGE_SNAP = 1e-9


class GridConfig(BaseModel):
    """Azimuth/beam discretisation of a range image. Defaults to 512 x 64 over a 90 degree frontal FOV."""

    model_config = ConfigDict(frozen=True)

    width: int = Field(default=512, ge=1)
    num_beams: int = Field(default=64, ge=1)
    azimuth_min: float = -math.pi / 4
    azimuth_max: float = math.pi / 4

    @model_validator(mode="after")
    def check_fov(self) -> "GridConfig":
        if not self.azimuth_max > self.azimuth_min:
            raise ValueError("azimuth_max must be greater than azimuth_min")
        # arcsin azimuths cannot tell the front from the back
        if self.azimuth_min < -math.pi / 2 or self.azimuth_max > math.pi / 2:
            raise ValueError("azimuth range must lie inside [-pi/2, pi/2]")
        return self

    @classmethod
    def from_fov(cls, width: int = 512, num_beams: int = 64, fov_deg: float = 90.0) -> "GridConfig":
        half = math.radians(fov_deg) / 2
        return cls(width=width, num_beams=num_beams, azimuth_min=-half, azimuth_max=half)

    @property
    def delta_phi(self) -> float:
        return (self.azimuth_max - self.azimuth_min) / self.width

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.num_beams


class RangeMode(str, Enum):
    beam = "beam"
    spherical = "spherical"


class SphericalParams(BaseModel):
    """Elevation binning for spherical mode: row = floor((theta - theta_min) / delta_theta)."""

    model_config = ConfigDict(frozen=True)

    delta_theta: float = Field(gt=0)
    theta_min: float


@dataclass(frozen=True)
class RangeImage:
    """
    Dense H x W x 5 LiDAR image (x, y, z, range, intensity) with a validity mask.

    `source_index` holds the original point index per valid pixel and -1 elsewhere;
    it is None for images read back from disk.
    """

    channels: np.ndarray
    valid: np.ndarray
    cfg: GridConfig
    source_index: Optional[np.ndarray] = None

    def __post_init__(self):
        expected = (self.cfg.num_beams, self.cfg.width)
        if self.channels.shape != expected + (len(CHANNELS),):
            raise ParameterError(f"channels shape {self.channels.shape} != {expected + (5,)}")
        if self.valid.shape != expected:
            raise ParameterError(f"mask shape {self.valid.shape} != {expected}")
        for array in (self.channels, self.valid, self.source_index):
            if array is not None:
                array.setflags(write=False)

    @property
    def width(self) -> int:
        return self.cfg.width

    @property
    def height(self) -> int:
        return self.cfg.num_beams

    @property
    def size(self) -> Tuple[int, int]:
        return self.cfg.size

    @property
    def fov(self) -> Tuple[float, float]:
        return self.cfg.azimuth_min, self.cfg.azimuth_max

    @property
    def xyz(self) -> np.ndarray:
        return self.channels[..., :3]

    @property
    def range(self) -> np.ndarray:
        return self.channels[..., 3]

    @property
    def intensity(self) -> np.ndarray:
        return self.channels[..., 4]

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.valid))

    def __repr__(self) -> str:
        return f"<RangeImage {self.width}x{self.height} valid={self.valid_count}>"


def azimuth_of(point: Sequence[float]) -> float:
    """
    Horizontal angle arcsin(y / sqrt(x^2 + y^2)); meaningful for the forward hemisphere.

    Raises:
        DegenerateDirectionError: If x = y = 0
    """
    x, y = float(point[0]), float(point[1])
    rho = math.hypot(x, y)
    if rho == 0.0:
        raise DegenerateDirectionError(f"azimuth undefined for {tuple(point)}")
    return math.asin(y / rho)


def zenith_of(point: Sequence[float]) -> float:
    """
    Vertical angle arcsin(z / r).

    Raises:
        DegenerateDirectionError: If the point is the origin
    """
    x, y, z = (float(v) for v in point[:3])
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        raise DegenerateDirectionError(f"zenith undefined for {tuple(point)}")
    return math.asin(z / r)


def azimuths(xyz: np.ndarray) -> np.ndarray:
    """Vectorised azimuth_of; NaN where x = y = 0."""
    rho = np.hypot(xyz[:, 0], xyz[:, 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.arcsin(np.clip(xyz[:, 1] / rho, -1.0, 1.0))


def zeniths(xyz: np.ndarray) -> np.ndarray:
    """Vectorised zenith_of; NaN at the origin."""
    r = np.linalg.norm(xyz, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.arcsin(np.clip(xyz[:, 2] / r, -1.0, 1.0))


def azimuth_columns(phi: np.ndarray, cfg: GridConfig) -> np.ndarray:
    # a point on a bin edge belongs to the upper bin, even after rounding in arcsin
    columns = np.floor((phi - cfg.azimuth_min) / cfg.delta_phi + EDGE_SNAP).astype(np.int64)
    # floating point can push phi just below azimuth_max into bin W
    return np.minimum(columns, cfg.width - 1)


def build_range_image(
    cloud: PointCloud,
    cfg: GridConfig = GridConfig(),
    mode: RangeMode = RangeMode.beam,
    spherical: Optional[SphericalParams] = None,
) -> RangeImage:
    """
    Discretise a point cloud into a range image.

    Columns come from the azimuth over the half-open range [azimuth_min, azimuth_max); rows from the
    beam id (beam mode) or from binned elevation (spherical mode). Points behind the sensor (x <= 0)
    or outside the grid are dropped. When several points share a cell, the one whose azimuth is
    closest to the cell's center wins, ties going to the smaller point index.

    Args:
        cloud (PointCloud): Input cloud
        cfg (GridConfig, optional): Grid layout. Defaults to 512 x 64 over 90 degrees.
        mode (RangeMode, optional): Row assignment. Defaults to RangeMode.beam.
        spherical (Optional[SphericalParams], optional): Elevation binning, required in spherical mode.

    Raises:
        PreconditionError: Beam mode on a cloud without beam ids, or beam ids >= H
        ParameterError: Spherical mode without SphericalParams

    Returns:
        RangeImage: The dense image
    """
    mode = RangeMode(mode)
    H, W = cfg.num_beams, cfg.width

    if mode == RangeMode.beam:
        if not cloud.has_beam_ids:
            raise PreconditionError("beam mode needs a cloud with beam ids")
        if len(cloud) and cloud.beam_id.max() >= H:
            raise PreconditionError(
                f"beam id {cloud.beam_id.max()} does not fit a {H}-row image"
            )
    elif spherical is None:
        raise ParameterError("spherical mode needs SphericalParams")

    xyz = cloud.xyz
    index = np.arange(len(cloud))
    phi = azimuths(xyz)
    keep = (xyz[:, 0] > 0) & (phi >= cfg.azimuth_min) & (phi < cfg.azimuth_max)

    if mode == RangeMode.beam:
        rows = cloud.beam_id
    else:
        theta = zeniths(xyz)
        with np.errstate(invalid="ignore"):
            rows = np.floor(
                (theta - spherical.theta_min) / spherical.delta_theta + EDGE_SNAP
            )
        keep &= np.isfinite(rows)
        rows = np.where(np.isfinite(rows), rows, -1).astype(np.int64)
        keep &= (rows >= 0) & (rows < H)

    index, phi, rows = index[keep], phi[keep], rows[keep]
    columns = azimuth_columns(phi, cfg)
    center = cfg.azimuth_min + (columns + 0.5) * cfg.delta_phi
    cell = rows * W + columns

    # order by cell, then distance to the bin center, then original index
    order = np.lexsort((index, np.abs(phi - center), cell))
    _, first = np.unique(cell[order], return_index=True)
    winners = order[first]

    channels = np.zeros((H, W, len(CHANNELS)), dtype=np.float64)
    valid = np.zeros((H, W), dtype=bool)
    source_index = np.full((H, W), -1, dtype=np.int64)

    r, c, src = rows[winners], columns[winners], index[winners]
    points = xyz[src]
    channels[r, c, :3] = points
    channels[r, c, 3] = np.linalg.norm(points, axis=1)
    channels[r, c, 4] = cloud.intensity[src]
    valid[r, c] = True
    source_index[r, c] = src

    dropped = len(cloud) - len(src)
    log.debug(f"Range image {W}x{H}: {len(src)} valid pixels, {dropped} points dropped")
    return RangeImage(channels=channels, valid=valid, cfg=cfg, source_index=source_index)


def round_trip_points(img: RangeImage) -> PointCloud:
    """
    Emit one point per valid pixel, in row-major order, with the row as beam id.

    Args:
        img (RangeImage): Source image

    Returns:
        PointCloud: Recovered points
    """
    rows, _ = np.nonzero(img.valid)
    values = img.channels[img.valid]
    return PointCloud(
        xyz=values[:, :3],
        intensity=values[:, 4],
        beam_id=rows,
        num_beams=img.height,
    )


def write_range_image(img: RangeImage, path: Union[str, os.PathLike]) -> Path:
    """
    Cache a range image: header (magic, W, H, fov) then float32 channels and a byte mask, row-major.
    """
    header = HEADER.pack(
        RANGE_IMAGE_MAGIC, img.width, img.height, img.cfg.azimuth_min, img.cfg.azimuth_max
    )
    payload = (
        img.channels.astype("<f4").tobytes() + img.valid.astype(np.uint8).tobytes()
    )
    return atomic_write_bytes(path, header + payload)


def read_range_image(path: Union[str, os.PathLike]) -> RangeImage:
    """
    Read a range image written by write_range_image.

    Raises:
        FormatError: Bad magic or wrong payload size
    """
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, W, H, azimuth_min, azimuth_max = HEADER.unpack_from(data)
    if magic != RANGE_IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")

    channel_bytes = H * W * len(CHANNELS) * 4
    expected = HEADER.size + channel_bytes + H * W
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")

    channels = np.frombuffer(data, dtype="<f4", count=H * W * len(CHANNELS), offset=HEADER.size)
    mask = np.frombuffer(data, dtype=np.uint8, offset=HEADER.size + channel_bytes)
    cfg = GridConfig(width=W, num_beams=H, azimuth_min=azimuth_min, azimuth_max=azimuth_max)
    return RangeImage(
        channels=channels.reshape(H, W, len(CHANNELS)).astype(np.float64),
        valid=mask.reshape(H, W).astype(bool),
        cfg=cfg,
    )
