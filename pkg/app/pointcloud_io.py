import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from PIL import Image

from app.errors import FormatError, ParameterError
from app.utils import atomic_write_bytes

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

KITTI_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")])
NATIVE_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"), ("beam_id", "<u4")]
)
LABEL_DTYPE = np.dtype("<u4")

CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class PointCloud:
    """
    Unordered LiDAR returns.

    Args:
        xyz (np.ndarray): N x 3 coordinates in meters
        intensity (np.ndarray): N reflectance values in [0, 1]
        beam_id (Optional[np.ndarray], optional): N row indices, or None when unknown. Defaults to None.
        num_beams (Optional[int], optional): Number of beams the ids index into. Defaults to None.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    beam_id: Optional[np.ndarray] = None
    num_beams: Optional[int] = None

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        intensity = np.array(self.intensity, dtype=np.float64).reshape(-1)
        if len(intensity) != len(xyz):
            raise ParameterError(
                f"intensity has {len(intensity)} values for {len(xyz)} points"
            )
        if not np.isfinite(xyz).all():
            bad = int(np.flatnonzero(~np.isfinite(xyz).all(axis=1))[0])
            raise FormatError(f"non-finite coordinate at point {bad}")

        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "intensity", _frozen(intensity))

        if self.beam_id is not None:
            beam_id = np.array(self.beam_id, dtype=np.int64).reshape(-1)
            if len(beam_id) != len(xyz):
                raise ParameterError(
                    f"beam_id has {len(beam_id)} values for {len(xyz)} points"
                )
            num_beams = self.num_beams
            if num_beams is None:
                num_beams = int(beam_id.max()) + 1 if len(beam_id) else 1
            if len(beam_id) and (beam_id.min() < 0 or beam_id.max() >= num_beams):
                raise ParameterError(f"beam ids must lie in [0, {num_beams})")
            object.__setattr__(self, "beam_id", _frozen(beam_id))
            object.__setattr__(self, "num_beams", num_beams)

    def __len__(self) -> int:
        return len(self.xyz)

    def __repr__(self) -> str:
        return f"<PointCloud points={len(self)} beams={self.num_beams}>"

    @property
    def has_beam_ids(self) -> bool:
        return self.beam_id is not None

    def with_beam_ids(self, beam_id: np.ndarray, num_beams: int) -> "PointCloud":
        return PointCloud(
            xyz=self.xyz, intensity=self.intensity, beam_id=beam_id, num_beams=num_beams
        )


def _pad4(matrix: np.ndarray) -> np.ndarray:
    """Embed a 3x3 or 3x4 matrix into 4x4 homogeneous form."""
    padded = np.eye(4)
    padded[: matrix.shape[0], : matrix.shape[1]] = matrix
    return padded


@dataclass(frozen=True)
class CalibrationSet:
    """
    Camera/LiDAR calibration, with the composed LiDAR to pixel projection P.

    Build it with `CalibrationSet.compose` unless the composed matrix was stored separately.
    """

    camera_intrinsics_projective: np.ndarray
    rectifying_rotation: np.ndarray
    lidar_to_camera: np.ndarray
    composed_projection: np.ndarray

    def __post_init__(self):
        p2 = np.array(self.camera_intrinsics_projective, dtype=np.float64).reshape(3, 4)
        r0 = np.array(self.rectifying_rotation, dtype=np.float64).reshape(3, 3)
        tr = np.array(self.lidar_to_camera, dtype=np.float64).reshape(3, 4)
        projection = np.array(self.composed_projection, dtype=np.float64).reshape(3, 4)

        rotation = tr[:, :3]
        if not np.allclose(rotation @ rotation.T, np.eye(3), rtol=0.0, atol=1e-6):
            raise ParameterError("lidar_to_camera rotation block is not orthonormal")
        expected = p2 @ _pad4(r0) @ _pad4(tr)
        if not np.allclose(projection, expected, rtol=0.0, atol=1e-12):
            raise ParameterError("composed_projection does not match its components")

        object.__setattr__(self, "camera_intrinsics_projective", _frozen(p2))
        object.__setattr__(self, "rectifying_rotation", _frozen(r0))
        object.__setattr__(self, "lidar_to_camera", _frozen(tr))
        object.__setattr__(self, "composed_projection", _frozen(projection))

    @classmethod
    def compose(
        cls,
        camera_intrinsics_projective: np.ndarray,
        rectifying_rotation: np.ndarray,
        lidar_to_camera: np.ndarray,
    ) -> "CalibrationSet":
        p2 = np.asarray(camera_intrinsics_projective, dtype=np.float64).reshape(3, 4)
        r0 = np.asarray(rectifying_rotation, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(lidar_to_camera, dtype=np.float64).reshape(3, 4)
        return cls(
            camera_intrinsics_projective=p2,
            rectifying_rotation=r0,
            lidar_to_camera=tr,
            composed_projection=p2 @ _pad4(r0) @ _pad4(tr),
        )

    @property
    def P(self) -> np.ndarray:
        return self.composed_projection


@dataclass(frozen=True)
class LabeledScene:
    """
    One calibrated LiDAR sweep with its camera image.

    `per_point_class` is None for samples loaded without a label file.
    `rgb_classes` is the per-pixel class mask of the RGB image when one is known.
    `camera_pixels` records the generator's own projection of every return (NaN when behind the camera).
    """

    cloud: PointCloud
    per_point_class: Optional[np.ndarray]
    rgb: np.ndarray
    calib: CalibrationSet
    num_classes: int = 4
    rgb_classes: Optional[np.ndarray] = None
    camera_pixels: Optional[np.ndarray] = None
    name: str = "sample"
    extras: Dict[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        rgb = np.array(self.rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ParameterError(f"rgb must be H x W x 3, got {rgb.shape}")
        object.__setattr__(self, "rgb", _frozen(rgb))

        if self.per_point_class is not None:
            labels = np.array(self.per_point_class, dtype=np.int64).reshape(-1)
            if len(labels) != len(self.cloud):
                raise ParameterError(
                    f"{len(labels)} labels for {len(self.cloud)} points"
                )
            if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ParameterError(f"class ids must lie in [0, {self.num_classes})")
            object.__setattr__(self, "per_point_class", _frozen(labels))

        if self.rgb_classes is not None:
            classes = np.array(self.rgb_classes, dtype=np.int64)
            if classes.shape != rgb.shape[:2]:
                raise ParameterError(
                    f"rgb_classes shape {classes.shape} does not match image {rgb.shape[:2]}"
                )
            object.__setattr__(self, "rgb_classes", _frozen(classes))

    @property
    def rgb_size(self) -> Tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[0]


def load_kitti_velodyne(path: PathLike) -> PointCloud:
    """
    Read a KITTI velodyne scan (little-endian float32 x, y, z, reflectance per point).

    Args:
        path (PathLike): Path to the .bin file

    Raises:
        FormatError: If the file is truncated or holds non-finite values

    Returns:
        PointCloud: The scan, without beam ids
    """
    data = Path(path).read_bytes()
    if len(data) % KITTI_DTYPE.itemsize:
        offset = len(data) - len(data) % KITTI_DTYPE.itemsize
        raise FormatError(f"{path}: truncated point record at byte offset {offset}")

    records = np.frombuffer(data, dtype=KITTI_DTYPE)
    xyz = np.stack([records["x"], records["y"], records["z"]], axis=1)
    intensity = records["intensity"]
    _check_finite(path, xyz, intensity)

    log.debug(f"Loaded {len(records)} points from {path}")
    return PointCloud(xyz=xyz, intensity=intensity)


def write_kitti_velodyne(cloud: PointCloud, path: PathLike) -> None:
    records = np.empty(len(cloud), dtype=KITTI_DTYPE)
    records["x"], records["y"], records["z"] = cloud.xyz.T
    records["intensity"] = cloud.intensity
    atomic_write_bytes(path, records.tobytes())


def load_native_points(path: PathLike, num_beams: Optional[int] = None) -> PointCloud:
    """
    Read the extended 20-byte format (KITTI fields plus a uint32 beam id).

    Args:
        path (PathLike): Path to the file
        num_beams (Optional[int], optional): Beam count; inferred from the ids if omitted. Defaults to None.

    Raises:
        FormatError: If the file is truncated or holds non-finite values

    Returns:
        PointCloud: The scan, with beam ids
    """
    data = Path(path).read_bytes()
    if len(data) % NATIVE_DTYPE.itemsize:
        offset = len(data) - len(data) % NATIVE_DTYPE.itemsize
        raise FormatError(f"{path}: truncated point record at byte offset {offset}")

    records = np.frombuffer(data, dtype=NATIVE_DTYPE)
    xyz = np.stack([records["x"], records["y"], records["z"]], axis=1)
    intensity = records["intensity"]
    _check_finite(path, xyz, intensity)

    return PointCloud(
        xyz=xyz, intensity=intensity, beam_id=records["beam_id"], num_beams=num_beams
    )


def write_native_points(cloud: PointCloud, path: PathLike) -> None:
    if not cloud.has_beam_ids:
        raise FormatError("the extended format needs beam ids")
    records = np.empty(len(cloud), dtype=NATIVE_DTYPE)
    records["x"], records["y"], records["z"] = cloud.xyz.T
    records["intensity"] = cloud.intensity
    records["beam_id"] = cloud.beam_id
    atomic_write_bytes(path, records.tobytes())


def _check_finite(path: PathLike, xyz: np.ndarray, intensity: np.ndarray) -> None:
    finite = np.isfinite(xyz).all(axis=1) & np.isfinite(intensity)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise FormatError(f"{path}: non-finite value at point {bad}")


def load_labels(path: PathLike) -> np.ndarray:
    """Read one little-endian uint32 class id per point."""
    data = Path(path).read_bytes()
    if len(data) % LABEL_DTYPE.itemsize:
        offset = len(data) - len(data) % LABEL_DTYPE.itemsize
        raise FormatError(f"{path}: truncated label at byte offset {offset}")
    return np.frombuffer(data, dtype=LABEL_DTYPE).astype(np.int64)


def write_labels(labels: np.ndarray, path: PathLike) -> None:
    atomic_write_bytes(path, np.asarray(labels).astype(LABEL_DTYPE).tobytes())


def reconstruct_beam_ids(cloud: PointCloud, num_beams: int) -> PointCloud:
    """
    Assign beam ids to a scan-ordered cloud by counting azimuth wrap-arounds.

    A new beam starts wherever the azimuth drops by more than pi between consecutive points.
    Wraps beyond the last beam are clamped onto it and logged.

    Args:
        cloud (PointCloud): Points in sensor scan order
        num_beams (int): Number of beams of the sensor

    Raises:
        ParameterError: If num_beams < 1

    Returns:
        PointCloud: The same points with beam ids
    """
    if num_beams < 1:
        raise ParameterError(f"num_beams must be >= 1, got {num_beams}")
    if len(cloud) == 0:
        return cloud.with_beam_ids(np.zeros(0, dtype=np.int64), num_beams)

    azimuth = np.arctan2(cloud.xyz[:, 1], cloud.xyz[:, 0])
    wraps = np.concatenate([[0], (np.diff(azimuth) < -np.pi).astype(np.int64)])
    beam_id = np.cumsum(wraps)

    if beam_id[-1] > num_beams - 1:
        excess = int(np.count_nonzero(beam_id > num_beams - 1))
        log.warning(
            f"Found {beam_id[-1] + 1} beams for a {num_beams}-beam sensor; "
            f"{excess} points assigned to the last beam"
        )
        beam_id = np.minimum(beam_id, num_beams - 1)

    return cloud.with_beam_ids(beam_id, num_beams)


def load_kitti_calibration(path: PathLike) -> CalibrationSet:
    """
    Parse a KITTI object calibration file and compose P = P2 * R0_rect * Tr_velo_to_cam.

    Args:
        path (PathLike): Path to calib.txt

    Raises:
        FormatError: If a key is missing or has the wrong number of values

    Returns:
        CalibrationSet: Parsed calibration
    """
    values = {}
    for line_number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if ":" not in line:
            continue
        key, raw = line.split(":", 1)
        key = key.strip()
        if key not in CALIB_KEYS:
            continue
        try:
            values[key] = np.array([float(v) for v in raw.split()])
        except ValueError:
            raise FormatError(f"{path}:{line_number}: non-numeric value for {key}")

    matrices = {}
    for key, shape in CALIB_KEYS.items():
        if key not in values:
            raise FormatError(f"{path}: missing calibration key {key}:")
        expected = shape[0] * shape[1]
        if values[key].size != expected:
            raise FormatError(
                f"{path}: {key} has {values[key].size} values, expected {expected}"
            )
        matrices[key] = values[key].reshape(shape)

    return CalibrationSet.compose(
        matrices["P2"], matrices["R0_rect"], matrices["Tr_velo_to_cam"]
    )


def write_kitti_calibration(calib: CalibrationSet, path: PathLike) -> None:
    rows = {
        "P2": calib.camera_intrinsics_projective,
        "R0_rect": calib.rectifying_rotation,
        "Tr_velo_to_cam": calib.lidar_to_camera,
    }
    text = "".join(
        f"{key}: {' '.join(repr(float(v)) for v in matrix.ravel())}\n"
        for key, matrix in rows.items()
    )
    atomic_write_bytes(path, text.encode())


def load_image(path: PathLike) -> np.ndarray:
    """
    Read a binary PPM/PGM image.

    Returns:
        np.ndarray: H x W x 3 float image in [0, 1] for PPM, H x W integer grid for PGM
    """
    with Image.open(path) as im:
        if im.mode == "RGB":
            return np.asarray(im, dtype=np.float64) / 255.0
        if im.mode in ("L", "I", "I;16", "I;16B"):
            return np.asarray(im).astype(np.int64)
        raise FormatError(f"{path}: unsupported image mode {im.mode}")


def load_sample(directory: PathLike, num_beams: int = 64, num_classes: int = 4) -> LabeledScene:
    """
    Load a sample directory.

    Expected files: `velodyne.bin` (KITTI, beam ids reconstructed) or `points.xbin` (extended),
    `calib.txt`, `image.ppm`, and optionally `labels.bin` and `mask.pgm`.

    Args:
        directory (PathLike): Sample directory
        num_beams (int, optional): Beam count of the sensor. Defaults to 64.
        num_classes (int, optional): Number of classes in the label space. Defaults to 4.

    Returns:
        LabeledScene: The loaded sample
    """
    directory = Path(directory)
    if (directory / "points.xbin").exists():
        cloud = load_native_points(directory / "points.xbin", num_beams=num_beams)
    elif (directory / "velodyne.bin").exists():
        cloud = reconstruct_beam_ids(
            load_kitti_velodyne(directory / "velodyne.bin"), num_beams
        )
    else:
        raise FormatError(f"{directory}: no velodyne.bin or points.xbin")

    labels = None
    if (directory / "labels.bin").exists():
        labels = load_labels(directory / "labels.bin")

    mask = None
    if (directory / "mask.pgm").exists():
        mask = load_image(directory / "mask.pgm")

    return LabeledScene(
        cloud=cloud,
        per_point_class=labels,
        rgb=load_image(directory / "image.ppm"),
        calib=load_kitti_calibration(directory / "calib.txt"),
        num_classes=num_classes,
        rgb_classes=mask,
        name=directory.name,
    )


def write_sample(scene: LabeledScene, directory: PathLike) -> Path:
    """Write a scene in the layout `load_sample` reads."""
    # local import: visualizer depends on range_image which depends on this module
    from app.visualizer import encode_pgm, encode_ppm

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    if scene.cloud.has_beam_ids:
        write_native_points(scene.cloud, directory / "points.xbin")
    else:
        write_kitti_velodyne(scene.cloud, directory / "velodyne.bin")
    write_kitti_calibration(scene.calib, directory / "calib.txt")
    rgb = np.clip(np.rint(scene.rgb * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(directory / "image.ppm", encode_ppm(rgb))
    if scene.per_point_class is not None:
        write_labels(scene.per_point_class, directory / "labels.bin")
    if scene.rgb_classes is not None:
        atomic_write_bytes(
            directory / "mask.pgm", encode_pgm(scene.rgb_classes.astype(np.uint8))
        )

    return directory
