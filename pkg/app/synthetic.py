"""
Synthetic calibrated LiDAR + camera scenes with exact ground truth.

The LiDAR sits at the origin (x forward, y left, z up). Each beam has a fixed elevation and each
azimuth step fires at the center of its azimuth bin, so a matching GridConfig sees no collisions.
The camera uses the usual frame (x right, y down, z forward) and renders flat per-class colors.
"""

import logging
import math
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.errors import ParameterError
from app.pointcloud_io import CalibrationSet, LabeledScene, PointCloud
from app.projection import inside_image
from app.visualizer import CLASS_PALETTE

log = logging.getLogger(__name__)

EPS_HIT = 1e-9
# relative slack when a return is tested for occlusion along its own camera ray
VISIBILITY_TOL = 1e-6

# lidar (x fwd, y left, z up) -> camera (x right, y down, z fwd)
LIDAR_TO_CAMERA_ROTATION = ((0.0, -1.0, 0.0), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0))

CLASS_COLORS = CLASS_PALETTE / 255.0


class Box(BaseModel):
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]
    class_id: int = Field(ge=0)


class Cylinder(BaseModel):
    """Vertical cylinder with a flat top and bottom."""

    center: Tuple[float, float]
    radius: float = Field(gt=0)
    z_min: float
    z_max: float
    class_id: int = Field(ge=0)


class SceneSpec(BaseModel):
    boxes: List[Box] = Field(default_factory=list)
    cylinders: List[Cylinder] = Field(default_factory=list)
    # ground plane z = ground_z, labeled background
    ground_z: Optional[float] = None
    num_classes: int = Field(default=4, ge=1)


class RigParams(BaseModel):
    beam_elevations: List[float]
    azimuth_steps: int
    azimuth_min: float = -math.pi / 4
    azimuth_max: float = math.pi / 4
    image_width: int = Field(default=64, ge=1)
    image_height: int = Field(default=48, ge=1)
    fx: float = 50.0
    fy: float = 50.0
    cx: Optional[float] = None
    cy: Optional[float] = None
    rotation: Tuple[Tuple[float, float, float], ...] = LIDAR_TO_CAMERA_ROTATION
    # LiDAR origin expressed in the camera frame, meters
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    max_range: float = Field(default=120.0, gt=0)

    @property
    def principal_point(self) -> Tuple[float, float]:
        cx = (self.image_width - 1) / 2 if self.cx is None else self.cx
        cy = (self.image_height - 1) / 2 if self.cy is None else self.cy
        return cx, cy

    @property
    def delta_phi(self) -> float:
        return (self.azimuth_max - self.azimuth_min) / self.azimuth_steps


def uniform_elevations(num_beams: int, theta_min: float, delta_theta: float) -> List[float]:
    """Ascending beam elevations at the centers of uniform bins starting at theta_min."""
    return [theta_min + (b + 0.5) * delta_theta for b in range(num_beams)]


def rig_calibration(rig: RigParams) -> CalibrationSet:
    cx, cy = rig.principal_point
    p2 = np.array([[rig.fx, 0.0, cx, 0.0], [0.0, rig.fy, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    tr = np.hstack([np.array(rig.rotation), np.array(rig.translation)[:, None]])
    return CalibrationSet.compose(p2, np.eye(3), tr)


def _cast_boxes(origins, dirs, boxes, best_t, best_cls):
    for box in boxes:
        lo, hi = np.array(box.lo), np.array(box.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origins) / dirs
            t2 = (hi - origins) / dirs
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        # rays parallel to a slab: inside the slab spans all t, outside spans none
        parallel = dirs == 0
        inside_slab = (origins >= lo) & (origins <= hi)
        near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), far)
        t_near, t_far = near.max(axis=1), far.min(axis=1)
        t = np.where(t_near > EPS_HIT, t_near, t_far)
        hit = (t_far >= t_near) & (t > EPS_HIT) & (t < best_t)
        best_t[hit] = t[hit]
        best_cls[hit] = box.class_id


def _cast_cylinders(origins, dirs, cylinders, best_t, best_cls):
    for cyl in cylinders:
        ox = origins[:, 0] - cyl.center[0]
        oy = origins[:, 1] - cyl.center[1]
        dx, dy = dirs[:, 0], dirs[:, 1]
        a = dx * dx + dy * dy
        b = 2 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - cyl.radius**2
        disc = b * b - 4 * a * c
        candidates = []
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.sqrt(np.where(disc >= 0, disc, np.nan))
            for sign in (-1.0, 1.0):
                t = (-b + sign * root) / (2 * a)
                z = origins[:, 2] + t * dirs[:, 2]
                ok = (a > 0) & (disc >= 0) & (z >= cyl.z_min) & (z <= cyl.z_max)
                candidates.append(np.where(ok, t, np.inf))
            for cap in (cyl.z_min, cyl.z_max):
                t = (cap - origins[:, 2]) / dirs[:, 2]
                px = ox + t * dx
                py = oy + t * dy
                ok = (dirs[:, 2] != 0) & (px * px + py * py <= cyl.radius**2)
                candidates.append(np.where(ok, t, np.inf))
        stacked = np.stack(candidates, axis=1)
        # NaN (no real root) fails the comparison and becomes a miss
        t = np.where(stacked > EPS_HIT, stacked, np.inf).min(axis=1)
        hit = t < best_t
        best_t[hit] = t[hit]
        best_cls[hit] = cyl.class_id


def cast_rays(
    origins: np.ndarray, dirs: np.ndarray, scene: SceneSpec, max_range: float = np.inf
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest-hit ray cast against every primitive of the scene.

    Args:
        origins (np.ndarray): M x 3 (or 3,) ray origins
        dirs (np.ndarray): M x 3 ray directions (unit length if t should be meters)
        scene (SceneSpec): Primitives
        max_range (float, optional): Hits beyond this t are misses. Defaults to inf.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Hit parameter t (inf on a miss) and class id (0 on a miss)
    """
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    best_t = np.full(len(dirs), np.inf)
    best_cls = np.zeros(len(dirs), dtype=np.int64)

    _cast_boxes(origins, dirs, scene.boxes, best_t, best_cls)
    _cast_cylinders(origins, dirs, scene.cylinders, best_t, best_cls)

    if scene.ground_z is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.ground_z - origins[:, 2]) / dirs[:, 2]
        hit = (dirs[:, 2] != 0) & (t > EPS_HIT) & (t < best_t)
        best_t[hit] = t[hit]
        best_cls[hit] = 0

    miss = best_t > max_range
    best_t[miss] = np.inf
    best_cls[miss] = 0
    return best_t, best_cls


def _palette(num_classes: int) -> np.ndarray:
    return CLASS_COLORS[np.arange(num_classes) % len(CLASS_COLORS)]


def generate_synthetic_scene(spec: SceneSpec, rig: RigParams) -> LabeledScene:
    """
    Ray-cast a LiDAR sweep and a camera image of the same scene.

    Returns are emitted beam by beam in azimuth order; rays that hit nothing produce no point.
    The RGB image uses flat per-class colors from a camera ray-cast. Afterwards every return the
    camera can see is also marked at its nearest projected pixel (nearest return wins), so the mask
    agrees with the labels of all camera-visible returns. Returns hidden from the camera leave the
    ray-cast untouched.

    Args:
        spec (SceneSpec): Scene primitives
        rig (RigParams): LiDAR and camera parameters

    Raises:
        ParameterError: Zero beams or zero azimuth steps

    Returns:
        LabeledScene: Cloud with beam ids and labels, image, class mask and exact calibration
    """
    if not rig.beam_elevations:
        raise ParameterError("rig needs at least one beam")
    if rig.azimuth_steps < 1:
        raise ParameterError("rig needs at least one azimuth step")

    elevation = np.repeat(np.asarray(rig.beam_elevations, dtype=np.float64), rig.azimuth_steps)
    steps = np.tile(np.arange(rig.azimuth_steps), len(rig.beam_elevations))
    azimuth = rig.azimuth_min + (steps + 0.5) * rig.delta_phi
    dirs = np.stack(
        [
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ],
        axis=1,
    )
    t, cls = cast_rays(np.zeros(3), dirs, spec, rig.max_range)
    hit = np.isfinite(t)
    xyz = dirs[hit] * t[hit, None]
    labels = cls[hit]
    beam_id = np.repeat(np.arange(len(rig.beam_elevations)), rig.azimuth_steps)[hit]
    intensity = (labels + 1) / (spec.num_classes + 1)

    calib = rig_calibration(rig)
    rgb_classes = render_classes(spec, rig)

    # independent of composed_projection: K (R X + t)
    rotation, translation = np.array(rig.rotation), np.array(rig.translation)
    cam = xyz @ rotation.T + translation
    cx, cy = rig.principal_point
    with np.errstate(divide="ignore", invalid="ignore"):
        camera_pixels = np.stack(
            [rig.fx * cam[:, 0] / cam[:, 2] + cx, rig.fy * cam[:, 1] / cam[:, 2] + cy], axis=1
        )
    camera_pixels[cam[:, 2] <= 0] = np.nan

    visible = visible_from(camera_center(rig), xyz, spec)
    _splat_returns(rgb_classes, camera_pixels, cam[:, 2], labels, visible)
    rgb = _palette(spec.num_classes)[rgb_classes]

    log.info(
        f"Synthetic scene: {len(xyz)} returns from {len(dirs)} rays, "
        f"{rig.image_width}x{rig.image_height} image"
    )
    return LabeledScene(
        cloud=PointCloud(
            xyz=xyz, intensity=intensity, beam_id=beam_id, num_beams=len(rig.beam_elevations)
        ),
        per_point_class=labels,
        rgb=rgb,
        calib=calib,
        num_classes=spec.num_classes,
        rgb_classes=rgb_classes,
        camera_pixels=camera_pixels,
        name="synthetic",
    )


def camera_center(rig: RigParams) -> np.ndarray:
    """Camera center in the LiDAR frame."""
    return -np.array(rig.rotation).T @ np.array(rig.translation)


def render_classes(spec: SceneSpec, rig: RigParams) -> np.ndarray:
    """Ray-cast one camera ray through every pixel center; H x W class ids, 0 where nothing is hit."""
    W, H = rig.image_width, rig.image_height
    cx, cy = rig.principal_point
    u, v = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    dirs_cam = np.stack([(u - cx) / rig.fx, (v - cy) / rig.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)

    _, cls = cast_rays(camera_center(rig), dirs_cam @ np.array(rig.rotation), spec)
    return cls.reshape(H, W)


def visible_from(origin: np.ndarray, xyz: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """True where the segment from origin to each point reaches the point unobstructed."""
    if len(xyz) == 0:
        return np.zeros(0, dtype=bool)
    # t = 1 at the point itself
    t, _ = cast_rays(origin, xyz - origin, spec)
    return t >= 1.0 - VISIBILITY_TOL


def _splat_returns(rgb_classes, camera_pixels, camera_depth, labels, visible) -> None:
    H, W = rgb_classes.shape
    painted = inside_image(camera_pixels, (W, H)) & visible
    # farthest first so the nearest return is written last
    for i in np.flatnonzero(painted)[np.argsort(-camera_depth[painted])]:
        u, v = np.rint(camera_pixels[i]).astype(np.int64)
        rgb_classes[v, u] = labels[i]


def generate_coincident_scene(
    width: int = 32,
    height: int = 8,
    fov: float = 0.4,
    dropout: float = 0.1,
    seed: int = 0,
) -> LabeledScene:
    """
    Oracle scene whose calibration maps every valid range pixel center exactly onto the same RGB pixel.

    The camera sits at the LiDAR origin with focal length 1 / delta_phi and a mirrored x axis, so
    column u looks along azimuth atan((u - cx) * delta_phi), which stays inside bin u for narrow
    FOVs. Beam ids equal image rows. The image holds random colors and the depths are random.

    Args:
        width (int, optional): Range and RGB image width. Defaults to 32.
        height (int, optional): Range and RGB image height. Defaults to 8.
        fov (float, optional): Horizontal FOV in radians, centered on the x axis. Defaults to 0.4.
        dropout (float, optional): Fraction of pixels without a return. Defaults to 0.1.
        seed (int, optional): Random seed. Defaults to 0.

    Returns:
        LabeledScene: The scene; `extras["grid"]` holds the matching GridConfig
    """
    # local import: range_image depends on pointcloud_io only, but keep synthetic import-light
    from app.range_image import GridConfig

    rng = np.random.default_rng(seed)
    cfg = GridConfig(width=width, num_beams=height, azimuth_min=-fov / 2, azimuth_max=fov / 2)
    f = 1.0 / cfg.delta_phi
    cx, cy = (width - 1) / 2, (height - 1) / 2

    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    u, v = u.ravel(), v.ravel()
    keep = rng.random(u.size) >= dropout
    u, v = u[keep], v[keep]
    depth = rng.uniform(5.0, 20.0, size=u.size)
    xyz = np.stack([depth, depth * (u - cx) / f, -depth * (v - cy) / f], axis=1)

    p2 = np.array([[-f, 0.0, cx, 0.0], [0.0, f, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    tr = np.hstack([np.array(LIDAR_TO_CAMERA_ROTATION), np.zeros((3, 1))])

    return LabeledScene(
        cloud=PointCloud(
            xyz=xyz,
            intensity=rng.random(u.size),
            beam_id=v.astype(np.int64),
            num_beams=height,
        ),
        per_point_class=np.zeros(u.size, dtype=np.int64),
        rgb=rng.random((height, width, 3)),
        calib=CalibrationSet.compose(p2, np.eye(3), tr),
        num_classes=1,
        camera_pixels=np.stack([u, v], axis=1),
        name="coincident",
        extras={"grid": cfg},
    )


def default_rig(azimuth_steps: int = 512, num_beams: int = 64) -> RigParams:
    """KITTI-like rig: 64 beams from -24.8 to +2 degrees, 90 degree sweep, 1242 x 375 camera."""
    theta_min = math.radians(-24.8)
    delta_theta = (math.radians(2.0) - theta_min) / num_beams
    return RigParams(
        beam_elevations=uniform_elevations(num_beams, theta_min, delta_theta),
        azimuth_steps=azimuth_steps,
        image_width=1242,
        image_height=375,
        fx=721.5,
        fy=721.5,
        cx=609.6,
        cy=172.9,
        translation=(0.0, -0.08, -0.27),
    )


def default_scene() -> SceneSpec:
    """A street: ground plane, three cars, two pedestrians and a cyclist ahead of the rig."""
    return SceneSpec(
        ground_z=-1.73,
        boxes=[
            Box(lo=(8.0, -4.5, -1.73), hi=(12.5, -2.7, -0.25), class_id=1),
            Box(lo=(15.0, 1.5, -1.73), hi=(19.5, 3.3, -0.2), class_id=1),
            Box(lo=(25.0, -6.0, -1.73), hi=(29.5, -4.2, -0.3), class_id=1),
            Box(lo=(11.0, 4.0, -1.73), hi=(12.8, 4.5, -0.1), class_id=3),
        ],
        cylinders=[
            Cylinder(center=(9.0, 1.0), radius=0.3, z_min=-1.73, z_max=0.0, class_id=2),
            Cylinder(center=(14.0, -1.2), radius=0.3, z_min=-1.73, z_max=0.05, class_id=2),
        ],
        num_classes=4,
    )
