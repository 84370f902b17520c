import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from app.errors import DegenerateGeometryError, ParameterError, PreconditionError, ShapeError
from app.pointcloud_io import LabeledScene
from app.projection import CorrespondenceSet, build_correspondences
from app.range_image import GridConfig, RangeImage, RangeMode, SphericalParams, build_range_image
from app.sampling import (
    FeatureGrid,
    SeedPolicy,
    Stride,
    as_stride,
    bilinear_sample_many,
    center_seed,
    farthest_point_sample,
)
from app.spline import SplineWarp, eval_spline, fit_spline

log = logging.getLogger(__name__)

FeatureExtractor = Callable[[np.ndarray], List[FeatureGrid]]


class LayerPair(BaseModel):
    range_stride: float = Field(gt=0)
    rgb_stride: float = Field(gt=0)
    label: str


# three range encoder stages, each fed from the RGB stage at twice its stride
DEFAULT_LAYER_PAIRS = (
    LayerPair(range_stride=2, rgb_stride=4, label="fire2"),
    LayerPair(range_stride=4, rgb_stride=8, label="fire4"),
    LayerPair(range_stride=8, rgb_stride=16, label="fire7"),
)


class FusionPlan(BaseModel):
    layer_pairs: List[LayerPair] = Field(default_factory=lambda: list(DEFAULT_LAYER_PAIRS))
    control_count: int = Field(default=48, ge=3)
    regularization: float = Field(default=0.0, ge=0)
    seed_policy: SeedPolicy = SeedPolicy.center

    @model_validator(mode="after")
    def check_labels(self) -> "FusionPlan":
        labels = [pair.label for pair in self.layer_pairs]
        if len(set(labels)) != len(labels):
            raise ValueError(f"layer labels must be unique, got {labels}")
        return self


class RangeLayer(NamedTuple):
    width: int
    height: int
    stride: Stride
    source_size: Tuple[int, int]

    @classmethod
    def of(cls, grid: FeatureGrid) -> "RangeLayer":
        return cls(grid.width, grid.height, grid.stride, grid.source_size)

    @classmethod
    def for_image(cls, size: Tuple[int, int], stride: Stride) -> "RangeLayer":
        """The layer a stub extractor produces for an image of `size` at `stride`."""
        stride = as_stride(stride)
        return cls(math.ceil(size[0] / stride), math.ceil(size[1] / stride), stride, tuple(size))


def _avg_pool2(array: np.ndarray) -> np.ndarray:
    """2x2 mean pooling; odd trailing rows/columns average the cells that exist."""
    H, W, C = array.shape
    padded = np.full((H + H % 2, W + W % 2, C), np.nan)
    padded[:H, :W] = array
    blocks = padded.reshape(padded.shape[0] // 2, 2, padded.shape[1] // 2, 2, C)
    return np.nanmean(blocks, axis=(1, 3))


class StubExtractor:
    """
    Deterministic stand-in for a CNN encoder.

    Level strides must be powers of two. Each level is the input average-pooled 2x2 until it
    reaches the level's stride, then its channels are tiled or truncated to the requested count.

    Args:
        levels (Sequence[Tuple[Stride, int]]): (stride, channels) per level, strides non-decreasing
    """

    def __init__(self, levels: Sequence[Tuple[Stride, int]]):
        self.levels = [(as_stride(stride), int(channels)) for stride, channels in levels]
        previous = 1
        for stride, channels in self.levels:
            if channels < 1:
                raise ParameterError(f"level at stride {stride} asks for {channels} channels")
            if stride.denominator != 1 or stride.numerator & (stride.numerator - 1):
                raise ParameterError(f"stub strides must be powers of two, got {stride}")
            if stride < previous:
                raise ParameterError("level strides must be non-decreasing")
            previous = stride

    def __repr__(self) -> str:
        return f"<StubExtractor levels={[(str(s), c) for s, c in self.levels]}>"

    def __call__(self, image: np.ndarray) -> List[FeatureGrid]:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[..., None]
        if image.shape[2] == 0:
            raise ParameterError("cannot extract features from a 0-channel input")
        source_size = (image.shape[1], image.shape[0])

        grids = []
        current, current_stride = image, 1
        for stride, channels in self.levels:
            while current_stride < stride:
                current = _avg_pool2(current)
                current_stride *= 2
            tiled = current[..., np.arange(channels) % current.shape[2]]
            grids.append(FeatureGrid(data=tiled, stride=stride, source_size=source_size))

        return grids


def make_stub_extractor(levels: Sequence[Tuple[Stride, int]]) -> StubExtractor:
    return StubExtractor(levels)


def extractors_for(
    plan: FusionPlan, rgb_channels: int = 16, range_channels: int = 8
) -> Tuple[StubExtractor, StubExtractor]:
    """Stub RGB and range extractors producing exactly the strides the plan asks for."""
    rgb = sorted({as_stride(p.rgb_stride) for p in plan.layer_pairs})
    rng = sorted({as_stride(p.range_stride) for p in plan.layer_pairs})
    return (
        make_stub_extractor([(s, rgb_channels) for s in rgb]),
        make_stub_extractor([(s, range_channels) for s in rng]),
    )


def query_positions(range_layer: RangeLayer) -> np.ndarray:
    """
    Full-resolution range-image coordinates of every range-feature pixel, row-major,
    using x = (i + 0.5) * stride - 0.5.
    """
    stride = float(as_stride(range_layer.stride))
    xs = (np.arange(range_layer.width) + 0.5) * stride - 0.5
    ys = (np.arange(range_layer.height) + 0.5) * stride - 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    return np.stack([grid_x.ravel(), grid_y.ravel()], axis=1)


def warped_feature_positions(
    warp: SplineWarp, range_layer: RangeLayer, rgb_stride: Stride
) -> np.ndarray:
    """RGB feature-grid coordinates sampled for every range-feature pixel."""
    rgb_px = eval_spline(warp, query_positions(range_layer))
    return (rgb_px + 0.5) / float(as_stride(rgb_stride)) - 0.5


def warp_feature_layer(
    rgb_feat: FeatureGrid,
    warp: SplineWarp,
    range_layer: RangeLayer,
    rgb_input_size: Tuple[int, int],
) -> FeatureGrid:
    """
    Warp an RGB feature grid onto a range feature layer.

    Each range-feature pixel is scaled to range-image coordinates, mapped through the spline into
    RGB image coordinates, scaled into RGB feature coordinates and bilinearly sampled (zero outside).

    Args:
        rgb_feat (FeatureGrid): RGB features
        warp (SplineWarp): Range-image to RGB-image spline
        range_layer (RangeLayer): Target layer (width, height, stride, range image size)
        rgb_input_size (Tuple[int, int]): (W0, H0) of the RGB image

    Raises:
        PreconditionError: If the grid was not extracted from an image of rgb_input_size

    Returns:
        FeatureGrid: H_r x W_r x C grid at the range layer's stride
    """
    if tuple(rgb_feat.source_size) != tuple(rgb_input_size):
        raise PreconditionError(
            f"features come from a {rgb_feat.source_size} image, expected {tuple(rgb_input_size)}"
        )
    positions = warped_feature_positions(warp, range_layer, rgb_feat.stride)
    samples = bilinear_sample_many(rgb_feat, positions)
    return FeatureGrid(
        data=samples.reshape(range_layer.height, range_layer.width, rgb_feat.channels),
        stride=range_layer.stride,
        source_size=range_layer.source_size,
    )


def warp_image_to_range(
    rgb: np.ndarray, warp: SplineWarp, range_size: Tuple[int, int]
) -> FeatureGrid:
    """Warp the RGB image itself into the range domain at full resolution."""
    rgb = np.asarray(rgb)
    rgb_size = (rgb.shape[1], rgb.shape[0])
    layer = RangeLayer(range_size[0], range_size[1], 1, tuple(range_size))
    return warp_feature_layer(FeatureGrid(rgb, 1, rgb_size), warp, layer, rgb_size)


def fuse(range_feat: FeatureGrid, warped_rgb: FeatureGrid) -> FeatureGrid:
    """
    Concatenate range channels followed by warped RGB channels.

    Raises:
        ShapeError: If height, width or stride differ
    """
    if (
        range_feat.shape[:2] != warped_rgb.shape[:2]
        or range_feat.stride != warped_rgb.stride
    ):
        raise ShapeError(
            f"cannot fuse {range_feat.shape} at stride {range_feat.stride} "
            f"with {warped_rgb.shape} at stride {warped_rgb.stride}"
        )
    return FeatureGrid(
        data=np.concatenate([range_feat.data, warped_rgb.data], axis=2),
        stride=range_feat.stride,
        source_size=range_feat.source_size,
    )


@dataclass
class FusionResult:
    fused: List[FeatureGrid]
    labels: List[str]
    range_image: RangeImage
    correspondences: Optional[CorrespondenceSet] = None
    control_indices: Optional[np.ndarray] = None
    warp: Optional[SplineWarp] = None
    layer_warps: List[SplineWarp] = field(default_factory=list)
    fit_count: int = 0
    timings: Dict[str, float] = field(default_factory=dict)


@contextmanager
def _timed(timings: Dict[str, float], stage: str) -> Iterator[None]:
    start = time.perf_counter()
    yield
    timings[stage] = (time.perf_counter() - start) * 1000.0


def select_controls(
    correspondences: CorrespondenceSet, k: int, seed_policy: SeedPolicy = SeedPolicy.center
) -> np.ndarray:
    """FPS over range-image coordinates of the correspondences, clamping k to what exists."""
    available = len(correspondences)
    if available < 3:
        raise DegenerateGeometryError(
            f"{available} correspondences, at least 3 needed to place control points"
        )
    if k > available:
        log.warning(f"Only {available} correspondences for {k} controls; using all")
        k = available
    if SeedPolicy(seed_policy) == SeedPolicy.center:
        seed = center_seed(correspondences.range_px, correspondences.range_size)
    else:
        seed = 0
    return farthest_point_sample(correspondences.range_px, k, seed=seed)


def _by_stride(grids: List[FeatureGrid], stride: Stride, side: str) -> FeatureGrid:
    stride = as_stride(stride)
    for grid in grids:
        if grid.stride == stride:
            return grid
    raise PreconditionError(f"{side} extractor produced no grid at stride {stride}")


def run_fusion_pipeline(
    scene: LabeledScene,
    plan: FusionPlan,
    rgb_extractor: FeatureExtractor,
    range_extractor: FeatureExtractor,
    cfg: GridConfig = GridConfig(),
    mode: RangeMode = RangeMode.beam,
    spherical: Optional[SphericalParams] = None,
) -> FusionResult:
    """
    Range image, correspondences, FPS controls, one spline fit, then warp and fuse per layer pair.

    Args:
        scene (LabeledScene): Calibrated sample
        plan (FusionPlan): Layer pairs and spline settings
        rgb_extractor (FeatureExtractor): Produces RGB feature grids at the plan's RGB strides
        range_extractor (FeatureExtractor): Produces range feature grids at the plan's range strides
        cfg (GridConfig, optional): Range image layout. Defaults to GridConfig().
        mode (RangeMode, optional): Row assignment. Defaults to RangeMode.beam.
        spherical (Optional[SphericalParams], optional): Elevation binning for spherical mode.

    Raises:
        DegenerateGeometryError: Fewer than 3 correspondences

    Returns:
        FusionResult: Fused grids, intermediate products, fit count and per-stage milliseconds
    """
    timings: Dict[str, float] = {}
    log.info(f"Running fusion pipeline on {scene.name} with {len(plan.layer_pairs)} layer pairs")

    with _timed(timings, "build_range"):
        img = build_range_image(scene.cloud, cfg, mode, spherical)
    result = FusionResult(fused=[], labels=[], range_image=img, timings=timings)
    if not plan.layer_pairs:
        return result

    with _timed(timings, "correspondences"):
        correspondences = build_correspondences(img, scene.calib, scene.rgb_size)
    result.correspondences = correspondences
    if len(correspondences) < 3:
        raise DegenerateGeometryError(
            f"{scene.name}: {len(correspondences)} correspondences, at least 3 needed to warp"
        )

    with _timed(timings, "fps"):
        result.control_indices = select_controls(
            correspondences, plan.control_count, plan.seed_policy
        )
    with _timed(timings, "fit"):
        warp = fit_spline(
            correspondences.subset(result.control_indices),
            regularization=plan.regularization,
        )
    result.warp = warp
    result.fit_count += 1

    rgb_grids = rgb_extractor(scene.rgb)
    range_grids = range_extractor(img.channels)

    for pair in plan.layer_pairs:
        range_feat = _by_stride(range_grids, pair.range_stride, "range")
        rgb_feat = _by_stride(rgb_grids, pair.rgb_stride, "RGB")
        with _timed(timings, f"warp[{pair.label}]"):
            warped = warp_feature_layer(rgb_feat, warp, RangeLayer.of(range_feat), scene.rgb_size)
        with _timed(timings, f"fuse[{pair.label}]"):
            result.fused.append(fuse(range_feat, warped))
        result.labels.append(pair.label)
        result.layer_warps.append(warp)

    return result


def format_timings(timings: Dict[str, float]) -> str:
    return "".join(f"{stage}={ms:.3f}\n" for stage, ms in timings.items())
