import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from app.errors import ParameterError, ShapeError
from app.fusion import (
    FusionPlan,
    RangeLayer,
    extractors_for,
    select_controls,
    warp_feature_layer,
)
from app.pointcloud_io import CalibrationSet, LabeledScene
from app.projection import build_correspondences, inside_image, project_points
from app.range_image import GridConfig, RangeImage, RangeMode, build_range_image
from app.sampling import as_stride
from app.spline import fit_spline

log = logging.getLogger(__name__)

BACKGROUND = 0
NO_CLASS = -1
KITTI_CLASS_NAMES = {0: "background", 1: "car", 2: "pedestrian", 3: "cyclist"}
TABLE_COUNTS = (4, 24, 48, 96, 192, 384)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions; ignore_count counts masked-out pixels."""

    counts: np.ndarray
    ignore_count: int

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class IoUReport:
    per_class: Dict[int, float]
    absent: List[int]
    mean_over_foreground: Optional[float]
    confusion: ConfusionMatrix
    class_names: Mapping[int, str] = field(default_factory=lambda: dict(KITTI_CLASS_NAMES))

    def class_name(self, class_id: int) -> str:
        return self.class_names.get(class_id, f"class{class_id}")

    def to_dict(self) -> dict:
        return {
            "per_class": {
                str(c): {"name": self.class_name(c), "iou": iou}
                for c, iou in sorted(self.per_class.items())
            },
            "absent": list(self.absent),
            "mean": self.mean_over_foreground,
            "ignore_count": self.confusion.ignore_count,
        }


def compute_iou(
    pred: np.ndarray,
    gt: np.ndarray,
    mask: np.ndarray,
    num_classes: Optional[int] = None,
    class_names: Mapping[int, str] = None,
) -> IoUReport:
    """
    Per-class IoU = TP / (TP + FP + FN) over masked-in pixels.

    Pixels labeled NO_CLASS in either grid are ignored like masked pixels. Classes with
    TP + FP + FN = 0 are absent; the mean runs over present non-background classes.

    Args:
        pred (np.ndarray): H x W predicted class ids
        gt (np.ndarray): H x W ground truth class ids
        mask (np.ndarray): H x W booleans, True where the pixel is evaluated
        num_classes (Optional[int], optional): Size of the label space. Defaults to max id + 1.
        class_names (Mapping[int, str], optional): Names for reports. Defaults to the KITTI names.

    Raises:
        ShapeError: If the three grids differ in shape
        ParameterError: If a class id is >= num_classes

    Returns:
        IoUReport: Report with the confusion matrix attached
    """
    pred, gt, mask = np.asarray(pred), np.asarray(gt), np.asarray(mask, dtype=bool)
    if not pred.shape == gt.shape == mask.shape:
        raise ShapeError(
            f"pred {pred.shape}, gt {gt.shape} and mask {mask.shape} must match"
        )

    evaluated = mask & (pred >= 0) & (gt >= 0)
    p, g = pred[evaluated].astype(np.int64), gt[evaluated].astype(np.int64)
    if num_classes is None:
        num_classes = int(max(p.max(initial=0), g.max(initial=0))) + 1
    if p.size and max(p.max(), g.max()) >= num_classes:
        raise ParameterError(f"class id out of range for {num_classes} classes")

    counts = np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(
        num_classes, num_classes
    )
    confusion = ConfusionMatrix(counts=counts, ignore_count=int(pred.size - evaluated.sum()))

    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    per_class = {c: float(tp[c] / union[c]) for c in range(num_classes) if union[c] > 0}
    absent = [c for c in range(num_classes) if union[c] == 0]
    foreground = [iou for c, iou in per_class.items() if c != BACKGROUND]
    mean = float(np.mean(foreground)) if foreground else None

    return IoUReport(
        per_class=per_class,
        absent=absent,
        mean_over_foreground=mean,
        confusion=confusion,
        class_names=dict(class_names or KITTI_CLASS_NAMES),
    )


def format_iou_report(report: IoUReport, machine: bool = False) -> str:
    """
    Text report: "class <id> <name> iou=<value>" per class and "mean=<value>", or key=value lines.
    """
    def fmt(value: Optional[float]) -> str:
        return "absent" if value is None else f"{value:.6f}"

    lines = []
    for c in range(report.confusion.num_classes):
        iou = report.per_class.get(c)
        if machine:
            lines.append(f"iou.{c}={fmt(iou)}")
        else:
            lines.append(f"class {c} {report.class_name(c)} iou={fmt(iou)}")
    lines.append(f"mean={fmt(report.mean_over_foreground)}")
    if machine:
        lines.append(f"ignore_count={report.confusion.ignore_count}")
    return "\n".join(lines) + "\n"


def label_image(img: RangeImage, per_point_class: np.ndarray) -> np.ndarray:
    """Scatter per-point classes into an H x W grid; NO_CLASS where the pixel is invalid."""
    if img.source_index is None:
        raise ParameterError("range image has no source index; rebuild it from the cloud")
    labels = np.full(img.valid.shape, NO_CLASS, dtype=np.int64)
    labels[img.valid] = np.asarray(per_point_class)[img.source_index[img.valid]]
    return labels


def parse_remap(text: str) -> Dict[int, int]:
    """Parse "2:1,5:3" into {2: 1, 5: 3}."""
    remap = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        try:
            source, target = item.split(":")
            remap[int(source)] = int(target)
        except ValueError:
            raise ParameterError(f"bad remap entry {item!r}, expected <from>:<to>")
    return remap


def rgb_mask_lookup_baseline(
    mask_rgb: np.ndarray,
    img: RangeImage,
    calib: CalibrationSet,
    remap: Optional[Mapping[int, int]] = None,
) -> np.ndarray:
    """
    Label range pixels by looking up an RGB segmentation mask at each point's projection.

    Args:
        mask_rgb (np.ndarray): H x W class grid over the RGB image
        img (RangeImage): Range image
        calib (CalibrationSet): Calibration holding P
        remap (Optional[Mapping[int, int]], optional): Class substitutions applied after lookup. Defaults to None.

    Returns:
        np.ndarray: Range-image class grid; NO_CLASS for invalid pixels and points outside the image
    """
    mask_rgb = np.asarray(mask_rgb, dtype=np.int64)
    rgb_size = (mask_rgb.shape[1], mask_rgb.shape[0])
    out = np.full(img.valid.shape, NO_CLASS, dtype=np.int64)

    rows, columns = np.nonzero(img.valid)
    uv, _ = project_points(calib.P, img.xyz[rows, columns])
    inside = inside_image(uv, rgb_size)
    u = np.rint(uv[inside, 0]).astype(np.int64)
    v = np.rint(uv[inside, 1]).astype(np.int64)
    classes = mask_rgb[v, u]

    if remap:
        lut = np.arange(max(classes.max(initial=0), max(remap)) + 1)
        for source, target in remap.items():
            lut[source] = target
        classes = lut[classes]

    out[rows[inside], columns[inside]] = classes
    return out


@dataclass(frozen=True)
class BenchmarkEntry:
    control_count: int
    median_ms: Optional[float]
    note: str = ""

    @property
    def fps(self) -> Optional[float]:
        """Geometric frames per second implied by the median."""
        return 1000.0 / self.median_ms if self.median_ms else None


@dataclass(frozen=True)
class BenchmarkResult:
    rows: List[BenchmarkEntry]
    repetitions: int
    correspondences: int


def benchmark_control_points(
    scene: LabeledScene,
    counts: Sequence[int] = TABLE_COUNTS,
    repetitions: int = 3,
    plan: Optional[FusionPlan] = None,
    cfg: GridConfig = GridConfig(),
    mode: RangeMode = RangeMode.beam,
) -> BenchmarkResult:
    """
    Median wall-clock of spline fit plus dense warping at every layer pair, per control count.

    Range image, correspondences, features and FPS selection are computed outside the timed region.
    Counts above the number of correspondences are skipped with a note.

    Args:
        scene (LabeledScene): Sample to benchmark
        counts (Sequence[int], optional): Control counts k. Defaults to 4, 24, 48, 96, 192, 384.
        repetitions (int, optional): Timed runs per k, at least 3. Defaults to 3.
        plan (Optional[FusionPlan], optional): Layer pairs and lambda. Defaults to FusionPlan().
        cfg (GridConfig, optional): Range image layout. Defaults to GridConfig().
        mode (RangeMode, optional): Row assignment. Defaults to RangeMode.beam.

    Raises:
        ParameterError: If repetitions < 3

    Returns:
        BenchmarkResult: One entry per requested count
    """
    if repetitions < 3:
        raise ParameterError(f"repetitions must be >= 3, got {repetitions}")
    plan = plan or FusionPlan()

    img = build_range_image(scene.cloud, cfg, mode)
    correspondences = build_correspondences(img, scene.calib, scene.rgb_size)
    rgb_extractor, _ = extractors_for(plan)
    rgb_grids = {grid.stride: grid for grid in rgb_extractor(scene.rgb)}
    layers = [
        (RangeLayer.for_image(img.size, pair.range_stride), rgb_grids[as_stride(pair.rgb_stride)])
        for pair in plan.layer_pairs
    ]

    rows = []
    for k in counts:
        if k < 3 or k > len(correspondences):
            note = f"skipped: k must lie in [3, {len(correspondences)}]"
            log.warning(f"Benchmark k={k} {note}")
            rows.append(BenchmarkEntry(control_count=k, median_ms=None, note=note))
            continue

        controls = correspondences.subset(
            select_controls(correspondences, k, plan.seed_policy)
        )
        samples = []
        for _ in range(repetitions):
            start = time.perf_counter()
            warp = fit_spline(controls, regularization=plan.regularization)
            for layer, rgb_feat in layers:
                warp_feature_layer(rgb_feat, warp, layer, scene.rgb_size)
            samples.append((time.perf_counter() - start) * 1000.0)

        rows.append(BenchmarkEntry(control_count=k, median_ms=statistics.median(samples)))
        log.info(f"Benchmark k={k}: {rows[-1].median_ms:.3f} ms")

    return BenchmarkResult(
        rows=rows, repetitions=repetitions, correspondences=len(correspondences)
    )


def format_benchmark(result: BenchmarkResult) -> str:
    lines = ["k median_ms fps note"]
    for row in result.rows:
        if row.median_ms is None:
            lines.append(f"{row.control_count} - - {row.note}")
        else:
            lines.append(f"{row.control_count} {row.median_ms:.3f} {row.fps:.1f} {row.note}".rstrip())
    return "\n".join(lines) + "\n"
