from unittest import TestCase

import numpy as np
from numpy.testing import assert_array_equal

from app import evaluation as ev
from app.errors import ParameterError, ShapeError
from app.range_image import GridConfig, build_range_image, read_range_image, write_range_image
from app.synthetic import default_rig, default_scene, generate_synthetic_scene

case = TestCase()
case.maxDiff = None

GT = np.array([[1, 1, 1, 1], [0, 0, 0, 0]])
PRED = np.array([[1, 1, 1, 0], [1, 0, 0, 0]])
FULL = np.ones_like(GT, dtype=bool)


def test_compute_iou__hand_counted():
    report = ev.compute_iou(PRED, GT, FULL, num_classes=4)

    case.assertEqual({0: 0.6, 1: 0.6}, report.per_class)
    case.assertEqual([2, 3], report.absent)
    case.assertEqual(0.6, report.mean_over_foreground)
    case.assertEqual(0, report.confusion.ignore_count)
    assert_array_equal([[3, 1, 0, 0], [1, 3, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]], report.confusion.counts)


def test_compute_iou__perfect_prediction():
    report = ev.compute_iou(GT, GT, FULL)

    case.assertEqual({0: 1.0, 1: 1.0}, report.per_class)
    case.assertEqual(1.0, report.mean_over_foreground)


def test_compute_iou__everything_masked():
    report = ev.compute_iou(PRED, GT, np.zeros_like(FULL), num_classes=3)

    case.assertEqual({}, report.per_class)
    case.assertEqual([0, 1, 2], report.absent)
    case.assertIsNone(report.mean_over_foreground)
    case.assertEqual(8, report.confusion.ignore_count)


def test_compute_iou__background_only_has_no_mean():
    zeros = np.zeros((3, 3), dtype=np.int64)

    report = ev.compute_iou(zeros, zeros, np.ones((3, 3), dtype=bool))

    case.assertEqual({0: 1.0}, report.per_class)
    case.assertIsNone(report.mean_over_foreground)


def test_compute_iou__no_class_pixels_are_ignored():
    gt = GT.copy()
    gt[0, 0] = ev.NO_CLASS

    report = ev.compute_iou(PRED, gt, FULL, num_classes=2)

    case.assertEqual(1, report.confusion.ignore_count)
    case.assertEqual(7, report.confusion.total)
    case.assertEqual(0.5, report.per_class[1])


def test_compute_iou__permuting_classes_permutes_report():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 5, size=(20, 30))
    gt = rng.integers(0, 5, size=(20, 30))
    mask = rng.random((20, 30)) > 0.2
    # background stays put so the foreground mean is comparable
    perm = np.array([0, 3, 1, 4, 2])

    report = ev.compute_iou(pred, gt, mask, num_classes=5)
    permuted = ev.compute_iou(perm[pred], perm[gt], mask, num_classes=5)

    for c, iou in report.per_class.items():
        case.assertAlmostEqual(iou, permuted.per_class[perm[c]], places=12)
    case.assertAlmostEqual(report.mean_over_foreground, permuted.mean_over_foreground, places=12)


def test_compute_iou__masked_pixels_change_nothing():
    rng = np.random.default_rng(1)
    pred = rng.integers(0, 4, size=(10, 10))
    gt = rng.integers(0, 4, size=(10, 10))
    mask = rng.random((10, 10)) > 0.3
    extra_pred = rng.integers(0, 4, size=(10, 7))
    extra_gt = rng.integers(0, 4, size=(10, 7))

    report = ev.compute_iou(pred, gt, mask, num_classes=4)
    padded = ev.compute_iou(
        np.hstack([pred, extra_pred]),
        np.hstack([gt, extra_gt]),
        np.hstack([mask, np.zeros((10, 7), dtype=bool)]),
        num_classes=4,
    )

    case.assertEqual(report.per_class, padded.per_class)
    case.assertEqual(report.mean_over_foreground, padded.mean_over_foreground)
    case.assertEqual(report.confusion.ignore_count + 70, padded.confusion.ignore_count)


def test_compute_iou__shape_mismatch():
    with case.assertRaises(ShapeError):
        ev.compute_iou(PRED, GT[:, :3], FULL)


def test_compute_iou__class_out_of_range():
    with case.assertRaises(ParameterError):
        ev.compute_iou(PRED, GT, FULL, num_classes=1)


def test_iou_report__to_dict():
    report = ev.compute_iou(PRED, GT, FULL, num_classes=3)

    case.assertEqual(
        {
            "per_class": {
                "0": {"name": "background", "iou": 0.6},
                "1": {"name": "car", "iou": 0.6},
            },
            "absent": [2],
            "mean": 0.6,
            "ignore_count": 0,
        },
        report.to_dict(),
    )


def test_format_iou_report():
    report = ev.compute_iou(PRED, GT, FULL, num_classes=3, class_names={0: "bg", 1: "car"})

    case.assertEqual(
        "class 0 bg iou=0.600000\nclass 1 car iou=0.600000\nclass 2 class2 iou=absent\nmean=0.600000\n",
        ev.format_iou_report(report),
    )
    case.assertEqual(
        "iou.0=0.600000\niou.1=0.600000\niou.2=absent\nmean=0.600000\nignore_count=0\n",
        ev.format_iou_report(report, machine=True),
    )


def test_parse_remap():
    case.assertEqual({2: 1, 5: 3}, ev.parse_remap("2:1, 5:3"))
    case.assertEqual({}, ev.parse_remap(""))
    with case.assertRaises(ParameterError):
        ev.parse_remap("2-1")


def test_label_image(small_scene, small_grid):
    img = build_range_image(small_scene.cloud, small_grid)

    labels = ev.label_image(img, small_scene.per_point_class)

    assert_array_equal(img.valid, labels != ev.NO_CLASS)
    assert_array_equal(small_scene.per_point_class[img.source_index[img.valid]], labels[img.valid])


def test_label_image__needs_source_index(tmp_path, small_scene, small_grid):
    img = build_range_image(small_scene.cloud, small_grid)
    write_range_image(img, tmp_path / "sample.rimg")

    with case.assertRaises(ParameterError):
        ev.label_image(read_range_image(tmp_path / "sample.rimg"), small_scene.per_point_class)


def test_rgb_mask_lookup_baseline__perfect_mask(small_scene, small_grid):
    img = build_range_image(small_scene.cloud, small_grid)
    gt = ev.label_image(img, small_scene.per_point_class)

    pred = ev.rgb_mask_lookup_baseline(small_scene.rgb_classes, img, small_scene.calib)
    report = ev.compute_iou(pred, gt, pred != ev.NO_CLASS, num_classes=small_scene.num_classes)

    assert_array_equal(img.valid, pred != ev.NO_CLASS)
    case.assertEqual({0, 1, 2, 3}, set(report.per_class))
    for iou in report.per_class.values():
        case.assertEqual(1.0, iou)
    case.assertEqual(1.0, report.mean_over_foreground)


def test_rgb_mask_lookup_baseline__remap(small_scene, small_grid):
    img = build_range_image(small_scene.cloud, small_grid)
    gt = ev.label_image(img, small_scene.per_point_class)

    pred = ev.rgb_mask_lookup_baseline(small_scene.rgb_classes, img, small_scene.calib, {2: 1})
    report = ev.compute_iou(pred, gt, pred != ev.NO_CLASS, num_classes=small_scene.num_classes)

    case.assertFalse((pred == 2).any())
    case.assertEqual(0.0, report.per_class[2])
    case.assertLess(report.per_class[1], 1.0)


def test_rgb_mask_lookup_baseline__points_outside_image(small_scene, small_grid):
    img = build_range_image(small_scene.cloud, small_grid)
    cropped = small_scene.rgb_classes[:48, :64]

    pred = ev.rgb_mask_lookup_baseline(cropped, img, small_scene.calib)

    case.assertLess(np.count_nonzero(pred != ev.NO_CLASS), img.valid_count)
    case.assertGreater(np.count_nonzero(pred != ev.NO_CLASS), 0)


def test_benchmark_entry__fps():
    case.assertEqual(500.0, ev.BenchmarkEntry(control_count=4, median_ms=2.0).fps)
    case.assertIsNone(ev.BenchmarkEntry(control_count=4, median_ms=None).fps)


def test_benchmark_control_points__rows(small_scene, small_grid):
    result = ev.benchmark_control_points(small_scene, [2, 4, 24, 100_000], repetitions=3, cfg=small_grid)

    case.assertEqual([2, 4, 24, 100_000], [row.control_count for row in result.rows])
    case.assertEqual(3, result.repetitions)
    case.assertIsNone(result.rows[0].median_ms)
    case.assertIsNone(result.rows[3].median_ms)
    case.assertTrue(result.rows[3].note.startswith("skipped"))
    case.assertGreater(result.rows[1].median_ms, 0.0)
    case.assertGreater(result.rows[2].median_ms, 0.0)

    lines = ev.format_benchmark(result).splitlines()
    case.assertEqual("k median_ms fps note", lines[0])
    case.assertTrue(lines[1].startswith("2 - - skipped"))
    case.assertEqual(5, len(lines))


def test_benchmark_control_points__needs_three_repetitions(small_scene):
    with case.assertRaises(ParameterError):
        ev.benchmark_control_points(small_scene, [4], repetitions=2)


def test_benchmark_control_points__runtime_grows_with_k():
    scene = generate_synthetic_scene(default_scene(), default_rig())

    result = ev.benchmark_control_points(scene, ev.TABLE_COUNTS, repetitions=5, cfg=GridConfig())

    medians = [row.median_ms for row in result.rows]
    case.assertNotIn(None, medians)
    for previous, current in zip(medians, medians[1:]):
        case.assertGreaterEqual(current, 0.8 * previous)
    case.assertGreater(medians[-1], medians[0])
