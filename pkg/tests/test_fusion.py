import dataclasses
import logging
from unittest import TestCase

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from app import fusion
from app.errors import DegenerateGeometryError, ParameterError, PreconditionError, ShapeError
from app.pointcloud_io import CalibrationSet
from app.projection import build_correspondences
from app.range_image import build_range_image
from app.sampling import FeatureGrid, in_bounds
from app.spline import eval_spline, fit_spline

case = TestCase()
case.maxDiff = None

CORNERS = np.array([[0.0, 0.0], [31.0, 0.0], [0.0, 15.0], [31.0, 15.0], [16.0, 8.0]])


def _random_grid(shape, stride=1, source_size=None, seed=0) -> FeatureGrid:
    H, W, _ = shape
    rng = np.random.default_rng(seed)
    return FeatureGrid(data=rng.normal(size=shape), stride=stride, source_size=source_size or (W, H))


def test_query_positions__pixel_centers():
    layer = fusion.RangeLayer(2, 1, 2, (4, 2))

    assert_array_equal([[0.5, 0.5], [2.5, 0.5]], fusion.query_positions(layer))


def test_range_layer__for_image_rounds_up():
    case.assertEqual((17, 5), fusion.RangeLayer.for_image((33, 9), 2)[:2])


def test_warp_feature_layer__identity_returns_input():
    rgb_feat = _random_grid((16, 32, 3))
    warp = fit_spline(CORNERS, CORNERS)
    layer = fusion.RangeLayer(32, 16, 1, (32, 16))

    actual = fusion.warp_feature_layer(rgb_feat, warp, layer, (32, 16))

    case.assertEqual((16, 32, 3), actual.shape)
    assert_allclose(rgb_feat.data, actual.data, atol=1e-5)


def test_warp_feature_layer__scales_between_strides():
    # range pixel (x, y) sits at RGB pixel (2x + 0.5, 2y + 0.5), the center of a 2x2 block
    rgb_feat = _random_grid((16, 32, 4), stride=2, source_size=(64, 32))
    warp = fit_spline(CORNERS, 2 * CORNERS + 0.5)
    layer = fusion.RangeLayer(32, 16, 1, (32, 16))

    actual = fusion.warp_feature_layer(rgb_feat, warp, layer, (64, 32))

    assert_allclose(rgb_feat.data, actual.data, atol=1e-5)


def test_warp_feature_layer__outside_image_is_zero():
    rgb_feat = _random_grid((16, 32, 3))
    warp = fit_spline(CORNERS, CORNERS + 1000)
    layer = fusion.RangeLayer(16, 8, 2, (32, 16))

    actual = fusion.warp_feature_layer(rgb_feat, warp, layer, (32, 16))

    case.assertEqual((8, 16, 3), actual.shape)
    case.assertEqual(2, actual.stride)
    case.assertFalse(actual.data.any())


def test_warp_feature_layer__partial_overlap_zeroes_exactly_the_outside():
    rgb_feat = FeatureGrid(data=np.ones((16, 32, 2)), stride=1, source_size=(32, 16))
    warp = fit_spline(CORNERS, CORNERS + [10.25, -3.5])
    layer = fusion.RangeLayer(32, 16, 1, (32, 16))

    actual = fusion.warp_feature_layer(rgb_feat, warp, layer, (32, 16))

    positions = fusion.warped_feature_positions(warp, layer, 1)
    outside = ~in_bounds(positions, (32, 16)).reshape(16, 32)
    zero = ~actual.data.any(axis=2)
    case.assertTrue(outside.any())
    case.assertFalse(outside.all())
    assert_array_equal(outside, zero)


def test_warp_feature_layer__source_size_mismatch():
    with case.assertRaises(PreconditionError):
        fusion.warp_feature_layer(
            _random_grid((16, 32, 3)),
            fit_spline(CORNERS, CORNERS),
            fusion.RangeLayer(32, 16, 1, (32, 16)),
            (64, 32),
        )


def test_warped_feature_positions__consistent_across_strides():
    rng = np.random.default_rng(9)
    centers = rng.uniform([0, 0], [63, 15], size=(20, 2))
    warp = fit_spline(centers, centers * [3.1, 2.7] + rng.normal(scale=2.0, size=(20, 2)))

    for range_stride in (1, 2, 4, 8):
        layer = fusion.RangeLayer.for_image((64, 16), range_stride)
        full = eval_spline(warp, fusion.query_positions(layer))
        for rgb_stride in (1, 2, 4, 16):
            actual = fusion.warped_feature_positions(warp, layer, rgb_stride)

            assert_allclose(full, (actual + 0.5) * rgb_stride - 0.5, atol=1e-9)


def _affine_image(size, channels=((0.02, 0.05, 0.0), (-0.03, 0.01, 1.0))) -> np.ndarray:
    W, H = size
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    return np.stack([a * x + b * y + c for a, b, c in channels], axis=-1)


def test_warp_feature_layer__affine_field_at_stride_two():
    # feature value is affine in the stride-2 grid coordinate
    rgb_feat = FeatureGrid(data=_affine_image((32, 16)), stride=2, source_size=(64, 32))
    shift = np.array([3.0, 2.0])
    warp = fit_spline(CORNERS, 1.5 * CORNERS + shift)
    layer = fusion.RangeLayer(32, 16, 1, (32, 16))

    actual = fusion.warp_feature_layer(rgb_feat, warp, layer, (64, 32))

    gx, gy = ((1.5 * fusion.query_positions(layer) + shift + 0.5) / 2 - 0.5).T
    expected = np.stack([0.02 * gx + 0.05 * gy, -0.03 * gx + 0.01 * gy + 1.0], axis=1)
    assert_allclose(expected.reshape(16, 32, 2), actual.data, atol=1e-5)


def test_warp_feature_layer__commutes_with_pooling_on_affine_fields():
    rgb_levels = fusion.make_stub_extractor([(1, 2), (2, 2)])(_affine_image((64, 32)))
    warp = fit_spline(CORNERS, 1.5 * CORNERS + [3.0, 2.0])
    full = fusion.RangeLayer(32, 16, 1, (32, 16))
    half = fusion.RangeLayer.for_image((32, 16), 2)

    warped_full = fusion.warp_feature_layer(rgb_levels[0], warp, full, (64, 32))
    warp_then_pool = fusion.make_stub_extractor([(2, 2)])(warped_full.data)[0]
    pool_then_warp = fusion.warp_feature_layer(rgb_levels[1], warp, half, (64, 32))

    case.assertEqual((8, 16, 2), pool_then_warp.shape)
    assert_allclose(warp_then_pool.data, pool_then_warp.data, atol=1e-5)


def test_warp_image_to_range__identity():
    rng = np.random.default_rng(1)
    rgb = rng.random((16, 32, 3))

    actual = fusion.warp_image_to_range(rgb, fit_spline(CORNERS, CORNERS), (32, 16))

    assert_allclose(rgb, actual.data, atol=1e-5)


def test_fuse__concatenates_range_then_rgb():
    range_feat = _random_grid((4, 8, 8), seed=1)
    rgb_feat = _random_grid((4, 8, 16), seed=2)

    actual = fusion.fuse(range_feat, rgb_feat)

    case.assertEqual((4, 8, 24), actual.shape)
    assert_array_equal(range_feat.data, actual.data[..., :8])
    assert_array_equal(rgb_feat.data, actual.data[..., 8:])


def test_fuse__zero_channel_side():
    range_feat = _random_grid((4, 8, 8))
    empty = FeatureGrid(data=np.zeros((4, 8, 0)), stride=1, source_size=(8, 4))

    case.assertEqual((4, 8, 8), fusion.fuse(range_feat, empty).shape)
    case.assertEqual((4, 8, 8), fusion.fuse(empty, range_feat).shape)


def test_fuse__shape_mismatch():
    with case.assertRaises(ShapeError):
        fusion.fuse(_random_grid((4, 8, 2)), _random_grid((4, 7, 2)))


def test_fuse__stride_mismatch():
    with case.assertRaises(ShapeError):
        fusion.fuse(
            _random_grid((4, 8, 2), stride=1, source_size=(16, 8)),
            _random_grid((4, 8, 2), stride=2, source_size=(16, 8)),
        )


def test_stub_extractor__constant_image_stays_constant():
    extractor = fusion.make_stub_extractor([(1, 3), (2, 5), (8, 2)])

    grids = extractor(np.full((13, 21, 3), 0.25))

    case.assertEqual([(13, 21, 3), (7, 11, 5), (2, 3, 2)], [g.shape for g in grids])
    for grid in grids:
        assert_allclose(0.25, grid.data)
        case.assertEqual((21, 13), grid.source_size)


def test_stub_extractor__pools_block_means():
    image = np.arange(16, dtype=np.float64).reshape(4, 4, 1)

    (grid,) = fusion.StubExtractor([(4, 1)])(image)

    assert_allclose([[[7.5]]], grid.data)


def test_stub_extractor__tiles_channels():
    image = np.stack([np.zeros((2, 2)), np.ones((2, 2))], axis=-1)

    (grid,) = fusion.StubExtractor([(1, 5)])(image)

    assert_array_equal([0, 1, 0, 1, 0], grid.data[0, 0])


def test_stub_extractor__no_levels():
    case.assertEqual([], fusion.StubExtractor([])(np.ones((4, 4, 3))))


def test_stub_extractor__rejects_bad_levels():
    with case.assertRaises(ParameterError):
        fusion.StubExtractor([(3, 4)])
    with case.assertRaises(ParameterError):
        fusion.StubExtractor([(4, 4), (2, 4)])
    with case.assertRaises(ParameterError):
        fusion.StubExtractor([(2, 0)])


def test_stub_extractor__rejects_zero_channel_input():
    with case.assertRaises(ParameterError):
        fusion.StubExtractor([(1, 1)])(np.zeros((4, 4, 0)))


def test_extractors_for__cover_plan_strides():
    rgb, rng = fusion.extractors_for(fusion.FusionPlan(), rgb_channels=6, range_channels=2)

    case.assertEqual([4, 8, 16], [s for s, _ in rgb.levels])
    case.assertEqual([2, 4, 8], [s for s, _ in rng.levels])
    case.assertEqual({6}, {c for _, c in rgb.levels})


def test_fusion_plan__rejects_duplicate_labels():
    pair = fusion.LayerPair(range_stride=2, rgb_stride=4, label="fire2")

    with case.assertRaises(ValidationError):
        fusion.FusionPlan(layer_pairs=[pair, pair])
    with case.assertRaises(ValidationError):
        fusion.FusionPlan(control_count=2)


def test_select_controls__clamps_k(caplog, small_scene, small_grid):
    img = build_range_image(small_scene.cloud, small_grid)
    correspondences = build_correspondences(img, small_scene.calib, small_scene.rgb_size).subset(
        np.arange(10)
    )

    with caplog.at_level(logging.WARNING, logger="app.fusion"):
        actual = fusion.select_controls(correspondences, 48)

    case.assertEqual(10, len(actual))
    case.assertIn("Only 10 correspondences for 48 controls", caplog.text)


def test_select_controls__needs_three_correspondences(small_scene, small_grid):
    img = build_range_image(small_scene.cloud, small_grid)
    correspondences = build_correspondences(img, small_scene.calib, small_scene.rgb_size)

    for count in (0, 2):
        with case.assertRaises(DegenerateGeometryError):
            fusion.select_controls(correspondences.subset(np.arange(count)), 48)


def test_run_fusion_pipeline__default_plan(small_scene, small_grid):
    plan = fusion.FusionPlan()
    rgb_extractor, range_extractor = fusion.extractors_for(plan)

    result = fusion.run_fusion_pipeline(small_scene, plan, rgb_extractor, range_extractor, small_grid)

    case.assertEqual(1, result.fit_count)
    case.assertEqual(["fire2", "fire4", "fire7"], result.labels)
    case.assertEqual([(8, 32, 24), (4, 16, 24), (2, 8, 24)], [g.shape for g in result.fused])
    case.assertEqual(48, len(result.control_indices))
    case.assertEqual(48, len(result.warp))
    case.assertTrue(all(w is result.warp for w in result.layer_warps))
    case.assertLess(result.warp.fit_residual, 1e-6)
    case.assertEqual(
        {"build_range", "correspondences", "fps", "fit"}
        | {f"{stage}[{label}]" for stage in ("warp", "fuse") for label in result.labels},
        set(result.timings),
    )


def test_run_fusion_pipeline__no_layer_pairs(small_scene, small_grid):
    plan = fusion.FusionPlan(layer_pairs=[])
    rgb_extractor, range_extractor = fusion.extractors_for(plan)

    result = fusion.run_fusion_pipeline(small_scene, plan, rgb_extractor, range_extractor, small_grid)

    case.assertEqual(0, result.fit_count)
    case.assertEqual([], result.fused)
    case.assertIsNone(result.warp)
    case.assertGreater(result.range_image.valid_count, 0)


def test_run_fusion_pipeline__camera_sees_nothing(small_scene, small_grid):
    backwards = CalibrationSet.compose(
        small_scene.calib.camera_intrinsics_projective,
        np.eye(3),
        [[0, 1, 0, 0], [0, 0, -1, 0], [-1, 0, 0, 0]],
    )
    scene = dataclasses.replace(small_scene, calib=backwards)
    plan = fusion.FusionPlan()

    with case.assertRaises(DegenerateGeometryError):
        fusion.run_fusion_pipeline(scene, plan, *fusion.extractors_for(plan), cfg=small_grid)


def test_run_fusion_pipeline__coincident_scene_copies_rgb(coincident_scene):
    grid = coincident_scene.extras["grid"]
    plan = fusion.FusionPlan(layer_pairs=[fusion.LayerPair(range_stride=1, rgb_stride=1, label="full")])
    rgb_extractor, range_extractor = fusion.extractors_for(plan, rgb_channels=3, range_channels=5)

    result = fusion.run_fusion_pipeline(coincident_scene, plan, rgb_extractor, range_extractor, grid)

    (fused,) = result.fused
    case.assertEqual((8, 32, 8), fused.shape)
    assert_allclose(result.range_image.channels, fused.data[..., :5], rtol=1e-6)
    assert_allclose(coincident_scene.rgb, fused.data[..., 5:], atol=1e-5)
    assert_allclose(result.correspondences.range_px, result.correspondences.rgb_px, atol=1e-6)


def test_format_timings():
    case.assertEqual("fit=1.500\nfps=0.250\n", fusion.format_timings({"fit": 1.5, "fps": 0.25}))
