import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import click
import numpy as np
import orjson
from pydantic import ValidationError

import app.database as db
from app import utils
from app.errors import FuseError
from app.evaluation import (
    NO_CLASS,
    TABLE_COUNTS,
    benchmark_control_points,
    compute_iou,
    format_benchmark,
    format_iou_report,
    label_image,
    parse_remap,
    rgb_mask_lookup_baseline,
)
from app.fusion import (
    FusionPlan,
    extractors_for,
    format_timings,
    run_fusion_pipeline,
    select_controls,
    warp_image_to_range,
)
from app.pointcloud_io import LabeledScene, load_image, load_sample, write_sample
from app.projection import build_correspondences, write_correspondences
from app.range_image import GridConfig, RangeMode, SphericalParams, build_range_image, write_range_image
from app.sampling import SeedPolicy
from app.spline import dump_spline, fit_spline
from app.synthetic import default_rig, default_scene, generate_coincident_scene, generate_synthetic_scene
from app.visualizer import Channel, encode_ppm, mark_points, plot_benchmark, render_range_image, to_rgb8

log = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"
# config file keys that differ from the click parameter name
CONFIG_ALIASES = {"lambda": "regularization"}


class FuseGroup(click.Group):
    """Command group reporting toolkit errors as click errors instead of tracebacks."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except FuseError as e:
            raise click.ClickException(f"{type(e).__name__}: {e}") from e
        except ValidationError as e:
            raise click.ClickException(f"invalid configuration: {e}") from e


def load_config(ctx: click.Context, param: click.Parameter, value: Optional[str]):
    """Turn a key=value file into default maps for every subcommand, so flags still win."""
    if value is None:
        return value
    try:
        values = utils.read_config_file(value)
    except FuseError as e:
        raise click.BadParameter(str(e), ctx=ctx, param=param)
    values = {CONFIG_ALIASES.get(key, key): v for key, v in values.items()}
    ctx.default_map = {name: dict(values) for name in ctx.command.commands}
    return value


def grid_options(f):
    options = [
        click.option("--width", type=click.IntRange(min=1), default=512, show_default=True, help="Azimuth bins"),
        click.option("--beams", type=click.IntRange(min=1), default=64, show_default=True, help="Rows / sensor beams"),
        click.option("--fov-deg", type=click.FloatRange(0, 180, min_open=True), default=90.0, show_default=True),
        click.option("--mode", type=click.Choice([m.value for m in RangeMode]), default=RangeMode.beam.value, show_default=True),
        click.option("--elevation-min-deg", type=float, default=-24.8, show_default=True, help="Lowest elevation for spherical mode"),
        click.option("--elevation-max-deg", type=float, default=2.0, show_default=True, help="Highest elevation for spherical mode"),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def plan_options(f):
    options = [
        click.option("--controls", type=click.IntRange(min=3), default=48, show_default=True, help="Control points k"),
        click.option("--lambda", "regularization", type=click.FloatRange(min=0), default=0.0, show_default=True),
        click.option("--seed-policy", type=click.Choice([p.value for p in SeedPolicy]), default=SeedPolicy.center.value, show_default=True),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def sample_options(f):
    f = click.option("--synthetic", is_flag=True, help="Use the built-in synthetic street sample")(f)
    return click.argument("sample", type=click.Path(exists=True, file_okay=False), required=False)(f)


def out_option(f):
    return click.option("--out", type=click.Path(file_okay=False), default=".", show_default=True)(f)


def _grid(width: int, beams: int, fov_deg: float) -> GridConfig:
    return GridConfig.from_fov(width=width, num_beams=beams, fov_deg=fov_deg)


def _spherical(beams: int, elevation_min_deg: float, elevation_max_deg: float) -> SphericalParams:
    theta_min = math.radians(elevation_min_deg)
    return SphericalParams(
        theta_min=theta_min,
        delta_theta=(math.radians(elevation_max_deg) - theta_min) / beams,
    )


def _scene(sample: Optional[str], synthetic: bool, cfg: GridConfig) -> LabeledScene:
    if synthetic:
        return generate_synthetic_scene(
            default_scene(), default_rig(azimuth_steps=cfg.width, num_beams=cfg.num_beams)
        )
    if sample is None:
        raise click.UsageError("give a SAMPLE directory or --synthetic")
    return load_sample(sample, num_beams=cfg.num_beams)


def _out_dir(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _save_npy(array: np.ndarray, path: Path) -> Path:
    buf = io.BytesIO()
    np.save(buf, array)
    return utils.atomic_write_bytes(path, buf.getvalue())


def _emit_report(report, machine: bool, as_json: bool) -> None:
    if as_json:
        click.echo(orjson.dumps(report.to_dict(), option=orjson.OPT_INDENT_2))
    else:
        click.echo(format_iou_report(report, machine=machine), nl=False)


@click.group(cls=FuseGroup)
@click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    callback=load_config,
    is_eager=True,
    expose_value=False,
    help="key=value file with default flag values",
)
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def cli(verbose: bool) -> None:
    """LiDAR range images and spline-warped RGB feature fusion."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format=LOG_FORMAT)


@cli.command("range-image")
@sample_options
@grid_options
@out_option
def range_image_command(sample, synthetic, width, beams, fov_deg, mode, elevation_min_deg, elevation_max_deg, out):
    """Build the range image of a sample and cache it as <name>.rimg."""
    cfg = _grid(width, beams, fov_deg)
    scene = _scene(sample, synthetic, cfg)
    img = build_range_image(
        scene.cloud, cfg, RangeMode(mode), _spherical(beams, elevation_min_deg, elevation_max_deg)
    )
    path = write_range_image(img, _out_dir(out) / f"{scene.name}.rimg")
    click.echo(f"valid={img.valid_count}")
    click.echo(f"path={path}")


@cli.command()
@sample_options
@grid_options
@out_option
def correspond(sample, synthetic, width, beams, fov_deg, mode, elevation_min_deg, elevation_max_deg, out):
    """Write the range pixel to RGB pixel correspondences as "rcol rrow u v" lines."""
    cfg = _grid(width, beams, fov_deg)
    scene = _scene(sample, synthetic, cfg)
    img = build_range_image(
        scene.cloud, cfg, RangeMode(mode), _spherical(beams, elevation_min_deg, elevation_max_deg)
    )
    correspondences = build_correspondences(img, scene.calib, scene.rgb_size)
    path = write_correspondences(correspondences, _out_dir(out) / f"{scene.name}.corr")
    click.echo(f"correspondences={len(correspondences)}")
    click.echo(f"path={path}")


@cli.command()
@sample_options
@grid_options
@plan_options
@out_option
@click.option("--overlay", is_flag=True, help="Mark the control points in the warped image")
@click.option("--dump", is_flag=True, help="Also write the fitted spline as text")
def warp(
    sample, synthetic, width, beams, fov_deg, mode, elevation_min_deg, elevation_max_deg,
    controls, regularization, seed_policy, out, overlay, dump,
):
    """Warp the RGB image into the range domain through the fitted spline."""
    cfg = _grid(width, beams, fov_deg)
    scene = _scene(sample, synthetic, cfg)
    img = build_range_image(
        scene.cloud, cfg, RangeMode(mode), _spherical(beams, elevation_min_deg, elevation_max_deg)
    )
    correspondences = build_correspondences(img, scene.calib, scene.rgb_size)
    chosen = correspondences.subset(select_controls(correspondences, controls, seed_policy))
    spline = fit_spline(chosen, regularization=regularization)

    warped = to_rgb8(warp_image_to_range(scene.rgb, spline, img.size).data)
    if overlay:
        warped = mark_points(warped, chosen.range_px)

    out_dir = _out_dir(out)
    path = utils.atomic_write_bytes(out_dir / f"{scene.name}_warped.ppm", encode_ppm(warped))
    if dump:
        utils.atomic_write_bytes(out_dir / f"{scene.name}.spline", dump_spline(spline).encode())
    click.echo(f"controls={len(spline)}")
    click.echo(f"fit_residual={spline.fit_residual!r}")
    click.echo(f"path={path}")


@cli.command()
@click.argument("samples", nargs=-1, type=click.Path(exists=True, file_okay=False))
@click.option("--synthetic", is_flag=True, help="Add the built-in synthetic street sample")
@grid_options
@plan_options
@out_option
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
def pipeline(
    samples, synthetic, width, beams, fov_deg, mode, elevation_min_deg, elevation_max_deg,
    controls, regularization, seed_policy, out, jobs,
):
    """Run the fusion pipeline with stub extractors and save the fused grids as .npy files."""
    cfg = _grid(width, beams, fov_deg)
    plan = FusionPlan(
        control_count=controls, regularization=regularization, seed_policy=seed_policy
    )
    spherical = _spherical(beams, elevation_min_deg, elevation_max_deg)
    out_dir = _out_dir(out)
    sources = list(samples) + ([None] if synthetic else [])
    if not sources:
        raise click.UsageError("give at least one SAMPLE directory or --synthetic")

    def run_one(sample: Optional[str]) -> str:
        scene = _scene(sample, sample is None, cfg)
        rgb_extractor, range_extractor = extractors_for(plan)
        result = run_fusion_pipeline(
            scene, plan, rgb_extractor, range_extractor, cfg, RangeMode(mode), spherical
        )
        sample_dir = _out_dir(out_dir / scene.name)
        for label, grid in zip(result.labels, result.fused):
            _save_npy(grid.data, sample_dir / f"fused_{label}.npy")
        return (
            f"sample={scene.name}\n"
            + format_timings(result.timings)
            + f"fit_count={result.fit_count}\n"
        )

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        for block in executor.map(run_one, sources):
            click.echo(block, nl=False)


@cli.command("eval")
@click.argument("pred", type=click.Path(exists=True, dir_okay=False))
@click.argument("gt", type=click.Path(exists=True, dir_okay=False))
@click.option("--mask", type=click.Path(exists=True, dir_okay=False), help="PGM, nonzero where evaluated")
@click.option("--ignore-label", type=int, default=255, show_default=True, help="PGM value meaning no class")
@click.option("--machine", is_flag=True, help="key=value output")
@click.option("--json", "as_json", is_flag=True)
@click.option("--store", is_flag=True, help="Save the report to the results database")
def evaluate(pred, gt, mask, ignore_label, machine, as_json, store):
    """Per-class IoU between two PGM class grids."""
    pred_grid, gt_grid = load_image(pred), load_image(gt)
    pred_grid = np.where(pred_grid == ignore_label, NO_CLASS, pred_grid)
    gt_grid = np.where(gt_grid == ignore_label, NO_CLASS, gt_grid)
    mask_grid = load_image(mask) != 0 if mask else np.ones(gt_grid.shape, dtype=bool)

    report = compute_iou(pred_grid, gt_grid, mask_grid)
    _emit_report(report, machine, as_json)
    if store:
        with db.session_scope() as session:
            utils.save_iou_report(session, report, kind="eval", sample=Path(gt).stem)


@cli.command()
@sample_options
@grid_options
@out_option
@click.option("--remap", default="", help='Class substitutions such as "2:1,5:3"')
@click.option("--machine", is_flag=True, help="key=value output")
@click.option("--json", "as_json", is_flag=True)
@click.option("--store", is_flag=True, help="Save the report to the results database")
def baseline(
    sample, synthetic, width, beams, fov_deg, mode, elevation_min_deg, elevation_max_deg,
    out, remap, machine, as_json, store,
):
    """Label range pixels from the RGB segmentation mask and score them against the point labels."""
    cfg = _grid(width, beams, fov_deg)
    scene = _scene(sample, synthetic, cfg)
    if scene.rgb_classes is None or scene.per_point_class is None:
        raise click.UsageError(f"{scene.name} needs mask.pgm and labels.bin for the baseline")

    img = build_range_image(
        scene.cloud, cfg, RangeMode(mode), _spherical(beams, elevation_min_deg, elevation_max_deg)
    )
    pred = rgb_mask_lookup_baseline(scene.rgb_classes, img, scene.calib, parse_remap(remap))
    gt = label_image(img, scene.per_point_class)
    # only the part of the range image that has color
    report = compute_iou(pred, gt, pred != NO_CLASS, num_classes=scene.num_classes)

    render_range_image(img, Channel.class_overlay, _out_dir(out) / f"{scene.name}_baseline.ppm", pred)
    _emit_report(report, machine, as_json)
    if store:
        with db.session_scope() as session:
            utils.save_iou_report(session, report, kind="baseline", sample=scene.name)


@cli.command()
@sample_options
@grid_options
@plan_options
@click.option("--counts", default=",".join(map(str, TABLE_COUNTS)), show_default=True)
@click.option("--repetitions", type=int, default=5, show_default=True)
@click.option("--plot", type=click.Path(dir_okay=False), help="Write a PNG of time against k")
@click.option("--store", is_flag=True, help="Save the rows to the results database")
def bench(
    sample, synthetic, width, beams, fov_deg, mode, elevation_min_deg, elevation_max_deg,
    controls, regularization, seed_policy, counts, repetitions, plot, store,
):
    """Median spline fit plus dense warp time for each control count."""
    cfg = _grid(width, beams, fov_deg)
    scene = _scene(sample, synthetic, cfg)
    try:
        ks = [int(k) for k in counts.split(",") if k.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma separated integers, got {counts!r}")
    plan = FusionPlan(control_count=controls, regularization=regularization, seed_policy=seed_policy)

    result = benchmark_control_points(scene, ks, repetitions, plan, cfg, RangeMode(mode))
    click.echo(format_benchmark(result), nl=False)

    if plot:
        img_buf = plot_benchmark(result.rows)
        utils.atomic_write_bytes(plot, img_buf.getvalue())
        img_buf.close()
    if store:
        with db.session_scope() as session:
            utils.save_benchmark(session, result, sample=scene.name)


@cli.command()
@sample_options
@grid_options
@out_option
@click.option(
    "--channel",
    type=click.Choice([c.value for c in Channel]),
    default=Channel.range.value,
    show_default=True,
)
def render(sample, synthetic, width, beams, fov_deg, mode, elevation_min_deg, elevation_max_deg, out, channel):
    """Render one range image channel as PGM (or PPM for class-overlay)."""
    cfg = _grid(width, beams, fov_deg)
    scene = _scene(sample, synthetic, cfg)
    img = build_range_image(
        scene.cloud, cfg, RangeMode(mode), _spherical(beams, elevation_min_deg, elevation_max_deg)
    )
    channel = Channel(channel)
    labels = None
    if channel == Channel.class_overlay:
        if scene.per_point_class is None:
            raise click.UsageError(f"{scene.name} has no labels.bin for class-overlay")
        labels = label_image(img, scene.per_point_class)

    suffix = "ppm" if channel == Channel.class_overlay else "pgm"
    path = render_range_image(img, channel, _out_dir(out) / f"{scene.name}_{channel.value}.{suffix}", labels)
    click.echo(f"path={path}")


@cli.command()
@click.argument("directory", type=click.Path(file_okay=False))
@click.option("--coincident", is_flag=True, help="Write the identity-calibrated oracle scene instead")
@click.option("--width", type=click.IntRange(min=1), help="Azimuth steps [default: 512, coincident 32]")
@click.option("--beams", type=click.IntRange(min=1), help="Beams [default: 64, coincident 8]")
@click.option("--seed", type=int, default=0, show_default=True)
def synth(directory, coincident, width, beams, seed):
    """Export a synthetic sample directory that `load_sample` reads back."""
    if coincident:
        scene = generate_coincident_scene(width=width or 32, height=beams or 8, seed=seed)
    else:
        scene = generate_synthetic_scene(
            default_scene(), default_rig(azimuth_steps=width or 512, num_beams=beams or 64)
        )
    path = write_sample(scene, directory)
    click.echo(f"points={len(scene.cloud)}")
    click.echo(f"path={path}")


if __name__ == "__main__":
    cli()
