import logging
from functools import lru_cache
from typing import Annotated, List

import orjson
from fastapi import BackgroundTasks, Depends, FastAPI, HTTPException, Query, Request, Response
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import ValidationError
from sqlalchemy import select
from sqlalchemy.orm import Session

import app.database as db
from app import utils
from app.errors import FuseError
from app.evaluation import (
    NO_CLASS,
    TABLE_COUNTS,
    benchmark_control_points,
    compute_iou,
    label_image,
    parse_remap,
    rgb_mask_lookup_baseline,
)
from app.fusion import FusionPlan, extractors_for, run_fusion_pipeline
from app.models import EvalRun
from app.pointcloud_io import LabeledScene
from app.range_image import GridConfig, RangeImage, build_range_image
from app.synthetic import default_rig, default_scene, generate_synthetic_scene
from app.visualizer import Channel, plot_benchmark, render_range_bytes

app = FastAPI(title="range-fuse")

log = logging.getLogger("uvicorn.error")

SessionDep = Annotated[Session, Depends(db.get_db)]


@lru_cache(maxsize=1)
def synthetic_sample() -> LabeledScene:
    """The default synthetic street sample, generated once per process."""
    log.info("Generating the default synthetic sample")
    return generate_synthetic_scene(default_scene(), default_rig())


@lru_cache(maxsize=1)
def synthetic_range_image() -> RangeImage:
    return build_range_image(synthetic_sample().cloud, GridConfig())


def _json(data) -> StreamingResponse:
    return StreamingResponse(
        iter([orjson.dumps(data, option=orjson.OPT_INDENT_2)]),
        media_type="application/json",
    )


@app.get("/synthetic/rangeImage")
def get_range_image(channel: Channel = Channel.range) -> Response:
    """
    Render a channel of the synthetic sample's range image.

    Args:
        channel (Channel, optional): range, intensity, validity or class-overlay. Defaults to Channel.range.

    Returns:
        Response: PGM image, or PPM for class-overlay
    """
    img = synthetic_range_image()
    labels = None
    media_type, suffix = "image/x-portable-graymap", "pgm"
    if channel == Channel.class_overlay:
        labels = label_image(img, synthetic_sample().per_point_class)
        media_type, suffix = "image/x-portable-pixmap", "ppm"
    headers = {"Content-Disposition": f'inline; filename="{channel.value}.{suffix}"'}
    return Response(render_range_bytes(img, channel, labels), headers=headers, media_type=media_type)


@app.get("/synthetic/pipeline")
def get_pipeline(controls: int = 48, lambda_: float = 0.0) -> StreamingResponse:
    """
    Run the fusion pipeline with stub extractors on the synthetic sample.

    Args:
        controls (int, optional): Control points k. Defaults to 48.
        lambda_ (float, optional): Spline regularization. Defaults to 0.0.

    Returns:
        StreamingResponse: Per-stage milliseconds, fit count and the fused grid shapes
    """
    plan = FusionPlan(control_count=controls, regularization=lambda_)
    rgb_extractor, range_extractor = extractors_for(plan)
    result = run_fusion_pipeline(synthetic_sample(), plan, rgb_extractor, range_extractor)

    return _json(
        {
            "timings": result.timings,
            "fit_count": result.fit_count,
            "correspondences": len(result.correspondences),
            "fit_residual": result.warp.fit_residual,
            "layers": {
                label: list(grid.shape) for label, grid in zip(result.labels, result.fused)
            },
        }
    )


@app.get("/synthetic/baseline")
def get_baseline(session: SessionDep, remap: str = "") -> StreamingResponse:
    """
    Score the RGB mask lookup baseline on the synthetic sample and store the run.

    Args:
        session (SessionDep): Current session
        remap (str, optional): Class substitutions such as "2:1". Defaults to "".

    Returns:
        StreamingResponse: The IoU report
    """
    scene = synthetic_sample()
    img = synthetic_range_image()
    pred = rgb_mask_lookup_baseline(scene.rgb_classes, img, scene.calib, parse_remap(remap))
    gt = label_image(img, scene.per_point_class)
    report = compute_iou(pred, gt, pred != NO_CLASS, num_classes=scene.num_classes)

    run = utils.save_iou_report(session, report, kind="baseline", sample=scene.name)
    return _json({"run_id": run.id, **report.to_dict()})


@app.get("/bench")
def get_bench(
    session: SessionDep,
    background_tasks: BackgroundTasks,
    counts: Annotated[List[int], Query()] = list(TABLE_COUNTS),
    repetitions: int = 3,
) -> Response:
    """
    Benchmark spline fit plus warp against the number of control points and plot it.

    Args:
        session (SessionDep): Current session
        background_tasks (BackgroundTasks): Current background tasks
        counts (List[int], optional): Control counts. Defaults to 4, 24, 48, 96, 192, 384.
        repetitions (int, optional): Timed runs per count. Defaults to 3.

    Returns:
        Response: Image response with the timing curve
    """
    scene = synthetic_sample()
    result = benchmark_control_points(scene, counts, repetitions)
    utils.save_benchmark(session, result, sample=scene.name)

    img_buf = plot_benchmark(result.rows)
    background_tasks.add_task(img_buf.close)
    headers = {"Content-Disposition": 'inline; filename="bench.png"'}

    return Response(img_buf.getvalue(), headers=headers, media_type="image/png")


@app.get("/runs")
def get_runs(session: SessionDep, kind: str = None, limit: int = 50) -> StreamingResponse:
    """
    Stored evaluation runs, newest first.

    Args:
        session (SessionDep): Current session
        kind (str, optional): Only "eval" or only "baseline" runs. Defaults to None.
        limit (int, optional): Maximum number of runs. Defaults to 50.

    Raises:
        HTTPException: Unknown kind

    Returns:
        StreamingResponse: Runs with their per-class IoU
    """
    query = select(EvalRun).order_by(EvalRun.created_at.desc(), EvalRun.id.desc()).limit(limit)
    if kind is not None:
        if kind not in ("eval", "baseline"):
            raise HTTPException(detail=f'Unknown run kind "{kind}"', status_code=404)
        query = query.where(EvalRun.kind == kind)

    runs = session.scalars(query).all()
    return _json([run.to_dict() for run in runs])


@app.exception_handler(FuseError)
def fuse_exception_handler(request: Request, exception: FuseError) -> JSONResponse:
    """
    Report invalid parameters and degenerate inputs as unprocessable requests.

    Args:
        request (Request): Current request
        exception (FuseError): Raised exception

    Returns:
        JSONResponse: Error type and message
    """
    log.warning(f"{request.url.path}: {type(exception).__name__}: {exception}")
    return JSONResponse(
        {"detail": str(exception), "error": type(exception).__name__}, status_code=422
    )


@app.exception_handler(ValidationError)
def validation_exception_handler(request: Request, exception: ValidationError) -> JSONResponse:
    return JSONResponse({"detail": exception.errors(include_url=False)}, status_code=422)


@app.exception_handler(HTTPException)
def http_exception_handler(request: Request, exception: HTTPException) -> JSONResponse:
    """
    A helper handler to handle various status code exception differently if more data is needed.

    Args:
        request (Request): Current request
        exception (HTTPException): Raised exception

    Returns:
        JSONResponse: Detailed response about raised exception
    """
    return JSONResponse({"detail": exception.detail}, status_code=exception.status_code)
