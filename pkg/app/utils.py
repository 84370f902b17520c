import datetime
import logging
import os
import tempfile
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Union

import pytz
from dotenv import load_dotenv
from sqlalchemy.orm import Session

from app.errors import FormatError
from app.models import (
    BenchmarkRow,
    BenchmarkRowSchema,
    ClassIoU,
    ClassIoUSchema,
    EvalRun,
    EvalRunSchema,
)

if TYPE_CHECKING:
    from app.evaluation import BenchmarkResult, IoUReport

load_dotenv()
TIMEZONE = os.getenv("TIMEZONE", "UTC")

log = logging.getLogger(__name__)
tz = pytz.timezone(TIMEZONE)


def now() -> datetime.datetime:
    return datetime.datetime.now(tz=tz)


def atomic_write_bytes(path: Union[str, os.PathLike], data: bytes) -> Path:
    """
    Write bytes to a temporary file next to the target, then rename it into place.

    Args:
        path (Union[str, os.PathLike]): Destination path
        data (bytes): Payload

    Raises:
        OSError: If the directory is not writable

    Returns:
        Path: The destination path
    """
    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise

    return path


def read_config_file(path: Union[str, os.PathLike]) -> Dict[str, str]:
    """
    Read a flat key=value configuration file.
    Blank lines and lines starting with # are ignored; dashes in keys become underscores
    so keys may be spelled like the CLI flags.

    Args:
        path (Union[str, os.PathLike]): Path to the file

    Raises:
        FormatError: If a non-comment line has no "="

    Returns:
        Dict[str, str]: Raw string values keyed by parameter name
    """
    values = {}
    for line_number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{line_number}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()

    return values


def save_iou_report(
    session: Session, report: "IoUReport", kind: str, sample: str
) -> EvalRun:
    """
    Persist an IoU report as an EvalRun with one ClassIoU row per present class.

    Args:
        session (Session): Current session
        report (IoUReport): The report to store
        kind (str): "eval" or "baseline"
        sample (str): Name of the evaluated sample

    Returns:
        EvalRun: The stored run
    """
    log.info(f"Storing {kind} run for {sample}")
    fields = EvalRunSchema(
        kind=kind,
        sample=sample,
        mean_iou=report.mean_over_foreground,
        ignore_count=report.confusion.ignore_count,
    )
    run = EvalRun(created_at=now(), **fields.model_dump())
    run.class_iou = [
        ClassIoU(
            **ClassIoUSchema(
                class_id=class_id, name=report.class_name(class_id), iou=iou
            ).model_dump()
        )
        for class_id, iou in sorted(report.per_class.items())
    ]
    session.add(run)
    session.commit()

    return run


def save_benchmark(
    session: Session, result: "BenchmarkResult", sample: str
) -> List[BenchmarkRow]:
    """
    Persist the rows of a control-point benchmark.

    Args:
        session (Session): Current session
        result (BenchmarkResult): Benchmark output
        sample (str): Name of the benchmarked sample

    Returns:
        List[BenchmarkRow]: The stored rows
    """
    log.info(f"Storing {len(result.rows)} benchmark rows for {sample}")
    created_at = now()
    rows = [
        BenchmarkRow(
            created_at=created_at,
            **BenchmarkRowSchema(
                sample=sample,
                control_count=row.control_count,
                repetitions=result.repetitions,
                median_ms=row.median_ms,
                note=row.note,
            ).model_dump(),
        )
        for row in result.rows
    ]
    session.add_all(rows)
    session.commit()

    return rows
