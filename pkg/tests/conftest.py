import datetime
import math

import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine, event
from sqlalchemy.orm import Session, scoped_session, sessionmaker

from app import app
from app.database import get_db
from app.models import BenchmarkRow, Base, ClassIoU, EvalRun
from app.pointcloud_io import CalibrationSet, LabeledScene
from app.range_image import GridConfig
from app.synthetic import (
    Box,
    Cylinder,
    RigParams,
    SceneSpec,
    generate_coincident_scene,
    generate_synthetic_scene,
    uniform_elevations,
)


@pytest.fixture()
def test_db():
    """
    An in-memory test DB

    Yields:
        _type_: Session
    """
    engine = create_engine(
        "sqlite:///:memory:", connect_args={"check_same_thread": False}
    )

    @event.listens_for(engine, "connect")
    def enable_foreign_keys(dbapi_connection, connection_record):
        cursor = dbapi_connection.cursor()
        cursor.execute("PRAGMA foreign_keys=ON")
        cursor.close()

    connection = engine.connect()

    db = scoped_session(sessionmaker(bind=connection, autoflush=True))
    Base.metadata.create_all(bind=engine)
    try:
        yield db
    finally:
        db.close()
        Base.metadata.drop_all(bind=engine)
        connection.close()


@pytest.fixture()
def test_client(test_db):
    def override_get_db():
        try:
            yield test_db
        finally:
            test_db.close()

    app.app.dependency_overrides[get_db] = override_get_db

    with TestClient(app.app) as client:
        yield client

    app.app.dependency_overrides.clear()


@pytest.fixture()
def seeded_test_db(test_db) -> Session:
    created_at = datetime.datetime(2024, 12, 2, 12, 0, tzinfo=datetime.timezone.utc)
    test_db.add_all(
        [
            EvalRun(
                id=1,
                created_at=created_at,
                kind="eval",
                sample="sample1",
                mean_iou=0.5,
                ignore_count=3,
                class_iou=[
                    ClassIoU(class_id=0, name="background", iou=0.9),
                    ClassIoU(class_id=1, name="car", iou=0.5),
                ],
            ),
            EvalRun(
                id=2,
                created_at=created_at + datetime.timedelta(hours=1),
                kind="baseline",
                sample="sample2",
                mean_iou=None,
                ignore_count=0,
            ),
        ]
    )
    test_db.add(
        BenchmarkRow(
            id=1,
            created_at=created_at,
            sample="sample1",
            control_count=48,
            repetitions=3,
            median_ms=1.5,
            note="",
        )
    )
    test_db.commit()
    return test_db


@pytest.fixture()
def small_rig() -> RigParams:
    """
    16 beams x 64 steps over 90 degrees, camera at the LiDAR origin with a 128 x 96 image.
    Every return lands inside the image and neighbouring returns are more than a pixel apart.
    """
    return RigParams(
        beam_elevations=uniform_elevations(16, math.radians(-15.0), math.radians(1.25)),
        azimuth_steps=64,
        image_width=128,
        image_height=96,
        fx=60.0,
        fy=60.0,
    )


@pytest.fixture()
def small_spec() -> SceneSpec:
    return SceneSpec(
        ground_z=-1.5,
        boxes=[
            Box(lo=(6.0, -1.0, -1.5), hi=(9.0, 1.0, 0.5), class_id=1),
            Box(lo=(7.0, -3.5, -1.5), hi=(8.0, -3.0, 0.3), class_id=3),
        ],
        cylinders=[
            Cylinder(center=(5.0, 2.5), radius=0.4, z_min=-1.5, z_max=1.0, class_id=2)
        ],
        num_classes=4,
    )


@pytest.fixture()
def small_scene(small_spec, small_rig) -> LabeledScene:
    return generate_synthetic_scene(small_spec, small_rig)


@pytest.fixture()
def small_grid(small_rig) -> GridConfig:
    return GridConfig(
        width=small_rig.azimuth_steps,
        num_beams=len(small_rig.beam_elevations),
        azimuth_min=small_rig.azimuth_min,
        azimuth_max=small_rig.azimuth_max,
    )


@pytest.fixture()
def coincident_scene() -> LabeledScene:
    return generate_coincident_scene(width=32, height=8, seed=7)


@pytest.fixture()
def identity_calib() -> CalibrationSet:
    identity = np.hstack([np.eye(3), np.zeros((3, 1))])
    return CalibrationSet.compose(identity, np.eye(3), identity)
