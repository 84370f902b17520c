import os
from contextlib import contextmanager

from dotenv import load_dotenv
from sqlalchemy import Engine, create_engine
from sqlalchemy.orm import scoped_session, sessionmaker

load_dotenv()
DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///range_fuse.db")


def get_engine(url: str = None) -> Engine:
    """
    Create an engine for SQLAlchemy

    Args:
        url (str, optional): Database URL. Defaults to DATABASE_URL from the environment.

    Returns:
        Engine: The DB engine
    """
    url = url or DATABASE_URL
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    return create_engine(url, connect_args=connect_args)


def init_db(engine: Engine) -> None:
    """Create any missing results tables (alembic remains the migration path for Postgres)."""
    from app.models import Base

    Base.metadata.create_all(bind=engine)


def get_db():
    """
    Get the database session object

    Yields:
        Session: Get the DB session
    """
    engine = get_engine()
    init_db(engine)
    db = scoped_session(sessionmaker(bind=engine, autoflush=True))

    try:
        yield db
    finally:
        db.close()


@contextmanager
def session_scope():
    """Session for callers outside FastAPI's dependency injection (the CLI)."""
    yield from get_db()
