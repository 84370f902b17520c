import datetime
from typing import Optional

from typing_extensions import Self

from pydantic import BaseModel
from sqlalchemy import DateTime, Float, Identity, Integer, String
from sqlalchemy.orm import Mapped, mapped_column

from app.models import Base


class BenchmarkRow(Base):
    __tablename__ = "benchmark_row"

    id: Mapped[int] = mapped_column(
        Integer, Identity(start=1, increment=1), primary_key=True
    )
    created_at: Mapped[datetime.datetime] = mapped_column(DateTime(timezone=True))
    sample: Mapped[str] = mapped_column(String(250))
    control_count: Mapped[int] = mapped_column(Integer)
    repetitions: Mapped[int] = mapped_column(Integer)
    median_ms: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    note: Mapped[str] = mapped_column(String(250), default="")

    def to_dict(self):
        return {
            "id": self.id,
            "created_at": self.created_at,
            "sample": self.sample,
            "control_count": self.control_count,
            "repetitions": self.repetitions,
            "median_ms": self.median_ms,
            "note": self.note,
        }

    def __repr__(self):
        return (
            f"<BenchmarkRow id={self.id} sample={self.sample} control_count={self.control_count} "
            f"median_ms={self.median_ms} note={self.note}>"
        )

    def __eq__(self, row: Self):
        return (
            self.id == row.id
            and self.sample == row.sample
            and self.control_count == row.control_count
            and self.repetitions == row.repetitions
            and self.median_ms == row.median_ms
            and self.note == row.note
        )


class BenchmarkRowSchema(BaseModel):
    sample: str
    control_count: int
    repetitions: int
    median_ms: Optional[float]
    note: str
