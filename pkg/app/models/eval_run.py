import datetime
from typing import TYPE_CHECKING, List, Optional

from typing_extensions import Self

from pydantic import BaseModel
from sqlalchemy import DateTime, Float, Identity, Integer, String
from sqlalchemy.orm import Mapped, mapped_column, relationship

from app.models import Base

if TYPE_CHECKING:
    from app.models import ClassIoU


class EvalRun(Base):
    __tablename__ = "eval_run"

    id: Mapped[int] = mapped_column(
        Integer, Identity(start=1, increment=1), primary_key=True
    )
    created_at: Mapped[datetime.datetime] = mapped_column(DateTime(timezone=True))
    kind: Mapped[str] = mapped_column(String(20))
    sample: Mapped[str] = mapped_column(String(250))
    mean_iou: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    ignore_count: Mapped[int] = mapped_column(Integer)

    class_iou: Mapped[List["ClassIoU"]] = relationship(
        back_populates="run",
        cascade="all, delete-orphan",
        passive_deletes=True,
        order_by="ClassIoU.class_id",
    )

    def to_dict(self):
        return {
            "id": self.id,
            "created_at": self.created_at,
            "kind": self.kind,
            "sample": self.sample,
            "mean_iou": self.mean_iou,
            "ignore_count": self.ignore_count,
            "class_iou": [c.to_dict() for c in self.class_iou],
        }

    def __repr__(self):
        return (
            f"<EvalRun id={self.id} kind={self.kind} sample={self.sample} "
            f"mean_iou={self.mean_iou} ignore_count={self.ignore_count}>"
        )

    def __eq__(self, run: Self):
        return (
            self.id == run.id
            and self.kind == run.kind
            and self.sample == run.sample
            and self.mean_iou == run.mean_iou
            and self.ignore_count == run.ignore_count
        )


class EvalRunSchema(BaseModel):
    kind: str
    sample: str
    mean_iou: Optional[float]
    ignore_count: int
