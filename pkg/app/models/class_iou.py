from typing import TYPE_CHECKING

from typing_extensions import Self

from pydantic import BaseModel
from sqlalchemy import Float, ForeignKey, Identity, Integer, String
from sqlalchemy.orm import Mapped, mapped_column, relationship

from app.models import Base

if TYPE_CHECKING:
    from app.models import EvalRun


class ClassIoU(Base):
    __tablename__ = "class_iou"

    id: Mapped[int] = mapped_column(
        Integer, Identity(start=1, increment=1), primary_key=True
    )
    run_id: Mapped[int] = mapped_column(ForeignKey("eval_run.id", ondelete="CASCADE"))
    class_id: Mapped[int] = mapped_column(Integer)
    name: Mapped[str] = mapped_column(String(50))
    iou: Mapped[float] = mapped_column(Float)

    run: Mapped["EvalRun"] = relationship(back_populates="class_iou")

    def to_dict(self):
        return {
            "class_id": self.class_id,
            "name": self.name,
            "iou": self.iou,
        }

    def __repr__(self):
        return f"<ClassIoU run_id={self.run_id} class_id={self.class_id} name={self.name} iou={self.iou}>"

    def __eq__(self, class_iou: Self):
        return (
            self.run_id == class_iou.run_id
            and self.class_id == class_iou.class_id
            and self.name == class_iou.name
            and self.iou == class_iou.iou
        )


class ClassIoUSchema(BaseModel):
    class_id: int
    name: str
    iou: float
