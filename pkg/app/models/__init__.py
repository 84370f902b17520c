from app.models.base import *
from app.models.eval_run import *
from app.models.class_iou import *
from app.models.benchmark_row import *
