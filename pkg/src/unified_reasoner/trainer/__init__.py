"""Multi-task training, schedules and evaluation."""

from .evaluate import (
    AccuracyResult,
    evaluate_acre,
    evaluate_cater,
    evaluate_counts,
    evaluate_detection,
    evaluate_snitch,
    evaluate_task,
)
from .loop import (
    MetricsLog,
    TrainConfig,
    TrainError,
    TrainResult,
    load_checkpoint,
    masked_seq_loss,
    save_checkpoint,
    train,
)
from .metrics import APResult, ap50, average_precision, iou, match_assignments, match_frame
from .schedule import Schedule, ScheduleError, build_schedule
from .tasks import REGISTRY, TaskSpec, make_task

__all__ = [
    "APResult", "AccuracyResult", "MetricsLog", "REGISTRY", "Schedule", "ScheduleError", "TaskSpec",
    "TrainConfig", "TrainError", "TrainResult", "ap50", "average_precision", "build_schedule",
    "evaluate_acre", "evaluate_cater", "evaluate_counts", "evaluate_detection", "evaluate_snitch",
    "evaluate_task", "iou", "load_checkpoint", "make_task", "masked_seq_loss", "match_assignments", "match_frame",
    "save_checkpoint", "train",
]
