from .checkpoint import Checkpoint, CheckpointError, checkpoint_from_net, config_hash, net_from_checkpoint
from .optim import Adam, AdamState, NonFiniteGradient, adam_step
from .probe import ProbeResult, confusion_matrix, linear_probe, miou_from_confusion, probe_hash, score
from .train import (
    ConfigError,
    StepLogger,
    TrainConfig,
    evaluate_stage1,
    load_teacher,
    mimicry_cosine,
    parse_log_line,
    teacher_features,
    train_stage1,
    train_stage2,
)

__all__ = [
    "Adam",
    "AdamState",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "NonFiniteGradient",
    "ProbeResult",
    "StepLogger",
    "TrainConfig",
    "adam_step",
    "checkpoint_from_net",
    "config_hash",
    "confusion_matrix",
    "evaluate_stage1",
    "linear_probe",
    "load_teacher",
    "miou_from_confusion",
    "mimicry_cosine",
    "net_from_checkpoint",
    "parse_log_line",
    "probe_hash",
    "score",
    "teacher_features",
    "train_stage1",
    "train_stage2",
]
