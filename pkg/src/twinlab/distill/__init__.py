"""Teacher-student robustness distillation on a 1-D classification task."""

from .data import Dataset, Example1D, GeneratorConfig, generate_dataset, nearest_template, templates
from .losses import cross_entropy, loss_weights, rsa_loss, similarity
from .net import Activation, Conv1D, Dense, Flatten, MicroNet, ShapeError, conv_net
from .study import StudyConfig, StudyReport, StudyRow, run_distillation_study, train_teacher
from .train import (
    DistillConfig,
    History,
    LossSpec,
    PgdConfig,
    Schedule,
    evaluate,
    gradients,
    pgd_attack,
    train,
)

__all__ = [
    "Activation", "Conv1D", "Dataset", "Dense", "DistillConfig", "Example1D", "Flatten",
    "GeneratorConfig", "History", "LossSpec", "MicroNet", "PgdConfig", "Schedule", "ShapeError",
    "StudyConfig", "StudyReport", "StudyRow", "conv_net", "cross_entropy", "evaluate",
    "generate_dataset", "gradients", "loss_weights", "nearest_template", "pgd_attack",
    "rsa_loss", "run_distillation_study", "similarity", "templates", "train", "train_teacher",
]
