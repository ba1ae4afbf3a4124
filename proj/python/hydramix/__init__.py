"""Semi-supervised multi-task cell-patch classification."""

from ._core import (
    ArgumentError,
    ConfigError,
    IoError,
    NumericError,
    Rng,
    cross_entropy,
    dataset_summary,
    evaluate_checkpoint,
    generate_dataset,
    joint_loss,
    make_split,
    mixup,
    reverse_cross_entropy,
    sample_gamma,
    sce,
    sharpen,
    train_run,
)

__all__ = [
    "ArgumentError",
    "ConfigError",
    "IoError",
    "NumericError",
    "Rng",
    "cross_entropy",
    "dataset_summary",
    "evaluate_checkpoint",
    "generate_dataset",
    "joint_loss",
    "make_split",
    "mixup",
    "reverse_cross_entropy",
    "sample_gamma",
    "sce",
    "sharpen",
    "train_run",
]
