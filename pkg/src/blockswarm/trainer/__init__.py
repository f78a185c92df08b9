"""Minimal numpy training engine for the networks described by ``netspec``."""

from .loop import EpochStats, error_rate, train_epochs, train_one_epoch, write_curves
from .model import TrainingDivergence, backward, forward, predict
from .optim import Adam, AdamState, NesterovSGD, SgdSchedule, adam_step, sgd_nesterov_step
from .tensor import (
    Tensor,
    allocate_parameters,
    copy_store,
    initialize_parameters,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    trainable_elements,
    write_checkpoint,
)

__all__ = [
    "Adam", "AdamState", "EpochStats", "NesterovSGD", "SgdSchedule", "Tensor",
    "TrainingDivergence", "adam_step", "allocate_parameters", "backward", "copy_store",
    "error_rate", "forward", "initialize_parameters", "load_checkpoint", "predict",
    "read_checkpoint", "save_checkpoint", "sgd_nesterov_step", "train_epochs",
    "train_one_epoch", "trainable_elements", "write_checkpoint", "write_curves",
]
