"""Losses, Adam and the training loop."""

from .loop import TrainConfig, loss_and_grads, train, write_log
from .losses import (DetectionTargets, LossConfig, PrototypeTargets, SceneTargets, association_scores,
                     detection_loss, detection_targets, discriminative_loss, embedding_loss, prepare_scene,
                     prototype_ce, prototype_targets, semantic_ce, total_loss)
from .optim import AdamState, TrainingError, adam_step, step_decay

__all__ = [
    "AdamState", "DetectionTargets", "LossConfig", "PrototypeTargets", "SceneTargets", "TrainConfig",
    "TrainingError", "adam_step", "association_scores", "detection_loss", "detection_targets",
    "discriminative_loss", "embedding_loss", "loss_and_grads", "prepare_scene", "prototype_ce",
    "prototype_targets", "semantic_ce", "step_decay", "total_loss", "train", "write_log",
]
