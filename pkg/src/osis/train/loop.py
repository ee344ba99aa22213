"""Batch-size-1 training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..model import ModelConfig, NetworkParams, backward, forward, init_params
from ..raster import GridGeometry
from ..scene import Scene
from .losses import LossConfig, SceneTargets, prepare_scene, total_loss
from .optim import AdamState, TrainingError, adam_step, step_decay

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "det", "proto", "disc", "sem", "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 4e-3
    decay_every: int = 5
    decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0  # linear ramp of the learning rate over the first steps
    mode: str = "osis"

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.decay_every < 1 or self.warmup_steps < 0:
            raise ValueError(f"invalid training config: {self}")
        if self.mode not in ("osis", "semantic"):
            raise ValueError(f"unknown training mode {self.mode!r}")


def loss_and_grads(params: NetworkParams, st: SceneTargets, loss_cfg: LossConfig, mode: str = "osis"):
    out, cache = forward(st.inputs, params)
    terms, cot = total_loss(out, st, loss_cfg, mode)
    return terms, backward(cot, cache, params)


def train(scenes: Sequence[Scene], model_cfg: ModelConfig, geom: GridGeometry, loss_cfg: LossConfig,
          train_cfg: TrainConfig, seed: int, init: NetworkParams | None = None):
    """Train from ``init`` (or a fresh seeded init). Returns ``(params, log_rows)``."""
    if not scenes:
        raise ValueError("training needs at least one scene")
    params = init.copy() if init is not None else init_params(model_cfg, seed)
    out_geom = model_cfg.output_geometry(geom)
    prepared = [prepare_scene(s, geom, out_geom, loss_cfg, model_cfg.frames) for s in scenes]
    state = AdamState.zeros_like(params.arrays)
    rows = []
    step = 0
    for epoch in range(train_cfg.epochs):
        epoch_lr = step_decay(train_cfg.lr, epoch, train_cfg.decay_every, train_cfg.decay)
        order = np.random.default_rng([seed, epoch]).permutation(len(prepared))
        for i in order:
            terms, grads = loss_and_grads(params, prepared[i], loss_cfg, train_cfg.mode)
            if not np.isfinite(terms["total"]):
                raise TrainingError(f"non-finite loss at step {step + 1} (scene seed "
                                    f"{prepared[i].scene.seed}): {terms}")
            lr = epoch_lr * min(1.0, (step + 1) / train_cfg.warmup_steps) if train_cfg.warmup_steps else epoch_lr
            arrays, state = adam_step(params.arrays, grads, state, lr, train_cfg.beta1, train_cfg.beta2,
                                      train_cfg.eps)
            params = NetworkParams(params.config, arrays)
            step += 1
            rows.append({"step": step, "epoch": epoch, **{k: terms[k] for k in ("det", "proto", "disc", "sem",
                                                                                  "total")}, "lr": lr})
        recent = rows[-len(prepared):]
        log.info("epoch %d  mean total loss %.4f", epoch, np.mean([r["total"] for r in recent]))
    return params, rows


def write_log(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["step"], r["epoch"]] + [f"{r[k]:.10g}" for k in LOG_FIELDS[2:]])
