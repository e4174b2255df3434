"""Two-phase training: side-loss pretraining of the front-end, then end-to-end
fine-tuning through the CRF fusion. Losses are raw sums of squared errors."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .frontend import ToyFrontEnd
from .fusion import FusionConfig, fuse, fusion_backward, make_kernels

log = logging.getLogger(__name__)


class TrainingFailure(RuntimeError):
    def __init__(self, phase: str, epoch: int):
        super().__init__(f"{phase} diverged (non-finite loss) in epoch {epoch}")
        self.phase = phase
        self.epoch = epoch


def pretrain_loss(sides, depth) -> tuple[float, list[np.ndarray]]:
    """Sum over scales and pixels of squared side-output error, with gradients."""
    depth = np.asarray(depth, dtype=np.float64)
    loss, grads = 0.0, []
    for side in sides:
        if np.shape(side) != depth.shape:
            raise ValueError(f"side output shape {np.shape(side)} differs from ground truth {depth.shape}")
        diff = side - depth
        loss += float(np.sum(diff * diff))
        grads.append(2.0 * diff)
    return loss, grads


def finetune_loss(prediction, depth) -> tuple[float, np.ndarray]:
    loss, (grad,) = pretrain_loss([prediction], depth)
    return loss, grad


@dataclass
class SgdConfig:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be positive and epochs nonnegative")


class Sgd:
    """SGD with momentum and L2 weight decay (``v = m v + g + wd p; p -= lr v``)."""

    def __init__(self, learning_rate: float, momentum: float = 0.9, weight_decay: float = 0.0005):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}

    def step(self, params: dict, grads: dict, lr_scale: dict | None = None) -> None:
        if self.learning_rate == 0.0:
            return
        for name, grad in grads.items():
            p = params[name]
            g = grad + self.weight_decay * p if self.weight_decay else grad
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
            else:
                v = g
            scale = 1.0 if lr_scale is None else lr_scale.get(name, 1.0)
            params[name] = p - (self.learning_rate * scale) * v


def _batches(count: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def _accumulate(total: dict, grads: dict) -> None:
    for k, g in grads.items():
        total[k] = total[k] + g if k in total else g.copy()


def _write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "phase", "mean_loss", "learning_rate"])
        writer.writerows(rows)


def train_pretrain(samples, frontend: ToyFrontEnd, sgd: SgdConfig, log_path=None):
    """Fit the front-end to the ground truth through all L side losses.

    Returns the trained copy and the per-epoch mean loss.
    """
    if not samples:
        raise ValueError("empty dataset")
    frontend = frontend.copy()
    opt = Sgd(sgd.learning_rate, sgd.momentum, sgd.weight_decay)
    rng = np.random.default_rng(sgd.seed)
    curve, rows = [], []
    for epoch in range(1, sgd.epochs + 1):
        losses = []
        for batch in _batches(len(samples), sgd.batch_size, rng):
            total: dict = {}
            for i in batch:
                sides, cache = frontend.forward(samples[i].image)
                loss, grad_sides = pretrain_loss(sides, samples[i].depth)
                losses.append(loss)
                _accumulate(total, frontend.backward(cache, grad_sides))
            opt.step(frontend.params, total)
        mean = float(np.mean(losses))
        if not np.isfinite(mean):
            raise TrainingFailure("pretrain", epoch)
        curve.append(mean)
        rows.append([epoch, "pretrain", repr(mean), repr(sgd.learning_rate)])
        log.info("pretrain epoch %d loss %.6g", epoch, mean)
    if log_path is not None:
        _write_log(log_path, rows)
    return frontend, curve


def finetune_gradients(sample, frontend: ToyFrontEnd, config: FusionConfig, kernels=None):
    """Loss and gradients of the fused square loss for one sample.

    Gradients are keyed like the front-end parameters plus ``"beta"``.
    """
    sides, cache = frontend.forward(sample.image)
    result = fuse(sides, sample.image, config, kernels)
    loss, grad_pred = finetune_loss(result.prediction, sample.depth)
    grad_sides, grad_beta = fusion_backward(result.trace, grad_pred)
    grads = frontend.backward(cache, grad_sides)
    grads["beta"] = grad_beta
    return loss, grads


def train_finetune(samples, frontend: ToyFrontEnd, config: FusionConfig, sgd: SgdConfig,
                   freeze_frontend: bool = False, beta_lr_scale: float = 1.0, log_path=None):
    """Jointly train the front-end and the kernel weights through the fusion.

    Kernel weights are projected onto ``beta >= 0`` after every step.
    Returns trained copies of the front-end and config, and the loss curve.
    """
    if not samples:
        raise ValueError("empty dataset")
    frontend = frontend.copy()
    config = FusionConfig(**{**config.__dict__, "beta": config.beta.copy()})
    kernels = [make_kernels(s.image, config) for s in samples]
    opt = Sgd(sgd.learning_rate, sgd.momentum, sgd.weight_decay)
    rng = np.random.default_rng(sgd.seed)
    curve, rows = [], []
    for epoch in range(1, sgd.epochs + 1):
        losses = []
        for batch in _batches(len(samples), sgd.batch_size, rng):
            total: dict = {}
            for i in batch:
                loss, grads = finetune_gradients(samples[i], frontend, config, kernels[i])
                losses.append(loss)
                if freeze_frontend:
                    grads = {"beta": grads["beta"]}
                _accumulate(total, grads)
            params = dict(frontend.params, beta=config.beta)
            opt.step(params, total, {"beta": beta_lr_scale})
            config.beta = np.maximum(params.pop("beta"), 0.0)
            frontend.params = params
        mean = float(np.mean(losses))
        if not np.isfinite(mean):
            raise TrainingFailure("finetune", epoch)
        curve.append(mean)
        rows.append([epoch, "finetune", repr(mean), repr(sgd.learning_rate)])
        log.info("finetune epoch %d loss %.6g beta %s", epoch, mean, config.beta.ravel())
    if log_path is not None:
        _write_log(log_path, rows)
    return frontend, config, curve
