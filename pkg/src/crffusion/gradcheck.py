"""Finite-difference verification of the end-to-end training gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frontend import ToyFrontEnd
from .fusion import FusionConfig, fuse, fusion_backward, make_kernels
from .synth import synthesize_dataset
from .train import finetune_gradients, finetune_loss

DEFAULT_STEP = 1e-6
TOLERANCE = 1e-4


def central_difference(func, x: np.ndarray, step: float = DEFAULT_STEP, indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``func`` at ``x`` (``x`` is restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        plus = func()
        flat[i] = orig - step
        minus = func()
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor: float) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)  # group -> max relative error
    counts: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def gradcheck_instance(seed: int, size: int, scales: int, mode: str):
    """A random sample, front-end and fusion config for gradient checking."""
    rng = np.random.default_rng(seed)
    (sample,) = synthesize_dataset(seed, 1, size, size, scales)
    frontend = ToyFrontEnd(scales, seed=seed, depth_offset=3.0)
    shape = (scales, 2) if mode == "cascade" else (4,)
    config = FusionConfig(mode=mode, scales=scales, iterations=5, filter_method="dense",
                          beta=rng.uniform(0.05, 0.5, shape))
    return sample, frontend, config


def run_gradcheck(seed: int, size: int, scales: int, mode: str, step: float = DEFAULT_STEP,
                  floor_fraction: float = 1e-6) -> GradcheckReport:
    """Compare analytic and central-difference gradients of the fused loss.

    Checks every kernel weight, every entry of every side output fed to the
    fusion, and every front-end parameter. Denominators are floored at
    ``floor_fraction`` times the largest gradient magnitude of the group so
    that near-zero entries do not report spurious relative errors.
    """
    sample, frontend, config = gradcheck_instance(seed, size, scales, mode)
    kernels = make_kernels(sample.image, config)
    _, grads = finetune_gradients(sample, frontend, config, kernels)
    report = GradcheckReport()

    def record(group, analytic, numeric):
        floor = floor_fraction * max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-300)
        report.errors[group] = float(relative_error(analytic, numeric, floor).max())
        report.counts[group] = int(np.size(analytic))

    def fused_loss():
        sides, _ = frontend.forward(sample.image)
        return finetune_loss(fuse(sides, sample.image, config, kernels).prediction, sample.depth)[0]

    record("beta", grads["beta"], central_difference(fused_loss, config.beta, step))

    sides, _ = frontend.forward(sample.image)
    result = fuse(sides, sample.image, config, kernels)
    grad_pred = finetune_loss(result.prediction, sample.depth)[1]
    grad_sides, _ = fusion_backward(result.trace, grad_pred)
    for l, side in enumerate(sides):
        def side_loss():
            return finetune_loss(fuse(sides, sample.image, config, kernels).prediction, sample.depth)[0]
        record(f"side_{l + 1}", grad_sides[l], central_difference(side_loss, side, step))

    for name, value in frontend.params.items():
        record(name, grads[name], central_difference(fused_loss, value, step))
    return report
