"""Cascade and multi-scale CRF fusion as unrolled mean-field networks.

Side outputs are ordered from the coarsest scale (index 0, "inner") to the
finest (index L-1, "outer"). Kernels are indexed as

    0: bilateral (appearance), within scale
    1: spatial (smoothness), within scale
    2: bilateral, across scales      (multi-scale only)
    3: spatial, across scales        (multi-scale only)

The cascade model owns one ``(beta_0, beta_1)`` pair per scale; the
multi-scale model shares one weight per kernel across scales and iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .cmf import (CASCADE_GATES, CROSS, MULTISCALE_GATES, WITHIN, CmfInputs, Kernel,
                  cmf_backward, cmf_forward)
from .gaussfilter import FilterPlan, kernel_matrix
from .grid import check_grid, check_image, extract_features

CASCADE = "cascade"
MULTISCALE = "multiscale"
ORACLE_MAX_SIZE = 4096


class FusionError(ValueError):
    pass


@dataclass
class FusionConfig:
    mode: str = MULTISCALE
    scales: int = 3
    iterations: int | tuple = 5
    order: str = "inner"
    bilateral_xy: float = 4.0
    bilateral_rgb: float = 0.1
    spatial_xy: float = 2.0
    combiner: str = "add"
    filter_method: str = "auto"
    beta: np.ndarray = None

    def __post_init__(self):
        if self.mode not in (CASCADE, MULTISCALE):
            raise FusionError(f"mode must be {CASCADE!r} or {MULTISCALE!r}, got {self.mode!r}")
        if self.order not in ("inner", "outer"):
            raise FusionError(f"order must be 'inner' or 'outer', got {self.order!r}")
        if self.combiner != "add":
            raise FusionError(f"only the 'add' combiner is implemented, got {self.combiner!r}")
        if self.scales < 1:
            raise FusionError("need at least one scale")
        if isinstance(self.iterations, (list, tuple)):
            self.iterations = tuple(int(t) for t in self.iterations)
            if len(self.iterations) != self.scales:
                raise FusionError("need one iteration count per scale")
        if self.beta is None:
            self.beta = np.full(self.beta_shape, 0.1)
        self.beta = np.array(self.beta, dtype=np.float64)
        if self.beta.shape != self.beta_shape:
            raise FusionError(f"beta must have shape {self.beta_shape} for {self.mode}, got {self.beta.shape}")
        if np.any(self.beta < 0):
            raise FusionError("kernel weights must be nonnegative")

    @property
    def beta_shape(self) -> tuple:
        return (self.scales, 2) if self.mode == CASCADE else (4,)

    def iterations_at(self, scale: int) -> int:
        if isinstance(self.iterations, tuple):
            return self.iterations[scale]
        return int(self.iterations)

    def stage_order(self) -> list[int]:
        scales = list(range(self.scales))
        return scales if self.order == "inner" else scales[::-1]


def make_kernels(image, config: FusionConfig) -> list[Kernel]:
    """Build the filter plans for one image (one plan per feature kind)."""
    image = check_image(image)
    bilateral = FilterPlan(extract_features(image, "bilateral", config.bilateral_xy, config.bilateral_rgb),
                           config.filter_method)
    spatial = FilterPlan(extract_features(image, "spatial", config.spatial_xy), config.filter_method)
    kernels = [Kernel(bilateral, WITHIN), Kernel(spatial, WITHIN)]
    if config.mode == MULTISCALE:
        kernels += [Kernel(bilateral, CROSS), Kernel(spatial, CROSS)]
    return kernels


@dataclass
class MeanFieldStep:
    scale: int
    inputs: CmfInputs
    outputs: object


@dataclass
class MeanFieldTrace:
    config: FusionConfig
    steps: list = field(default_factory=list)
    # cascade: per processed stage, (scale, previous-stage estimate or None)
    stages: list = field(default_factory=list)
    shape: tuple = ()

    def mu(self, scale: int) -> list:
        """Iterates of one scale, in order."""
        return [s.outputs.mu for s in self.steps if s.scale == scale]

    def residuals(self, scale: int | None = None) -> np.ndarray:
        """Fixed-point residual ``max |mu^t - mu^{t-1}|`` per iteration.

        For the multi-scale model the maximum runs over all scales of a sweep.
        """
        if self.config.mode == CASCADE:
            if scale is None:
                scale = self.stages[-1][0]
            first = next(s for s in self.steps if s.scale == scale)
            seq = [first.inputs.mu_prev_iter] + self.mu(scale)
            return np.array([np.abs(b - a).max() for a, b in zip(seq, seq[1:])])
        per_scale = []
        for l in range(self.config.scales):
            first = next(s for s in self.steps if s.scale == l)
            seq = [first.inputs.mu_prev_iter] + self.mu(l)
            per_scale.append([np.abs(b - a).max() for a, b in zip(seq, seq[1:])])
        return np.max(np.array(per_scale), axis=0)


@dataclass
class FusionResult:
    prediction: np.ndarray
    trace: MeanFieldTrace


def _check_sides(side_outputs, config: FusionConfig) -> list[np.ndarray]:
    if len(side_outputs) == 0:
        raise FusionError("no side outputs given")
    if len(side_outputs) != config.scales:
        raise FusionError(f"config expects {config.scales} side outputs, got {len(side_outputs)}")
    sides = [check_grid(np.asarray(s, dtype=np.float64), f"side output {i + 1}") for i, s in enumerate(side_outputs)]
    if any(s.shape != sides[0].shape for s in sides):
        raise FusionError("side outputs must share one resolution (resample them first)")
    return sides


def fuse_cascade(side_outputs, image, config: FusionConfig, kernels=None) -> FusionResult:
    if config.mode != CASCADE:
        raise FusionError("fuse_cascade needs a cascade config")
    sides = _check_sides(side_outputs, config)
    if kernels is None:
        kernels = make_kernels(image, config)
    trace = MeanFieldTrace(config, shape=sides[0].shape)
    previous = None
    for scale in config.stage_order():
        obs = sides[scale] if previous is None else sides[scale] + np.maximum(previous, 0.0)
        trace.stages.append((scale, previous))
        mu = obs
        for _ in range(config.iterations_at(scale)):
            inputs = CmfInputs(obs, mu, kernels[:2], config.beta[scale])
            out = cmf_forward(inputs, CASCADE_GATES)
            trace.steps.append(MeanFieldStep(scale, inputs, out))
            mu = out.mu
        previous = mu
    return FusionResult(previous, trace)


def fuse_multiscale(side_outputs, image, config: FusionConfig, kernels=None) -> FusionResult:
    if config.mode != MULTISCALE:
        raise FusionError("fuse_multiscale needs a multi-scale config")
    sides = _check_sides(side_outputs, config)
    if kernels is None:
        kernels = make_kernels(image, config)
    trace = MeanFieldTrace(config, shape=sides[0].shape)
    order = config.stage_order()
    mu = {l: sides[l] for l in order}
    for _ in range(config.iterations_at(0)):
        previous = None
        for scale in order:
            inputs = CmfInputs(sides[scale], mu[scale], kernels, config.beta, previous)
            out = cmf_forward(inputs, MULTISCALE_GATES)
            trace.steps.append(MeanFieldStep(scale, inputs, out))
            mu[scale] = out.mu
            previous = out.mu
    return FusionResult(mu[order[-1]], trace)


def fuse(side_outputs, image, config: FusionConfig, kernels=None) -> FusionResult:
    if config.mode == CASCADE:
        return fuse_cascade(side_outputs, image, config, kernels)
    return fuse_multiscale(side_outputs, image, config, kernels)


def fusion_backward(trace: MeanFieldTrace, grad_prediction) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate through the unrolled trace.

    Returns the gradient for every side output and for ``config.beta``.
    """
    config = trace.config
    grad_prediction = np.asarray(grad_prediction, dtype=np.float64)
    if grad_prediction.shape != trace.shape:
        raise FusionError(f"gradient shape {grad_prediction.shape} does not match trace {trace.shape}")
    zero = np.zeros(trace.shape)
    grad_sides = [zero.copy() for _ in range(config.scales)]
    grad_beta = np.zeros_like(config.beta)

    if config.mode == CASCADE:
        grad_final = grad_prediction
        steps = list(trace.steps)
        for scale, previous in reversed(trace.stages):
            grad_obs = zero.copy()
            grad_mu = grad_final
            for _ in range(config.iterations_at(scale)):
                step = steps.pop()
                if step.scale != scale:
                    raise FusionError("trace does not match its configuration")
                grads = cmf_backward(step.outputs, step.inputs, grad_mu)
                grad_obs += grads.unary
                grad_mu = grads.mu_prev_iter
                grad_beta[scale] += grads.beta
            grad_obs += grad_mu  # mu^0 = observation
            grad_sides[scale] += grad_obs
            if previous is not None:
                grad_final = grad_obs * (previous > 0)
        return grad_sides, grad_beta

    order = config.stage_order()
    grad_mu = {l: zero.copy() for l in order}
    grad_mu[order[-1]] = grad_prediction.copy()
    for step in reversed(trace.steps):
        grads = cmf_backward(step.outputs, step.inputs, grad_mu[step.scale])
        grad_sides[step.scale] += grads.unary
        grad_mu[step.scale] = grads.mu_prev_iter
        grad_beta += grads.beta
        if grads.mu_prev_scale is not None:
            before = order[order.index(step.scale) - 1]
            grad_mu[before] = grad_mu[before] + grads.mu_prev_scale
    for l in order:
        grad_sides[l] += grad_mu[l]  # mu^0 = side output
    return grad_sides, grad_beta


# ---------------------------------------------------------------- oracle


def _stage_system(within, cross, beta_within, beta_cross, has_previous):
    """Matrix and cross-coupling of one scale's stationarity equations.

    With pairs counted in both orders the quadratic energy of one scale is
    ``sum_i (x_i - u_i)^2 + sum_{i != j} b K_ij (x_i - x_j)^2
    + sum_{i, j} 2 b' K'_ij (x_i - p_j)^2``; setting its gradient to zero gives
    ``A x = u + C p``.
    """
    n = within[0].shape[0]
    a = np.eye(n)
    for b, k in zip(beta_within, within):
        off = k - np.diag(np.diag(k))
        a += 2.0 * b * (np.diag(off.sum(1)) - off)
    c = np.zeros((n, n))
    if has_previous:
        for b, k in zip(beta_cross, cross):
            a += 2.0 * b * np.diag(k.sum(1))
            c += 2.0 * b * k
    return a, c


def _dense_kernels(image, config: FusionConfig):
    bilateral = kernel_matrix(extract_features(image, "bilateral", config.bilateral_xy, config.bilateral_rgb))
    spatial = kernel_matrix(extract_features(image, "spatial", config.spatial_xy))
    return bilateral, spatial


def exact_map_oracle(side_outputs, image, config: FusionConfig) -> list[np.ndarray]:
    """Exact minimiser of the quadratic CRF energies by dense linear solves.

    Multi-scale: scale by scale in processing order, each scale conditioned
    on the solved estimate of the scale before it. Cascade: each stage's
    observation is the side output plus the rectified solution of the
    previous stage. Returns one grid per scale (index = scale).
    """
    sides = _check_sides(side_outputs, config)
    shape = sides[0].shape
    n = sides[0].size
    if n * config.scales > ORACLE_MAX_SIZE:
        raise FusionError(f"oracle limited to N*L <= {ORACLE_MAX_SIZE}, got {n * config.scales}")
    bilateral, spatial = _dense_kernels(check_image(image), config)
    solution = [None] * config.scales
    previous = None
    for scale in config.stage_order():
        u = sides[scale].ravel()
        if config.mode == CASCADE:
            a, _ = _stage_system((bilateral, spatial), (), config.beta[scale], (), False)
            rhs = u if previous is None else u + np.maximum(previous, 0.0)
        else:
            b = config.beta
            a, c = _stage_system((bilateral, spatial), (bilateral, spatial), b[:2], b[2:], previous is not None)
            rhs = u if previous is None else u + c @ previous
        try:
            x = scipy.linalg.solve(a, rhs, assume_a="pos")
        except np.linalg.LinAlgError as exc:
            raise FusionError("assembled system is not positive definite (kernel bug?)") from exc
        solution[scale] = x.reshape(shape)
        previous = x
    return solution


def stage_energy_gradient(x, unary, previous, image, config: FusionConfig, scale: int) -> np.ndarray:
    """Gradient of one scale's quadratic energy, evaluated term by term.

    Independent of :func:`exact_map_oracle` (no system assembly), for
    checking its stationarity.
    """
    bilateral, spatial = _dense_kernels(check_image(image), config)
    x = np.ravel(x)
    grad = 2.0 * (x - np.ravel(unary))
    diff = x[:, None] - x[None, :]
    if config.mode == CASCADE:
        weights = config.beta[scale]
        cross_weights = ()
    else:
        weights = config.beta[:2]
        cross_weights = config.beta[2:] if previous is not None else ()
    for b, k in zip(weights, (bilateral, spatial)):
        # d/dx_i of sum_{i != j} b K_ij (x_i - x_j)^2 (each pair in both orders)
        grad += 4.0 * b * (k * diff).sum(1)
    for b, k in zip(cross_weights, (bilateral, spatial)):
        grad += 4.0 * b * (k * (x[:, None] - np.ravel(previous)[None, :])).sum(1)
    return grad
