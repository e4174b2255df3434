"""The continuous mean-field block: one update of one scale and its backward pass.

With kernel sums ``W_m x = sum_{j != i} K_m^{ij} x_j`` for the within-scale
kernels and ``C_m x = sum_j K_m^{ij} x_j`` for the cross-scale ones::

    n     = sum_within beta_m W_m 1 + sum_cross beta_m C_m 1
    gamma = 2 (1 + 2 n)
    mu    = (2 / gamma) (u + 2 sum_within beta_m W_m mu_prev_iter
                           + 2 sum_cross beta_m C_m mu_prev_scale)

``u`` is the side output (multi-scale gates) or the cascade observation.
Cross-scale terms exist only with multi-scale gates and a previous scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussfilter import FilterPlan

WITHIN = "within"
CROSS = "cross"


class ContractError(RuntimeError):
    """Raised when a backward pass is fed inputs that differ from its forward pass."""


@dataclass(frozen=True)
class GateConfig:
    g1: bool
    g2: bool

    def __post_init__(self):
        if self.g1 != self.g2:
            raise ValueError("mixed gate settings are not supported (g1 must equal g2)")

    @property
    def multiscale(self) -> bool:
        return self.g1


MULTISCALE_GATES = GateConfig(True, True)
CASCADE_GATES = GateConfig(False, False)


@dataclass(frozen=True)
class Kernel:
    """One Gaussian kernel of the bank; ``plan`` is bound to one image."""

    plan: FilterPlan
    role: str

    def __post_init__(self):
        if self.role not in (WITHIN, CROSS):
            raise ValueError(f"kernel role must be {WITHIN!r} or {CROSS!r}, got {self.role!r}")

    @property
    def exclude_self(self) -> bool:
        return self.role == WITHIN


@dataclass
class CmfInputs:
    unary: np.ndarray
    mu_prev_iter: np.ndarray
    kernels: list
    beta: np.ndarray
    mu_prev_scale: np.ndarray | None = None


@dataclass
class CmfOutputs:
    mu: np.ndarray
    gamma: np.ndarray
    gates: GateConfig
    # per-kernel filtered previous estimate and row sums, for the backward pass
    filtered: list = field(repr=False)
    row_sums: list = field(repr=False)
    snapshot: tuple = field(repr=False)


@dataclass
class CmfGrads:
    unary: np.ndarray
    mu_prev_iter: np.ndarray
    mu_prev_scale: np.ndarray | None
    beta: np.ndarray


def _active(inputs: CmfInputs, gates: GateConfig) -> list[int]:
    """Indices of kernels taking part in this update."""
    roles = [k.role for k in inputs.kernels]
    if not gates.multiscale and CROSS in roles:
        raise ValueError("cascade gates accept within-scale kernels only")
    if inputs.mu_prev_scale is not None and not gates.multiscale:
        raise ValueError("cascade gates take no previous-scale estimate; fold it into the observation")
    if inputs.mu_prev_scale is None:
        return [m for m, r in enumerate(roles) if r == WITHIN]
    return list(range(len(roles)))


def _snapshot(inputs: CmfInputs) -> tuple:
    prev_scale = None if inputs.mu_prev_scale is None else inputs.mu_prev_scale.copy()
    return (inputs.unary.copy(), inputs.mu_prev_iter.copy(), prev_scale, np.array(inputs.beta, dtype=np.float64))


def cmf_forward(inputs: CmfInputs, gates: GateConfig) -> CmfOutputs:
    shape = np.shape(inputs.unary)
    beta = np.asarray(inputs.beta, dtype=np.float64)
    if beta.shape != (len(inputs.kernels),):
        raise ValueError(f"need one beta per kernel, got {beta.shape} for {len(inputs.kernels)} kernels")
    if np.any(beta < 0):
        raise ValueError("kernel weights must be nonnegative")
    if np.shape(inputs.mu_prev_iter) != shape:
        raise ValueError("mu_prev_iter shape differs from the unary input")
    if inputs.mu_prev_scale is not None and np.shape(inputs.mu_prev_scale) != shape:
        raise ValueError("mu_prev_scale shape differs from the unary input")
    active = _active(inputs, gates)

    u = np.asarray(inputs.unary, dtype=np.float64).ravel()
    mass = np.zeros_like(u)
    message = np.zeros_like(u)
    filtered: list = [None] * len(inputs.kernels)
    row_sums: list = [None] * len(inputs.kernels)
    for m in active:
        kernel = inputs.kernels[m]
        source = inputs.mu_prev_iter if kernel.role == WITHIN else inputs.mu_prev_scale
        row_sums[m] = kernel.plan.row_sums(kernel.exclude_self)
        filtered[m] = kernel.plan.apply(np.ravel(source), kernel.exclude_self)
        mass += beta[m] * row_sums[m]
        message += beta[m] * filtered[m]
    gamma = 2.0 * (1.0 + 2.0 * mass)
    mu = (2.0 / gamma) * (u + 2.0 * message)
    return CmfOutputs(mu.reshape(shape), gamma.reshape(shape), gates, filtered, row_sums, _snapshot(inputs))


def cmf_backward(outputs: CmfOutputs, inputs: CmfInputs, grad_mu) -> CmfGrads:
    """Exact vector-Jacobian product of :func:`cmf_forward`."""
    for old, new in zip(outputs.snapshot, _snapshot(inputs)):
        if (old is None) != (new is None) or (old is not None and not np.array_equal(old, new)):
            raise ContractError("inputs changed since the forward pass")
    shape = np.shape(inputs.unary)
    beta = np.asarray(inputs.beta, dtype=np.float64)
    g = np.asarray(grad_mu, dtype=np.float64).ravel()
    gamma = outputs.gamma.ravel()
    mu = outputs.mu.ravel()

    # mu = num / (1 + 2 n) with 1 + 2 n = gamma / 2
    half_gamma = 0.5 * gamma
    g_num = g / half_gamma
    g_mass = -2.0 * g * mu / half_gamma

    g_prev_iter = np.zeros_like(g)
    g_prev_scale = None if inputs.mu_prev_scale is None else np.zeros_like(g)
    g_beta = np.zeros_like(beta)
    for m in _active(inputs, outputs.gates):
        kernel = inputs.kernels[m]
        back = 2.0 * beta[m] * kernel.plan.adjoint(g_num, kernel.exclude_self)
        if kernel.role == WITHIN:
            g_prev_iter += back
        else:
            g_prev_scale += back
        g_beta[m] = 2.0 * g_num @ outputs.filtered[m] + g_mass @ outputs.row_sums[m]

    return CmfGrads(
        unary=g_num.reshape(shape),
        mu_prev_iter=g_prev_iter.reshape(shape),
        mu_prev_scale=None if g_prev_scale is None else g_prev_scale.reshape(shape),
        beta=g_beta,
    )
