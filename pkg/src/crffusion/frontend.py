"""A tiny learnable front-end producing one side output per scale.

Scale ``l`` (0 = coarsest) sees the image downsampled by ``2**(L-1-l)``, runs
a 3x3 convolution (3 -> 8 channels), tanh, and a 1x1 projection to one
channel, and is upsampled back to full resolution. All resampling is
align-corners bilinear, written as separable matrices so the backward pass
is a pair of transposes.
"""

from __future__ import annotations

import math

import numpy as np

from .grid import check_image, resample_matrix

HIDDEN = 8
PARAM_NAMES = ("w1", "b1", "w2", "b2")


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, h, w) -> (h*w, C*9) patches of a zero-padded 3x3 neighbourhood."""
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, h, w))
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = padded[:, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, h * w).T


class ToyFrontEnd:
    """Per-scale parameter stacks keyed ``"s{l}.{name}"``."""

    def __init__(self, scales: int, params: dict | None = None, seed: int = 0, depth_offset: float = 0.0):
        self.scales = scales
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for l in range(scales):
                params[f"s{l}.w1"] = rng.normal(0.0, 1.0 / math.sqrt(27), (HIDDEN, 3, 3, 3))
                params[f"s{l}.b1"] = np.zeros(HIDDEN)
                params[f"s{l}.w2"] = rng.normal(0.0, 1.0 / math.sqrt(HIDDEN), HIDDEN)
                params[f"s{l}.b2"] = np.array([depth_offset])
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        expected = {f"s{l}.{n}" for l in range(scales) for n in PARAM_NAMES}
        if set(self.params) != expected:
            raise ValueError(f"front-end parameters do not match {scales} scales")

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ToyFrontEnd":
        return ToyFrontEnd(self.scales, {k: v.copy() for k, v in self.params.items()})

    def _resamplers(self, height: int, width: int, scale: int):
        factor = 2 ** (self.scales - 1 - scale)
        h, w = max(1, -(-height // factor)), max(1, -(-width // factor))
        return (resample_matrix(height, h), resample_matrix(width, w),
                resample_matrix(h, height), resample_matrix(w, width))

    def forward(self, image) -> tuple[list[np.ndarray], list]:
        image = check_image(image)
        height, width = image.shape[:2]
        sides, cache = [], []
        planes = np.moveaxis(image, 2, 0).astype(np.float64)
        for l in range(self.scales):
            p = {n: self.params[f"s{l}.{n}"] for n in PARAM_NAMES}
            down_y, down_x, up_y, up_x = self._resamplers(height, width, l)
            x = down_y @ planes @ down_x.T
            h, w = x.shape[1:]
            cols = _im2col(x)
            act = np.tanh(cols @ p["w1"].reshape(HIDDEN, -1).T + p["b1"])
            coarse = (act @ p["w2"] + p["b2"][0]).reshape(h, w)
            sides.append(up_y @ coarse @ up_x.T)
            cache.append((cols, act, up_y, up_x))
        return sides, cache

    def backward(self, cache, grad_sides) -> dict:
        grads = {}
        for l, ((cols, act, up_y, up_x), g) in enumerate(zip(cache, grad_sides)):
            w2 = self.params[f"s{l}.w2"]
            g_coarse = (up_y.T @ g @ up_x).ravel()
            g_act = g_coarse[:, None] * w2[None, :]
            g_pre = g_act * (1.0 - act * act)
            grads[f"s{l}.w2"] = act.T @ g_coarse
            grads[f"s{l}.b2"] = np.array([g_coarse.sum()])
            grads[f"s{l}.b1"] = g_pre.sum(0)
            grads[f"s{l}.w1"] = (g_pre.T @ cols).reshape(HIDDEN, 3, 3, 3)
        return grads
