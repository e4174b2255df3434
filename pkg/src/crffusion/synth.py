"""Synthetic depth scenes with degraded multi-scale side outputs.

Ground truth is a random sloped plane with a few rectangular occluders in
front of it. The pseudo-RGB image encodes depth in its red channel (with
pixel noise) and gives every surface its own green/blue tint, so colour
edges coincide with depth discontinuities. Side output ``l`` (0 = coarsest)
is the depth blurred with a width shrinking with ``l`` plus noise shrinking
with ``l``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import read_grid, read_ppm, write_grid, write_ppm

DEPTH_RANGE = (1.0, 5.0)


@dataclass
class Sample:
    image: np.ndarray
    depth: np.ndarray
    sides: list

    def __post_init__(self):
        if self.image.shape[:2] != self.depth.shape:
            raise ValueError("image and depth resolutions differ")
        if np.any(self.depth <= 0):
            raise ValueError("ground-truth depth must be positive")


def default_blur(scales: int) -> list[float]:
    return [0.75 * 2.0 ** (scales - 1 - l) for l in range(scales)]


def default_noise(scales: int) -> list[float]:
    return [0.08 * (scales - l) for l in range(scales)]


def _scene(rng, width: int, height: int):
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    gx, gy = rng.uniform(-1.0, 1.0, 2)
    depth = 3.5 + gx * (cols / width - 0.5) + gy * (rows / height - 0.5)
    label = np.zeros((height, width), dtype=np.int64)
    for k in range(1, rng.integers(2, 4) + 1):
        w = rng.integers(width // 5, width // 2 + 1)
        h = rng.integers(height // 5, height // 2 + 1)
        x0 = rng.integers(0, width - w + 1)
        y0 = rng.integers(0, height - h + 1)
        near = rng.uniform(1.5, 3.0)
        slope = rng.uniform(-0.3, 0.3)
        depth[y0:y0 + h, x0:x0 + w] = near + slope * (cols[y0:y0 + h, x0:x0 + w] - x0) / w
        label[y0:y0 + h, x0:x0 + w] = k
    return np.clip(depth, *DEPTH_RANGE), label


def synthesize_sample(rng, width: int, height: int, blur, noise, image_noise: float = 0.04) -> Sample:
    depth, label = _scene(rng, width, height)
    tints = rng.uniform(0.1, 0.9, (label.max() + 1, 2))
    image = np.empty((height, width, 3))
    lo, hi = DEPTH_RANGE
    image[..., 0] = (depth - lo) / (hi - lo) + rng.normal(0.0, image_noise, depth.shape)
    image[..., 1:] = tints[label] + rng.normal(0.0, image_noise / 2, depth.shape + (2,))
    # quantise like an 8-bit PPM so in-memory and on-disk samples agree
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    sides = []
    for sigma, amp in zip(blur, noise):
        side = gaussian_filter(depth, sigma, mode="nearest") if sigma > 0 else depth.copy()
        if amp > 0:
            side = side + rng.normal(0.0, amp, depth.shape)
        sides.append(side)
    return Sample(image, depth, sides)


def synthesize_dataset(seed: int, count: int, width: int, height: int, scales: int,
                       blur=None, noise=None, image_noise: float = 0.04) -> list[Sample]:
    if width < 8 or height < 8:
        raise ValueError(f"synthetic scenes need at least 8x8 pixels, got {width}x{height}")
    if count < 1 or scales < 1:
        raise ValueError("count and scales must be positive")
    blur = default_blur(scales) if blur is None else list(blur)
    noise = default_noise(scales) if noise is None else list(noise)
    if len(blur) != scales or len(noise) != scales:
        raise ValueError("need one blur width and one noise level per scale")
    rng = np.random.default_rng(seed)
    return [synthesize_sample(rng, width, height, blur, noise, image_noise) for _ in range(count)]


def save_dataset(samples, directory) -> None:
    """Write ``NNNN/{image.ppm, depth.grd, side_1.grd ... side_L.grd}``."""
    directory = Path(directory)
    for i, sample in enumerate(samples):
        sub = directory / f"{i:04d}"
        sub.mkdir(parents=True, exist_ok=True)
        write_ppm(sample.image, sub / "image.ppm")
        write_grid(sample.depth, sub / "depth.grd")
        for l, side in enumerate(sample.sides, start=1):
            write_grid(side, sub / f"side_{l}.grd")


def load_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    subdirs = sorted(p for p in directory.iterdir() if p.is_dir() and p.name.isdigit())
    if not subdirs:
        raise FileNotFoundError(f"no samples in {directory}")
    samples = []
    for sub in subdirs:
        count = len(list(sub.glob("side_*.grd")))
        sides = [read_grid(sub / f"side_{l}.grd") for l in range(1, count + 1)]
        samples.append(Sample(read_ppm(sub / "image.ppm"), read_grid(sub / "depth.grd"), sides))
    return samples
