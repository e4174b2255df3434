"""Grids, RGB images, bilinear resampling, kernel features and file I/O.

A grid is a 2-D float array of shape ``(height, width)`` stored row-major; an
RGB image is a float array of shape ``(height, width, 3)`` with values in
``[0, 1]``. Plain numpy arrays are used for both; the helpers here validate
them at module boundaries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GRD_MAGIC = b"GRD1"
MAX_SIDE = 2**16

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class GrdError(ValueError):
    """Base class for GRD decoding failures."""


class GrdMagicError(GrdError):
    pass


class GrdDimensionError(GrdError):
    pass


class GrdTruncatedError(GrdError):
    pass


class UnsupportedFormatError(ValueError):
    pass


def check_grid(grid, name="grid"):
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"{name} must be 2-D (height, width), got shape {grid.shape}")
    if grid.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(grid)):
        raise ValueError(f"{name} contains non-finite values")
    return grid


def check_image(image, name="image"):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{name} must have shape (height, width, 3), got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError(f"{name} contains non-finite values")
    return image


# ---------------------------------------------------------------- GRD files


def encode_grd(array) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        array = array.astype(np.float64)
    if array.ndim not in (2, 3):
        raise ValueError(f"GRD holds rank 2 or 3 arrays, got rank {array.ndim}")
    if any(n > MAX_SIDE for n in array.shape):
        raise GrdDimensionError(f"dimension exceeds {MAX_SIDE}: {array.shape}")
    code = _CODES[array.dtype]
    header = GRD_MAGIC + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape) + struct.pack("<B", code)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return header + payload


def decode_grd(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one GRD record starting at ``offset``.

    Returns the array and the offset just past its payload, so several
    records can be read back to back from one buffer.
    """
    if len(buf) - offset < 8:
        raise GrdTruncatedError("file shorter than GRD header")
    if buf[offset:offset + 4] != GRD_MAGIC:
        raise GrdMagicError(f"bad magic {bytes(buf[offset:offset + 4])!r}, expected {GRD_MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    if rank not in (2, 3):
        raise GrdDimensionError(f"rank must be 2 or 3, got {rank}")
    pos = offset + 8
    if len(buf) - pos < 4 * rank + 1:
        raise GrdTruncatedError("file ends inside GRD header")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if any(n > MAX_SIDE for n in dims):
        raise GrdDimensionError(f"dimension exceeds {MAX_SIDE}: {dims}")
    if any(n == 0 for n in dims):
        raise GrdDimensionError(f"zero dimension: {dims}")
    (code,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if code not in _DTYPES:
        raise GrdError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    count = int(np.prod(dims))
    nbytes = count * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise GrdTruncatedError(f"payload truncated: need {nbytes} bytes, have {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    return data.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_grid(grid, path) -> None:
    Path(path).write_bytes(encode_grd(grid))


def read_grid(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = decode_grd(buf)
    if end != len(buf):
        raise GrdError(f"{len(buf) - end} trailing bytes after GRD payload")
    return array


# ---------------------------------------------------------------- PPM files


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UnsupportedFormatError("truncated PPM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise UnsupportedFormatError(f"only binary P6 PPM is supported, got {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise UnsupportedFormatError(f"only maxval 255 is supported, got {maxval}")
    raster = buf[pos:pos + width * height * 3]
    if len(raster) != width * height * 3:
        raise UnsupportedFormatError("truncated PPM raster")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def write_ppm(image, path) -> None:
    image = check_image(image)
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    height, width = pixels.shape[:2]
    Path(path).write_bytes(f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())


# ---------------------------------------------------------------- resampling


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D align-corners linear interpolation as an ``(n_out, n_in)`` matrix."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be >= 1, got {n_in} -> {n_out}")
    mat = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        if n_in == 1:
            mat[:, 0] = 1.0
        else:
            mat[0, 0] = 1.0
        return mat
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    mat[rows, lo] += 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def resample_bilinear(grid, new_width: int, new_height: int) -> np.ndarray:
    """Bilinear resize with the align-corners convention.

    Works on ``(H, W)`` grids and ``(H, W, C)`` images alike.
    """
    if new_width < 1 or new_height < 1:
        raise ValueError(f"target size must be >= 1, got {new_width}x{new_height}")
    grid = np.asarray(grid, dtype=np.float64)
    ry = resample_matrix(grid.shape[0], new_height)
    rx = resample_matrix(grid.shape[1], new_width)
    out = np.tensordot(ry, grid, axes=(1, 0))
    out = np.tensordot(rx, out, axes=(1, 1)).swapaxes(0, 1)
    # interpolation weights are convex, so clipping only removes rounding drift
    return np.clip(out, grid.min(), grid.max())


# ---------------------------------------------------------------- features


@dataclass(frozen=True)
class FeatureField:
    """Per-pixel kernel features, already divided by their bandwidths."""

    kind: str
    values: np.ndarray  # (N, dim)

    def __post_init__(self):
        expected = {"spatial": 2, "bilateral": 5}
        if self.kind not in expected:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.values.ndim != 2 or self.values.shape[1] != expected[self.kind]:
            raise ValueError(f"{self.kind} features need dim {expected[self.kind]}, got {self.values.shape}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def extract_features(image, kind: str, spatial_bandwidth: float, color_bandwidth: float = 1.0) -> FeatureField:
    if spatial_bandwidth <= 0 or color_bandwidth <= 0:
        raise ValueError("bandwidths must be positive")
    image = check_image(image)
    height, width = image.shape[:2]
    rows, cols = np.mgrid[0:height, 0:width]
    pos = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64) / spatial_bandwidth
    if kind == "spatial":
        values = pos
    elif kind == "bilateral":
        values = np.concatenate([pos, image.reshape(-1, 3).astype(np.float64) / color_bandwidth], axis=1)
    else:
        raise ValueError(f"unknown feature kind {kind!r}")
    values.setflags(write=False)
    return FeatureField(kind, values)
