"""Model parameter files.

Layout (all text ASCII, lines end with ``\\n``)::

    CRFFUSION-MODEL 1
    key=value            one line per setting
    ...
    arrays=name,name,... order of the binary records
    <empty line>
    GRD record per array, back to back

Kernel weights are stored under ``beta`` (``L x 2`` for cascade,
``1 x 4`` for multi-scale); front-end weights under ``s{l}.w1`` (``8 x 27``),
``s{l}.b1``, ``s{l}.w2`` (``1 x 8``) and ``s{l}.b2`` (``1 x 1``).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .frontend import HIDDEN, PARAM_NAMES, ToyFrontEnd
from .fusion import FusionConfig
from .grid import GrdError, decode_grd, encode_grd

MAGIC_LINE = "CRFFUSION-MODEL 1"


class ModelFormatError(ValueError):
    pass


_SHAPES = {"w1": (HIDDEN, 3, 3, 3), "b1": (HIDDEN,), "w2": (HIDDEN,), "b2": (1,)}


def _as_matrix(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape[0], -1) if a.ndim >= 2 else a.reshape(1, -1)


def config_header(config: FusionConfig) -> dict:
    header = {
        "mode": config.mode,
        "L": str(config.scales),
        "order": config.order,
        "combiner": config.combiner,
        "bilateral_xy": repr(float(config.bilateral_xy)),
        "bilateral_rgb": repr(float(config.bilateral_rgb)),
        "spatial_xy": repr(float(config.spatial_xy)),
    }
    if isinstance(config.iterations, tuple):
        header["t_l"] = ",".join(str(t) for t in config.iterations)
    else:
        header["T"] = str(config.iterations)
    return header


def save_model(path, config: FusionConfig | None = None, frontend: ToyFrontEnd | None = None,
               extra: dict | None = None) -> None:
    header: dict = {}
    arrays: dict = {}
    if config is not None:
        header.update(config_header(config))
        arrays["beta"] = _as_matrix(config.beta)
    if frontend is not None:
        header.setdefault("L", str(frontend.scales))
        if int(header["L"]) != frontend.scales:
            raise ValueError("front-end and fusion config disagree on the scale count")
        for name, value in frontend.params.items():
            arrays[name] = _as_matrix(value)
    header.update(extra or {})
    header["arrays"] = ",".join(arrays)
    text = MAGIC_LINE + "\n" + "".join(f"{k}={v}\n" for k, v in header.items()) + "\n"
    blob = text.encode("ascii") + b"".join(encode_grd(a) for a in arrays.values())
    Path(path).write_bytes(blob)


def read_model(path) -> tuple[dict, dict]:
    """Raw header and arrays of a model file."""
    buf = Path(path).read_bytes()
    end = buf.find(b"\n\n")
    if end < 0 or not buf.startswith(MAGIC_LINE.encode("ascii") + b"\n"):
        raise ModelFormatError(f"{path} is not a model file")
    header = {}
    for line in buf[:end].decode("ascii").split("\n")[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise ModelFormatError(f"malformed header line {line!r}")
        header[key] = value
    names = [n for n in header.get("arrays", "").split(",") if n]
    arrays, offset = {}, end + 2
    try:
        for name in names:
            arrays[name], offset = decode_grd(buf, offset)
    except GrdError as exc:
        raise ModelFormatError(f"bad array record in {path}: {exc}") from exc
    if offset != len(buf):
        raise ModelFormatError(f"{len(buf) - offset} trailing bytes in {path}")
    return header, arrays


def load_model(path) -> tuple[FusionConfig | None, ToyFrontEnd | None]:
    header, arrays = read_model(path)
    config = None
    if "mode" in header:
        iterations = (tuple(int(t) for t in header["t_l"].split(",")) if "t_l" in header
                      else int(header.get("T", 5)))
        beta = arrays["beta"]
        config = FusionConfig(
            mode=header["mode"],
            scales=int(header["L"]),
            iterations=iterations,
            order=header.get("order", "inner"),
            bilateral_xy=float(header["bilateral_xy"]),
            bilateral_rgb=float(header["bilateral_rgb"]),
            spatial_xy=float(header["spatial_xy"]),
            combiner=header.get("combiner", "add"),
            beta=beta.ravel() if header["mode"] == "multiscale" else beta,
        )
    frontend = None
    if any(name.startswith("s") and "." in name for name in arrays):
        scales = int(header["L"])
        params = {f"s{l}.{n}": arrays[f"s{l}.{n}"].reshape(_SHAPES[n])
                  for l in range(scales) for n in PARAM_NAMES}
        frontend = ToyFrontEnd(scales, params)
    return config, frontend
