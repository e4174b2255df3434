"""Gaussian-kernel message passing.

Every filter computes ``out_i = sum_j exp(-|h_i - h_j|^2 / 2) v_j`` over unit
bandwidth features ``h``, optionally dropping the ``j == i`` term. The dense
path is exact and quadratic in N; the permutohedral lattice (splat, blur,
slice) is approximate and linear in N.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .grid import FeatureField, extract_features, resample_bilinear

MAX_LATTICE_DIM = 16
# Dense filtering is cheaper than building a lattice up to this many pixels
# (see ``crffusion bench-filter``).
DENSE_CROSSOVER = 1024
_CHUNK = 2048
_CALIBRATION_ROWS = 256
# Splat and slice interpolate linearly, which widens the effective kernel.
# Features are scaled up by this per-dimension factor to compensate; values
# come from ``fit_width_correction`` (seed 0). Dimensions without an entry are
# left uncorrected: a 1500-point reference cloud is too sparse there to fit.
WIDTH_CORRECTION = {1: 1.031, 2: 1.045, 3: 1.064, 4: 1.074, 5: 1.068, 6: 1.053}


class UnsupportedDimensionError(ValueError):
    pass


def _as_column(values, n: int, name: str = "values") -> tuple[np.ndarray, tuple]:
    values = np.asarray(values, dtype=np.float64)
    if values.size != n:
        raise ValueError(f"{name} has {values.size} entries, features have {n}")
    return values.reshape(-1), values.shape


def kernel_matrix(features: FeatureField, rows=None) -> np.ndarray:
    """Dense kernel block ``K[rows, :]`` (all rows by default)."""
    h = features.values
    rows = np.arange(features.n) if rows is None else np.asarray(rows)
    hr = h[rows]
    sq = (hr * hr).sum(1)[:, None] + (h * h).sum(1)[None, :] - 2.0 * hr @ h.T
    np.maximum(sq, 0.0, out=sq)
    # the expansion above leaves rounding residue on the self distance
    sq[np.arange(len(rows)), rows] = 0.0
    return np.exp(-0.5 * sq)


def dense_filter(values, features: FeatureField, exclude_self: bool = False) -> np.ndarray:
    """Exact O(N^2) Gaussian filtering, computed in row blocks."""
    v, shape = _as_column(values, features.n)
    h = features.values
    out = np.empty_like(v)
    sq_norm = (h * h).sum(1)
    for start in range(0, features.n, _CHUNK):
        stop = min(start + _CHUNK, features.n)
        sq = sq_norm[start:stop, None] + sq_norm[None, :] - 2.0 * h[start:stop] @ h.T
        np.maximum(sq, 0.0, out=sq)
        local = np.arange(stop - start)
        sq[local, local + start] = 0.0 if not exclude_self else np.inf
        np.exp(-0.5 * sq, out=sq)
        out[start:stop] = sq @ v
    return out.reshape(shape)


# ---------------------------------------------------------------- lattice


@dataclass(frozen=True)
class _Simplices:
    """One permutohedral lattice: per-pixel vertex indices and barycentric
    weights ``(N, d+1)``, plus the blur stencil ``(d+1, 2, m)`` giving the two
    neighbours of each vertex along each lattice direction (``m`` = missing)."""

    offsets: np.ndarray
    weights: np.ndarray
    neighbors: np.ndarray
    num_vertices: int

    def splat(self, v):
        return np.bincount(self.offsets.ravel(), (self.weights * v[:, None]).ravel(),
                           minlength=self.num_vertices + 1)

    def slice(self, grid):
        return (grid[self.offsets] * self.weights).sum(1)

    def blur(self, grid, reverse=False):
        m = self.num_vertices
        grid[m] = 0.0
        order = range(len(self.neighbors))
        for j in (reversed(order) if reverse else order):
            lo, hi = self.neighbors[j]
            # [1, 2, 1] / 4 along direction j
            grid[:m] = 0.5 * grid[:m] + 0.25 * (grid[lo] + grid[hi])
        return grid

    def apply(self, v, reverse=False):
        return self.slice(self.blur(self.splat(v), reverse))


def _embed(features: np.ndarray):
    """Elevate features onto the hyperplane and locate the enclosing simplex.

    Returns the remainder-0 vertex, the coordinate ranks and barycentric weights.
    """
    n, d = features.shape
    inv_std = np.sqrt(2.0 / 3.0) * (d + 1)
    scale = inv_std / np.sqrt((np.arange(d) + 1.0) * (np.arange(d) + 2.0))
    cf = features * scale
    elevated = np.empty((n, d + 1))
    tail = np.cumsum(cf[:, ::-1], axis=1)[:, ::-1]
    elevated[:, 0] = tail[:, 0]
    for i in range(1, d + 1):
        rest = tail[:, i] if i < d else 0.0
        elevated[:, i] = rest - i * cf[:, i - 1]

    d1 = d + 1
    v = elevated / d1
    up = np.ceil(v) * d1
    down = np.floor(v) * d1
    rem0 = np.where(up - elevated < elevated - down, up, down)
    total = np.rint(rem0.sum(1) / d1).astype(np.int64)

    delta = elevated - rem0
    rank = np.zeros((n, d1), dtype=np.int64)
    for i in range(d1):
        for j in range(i + 1, d1):
            less = delta[:, i] < delta[:, j]
            rank[:, i] += less
            rank[:, j] += ~less

    tot = total[:, None]
    wrap_down = (tot > 0) & (rank >= d1 - tot)
    wrap_up = (tot < 0) & (rank < -tot)
    rem0 = rem0 - d1 * wrap_down + d1 * wrap_up
    rank = rank + tot - d1 * wrap_down + d1 * wrap_up

    delta = (elevated - rem0) / d1
    bary = np.zeros((n, d + 2))
    rows = np.arange(n)[:, None]
    np.add.at(bary, (rows, d - rank), delta)
    np.add.at(bary, (rows, d + 1 - rank), -delta)
    bary[:, 0] += 1.0 + bary[:, d + 1]
    return rem0.astype(np.int64), rank, bary[:, :d1]


def _lookup(table: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Row index of each query in the lexicographically sorted ``table``, or
    ``len(table)`` when absent."""
    lo = table.min(0) - 1
    span = table.max(0) - lo + 2
    if np.sum(np.log2(span.astype(np.float64))) < 62:
        # mixed-radix codes preserve lexicographic order
        radix = np.concatenate([np.cumprod(span[::-1])[::-1][1:], [1]])
        tv = (table - lo) @ radix
        qv = (np.clip(queries, lo, lo + span - 1) - lo) @ radix
    else:
        tv = np.ascontiguousarray(table).view([("", table.dtype)] * table.shape[1]).ravel()
        qv = np.ascontiguousarray(queries).view([("", queries.dtype)] * queries.shape[1]).ravel()
    idx = np.minimum(np.searchsorted(tv, qv), len(tv) - 1)
    return np.where(tv[idx] == qv, idx, len(tv))


def _build_simplices(h: np.ndarray) -> _Simplices:
    n, d = h.shape
    d1 = d + 1
    rem0, rank, bary = _embed(h)
    keys = np.empty((n, d1, d), dtype=np.int64)
    for k in range(d1):
        keys[:, k, :] = rem0[:, :d] + np.where(rank[:, :d] <= d - k, k, k - d1)
    keys = keys.reshape(-1, d)

    steps = []
    for j in range(d1):
        step = -np.ones(d, dtype=np.int64)
        if j < d:
            step[j] += d1
        steps.append(step)
    # Add the one-ring of blur neighbours so that mass leaving a splatted
    # vertex is not dropped on the first pass.
    occupied = np.unique(keys, axis=0)
    ring = [occupied] + [occupied + s for s in steps] + [occupied - s for s in steps]
    table = np.unique(np.concatenate(ring), axis=0)

    offsets = _lookup(table, keys).reshape(n, d1)
    neighbors = np.stack([np.stack([_lookup(table, table + s), _lookup(table, table - s)])
                          for s in steps])
    return _Simplices(offsets, bary, neighbors, len(table))


class Lattice:
    """Permutohedral-lattice approximation of the unit Gaussian filter.

    The response is averaged over ``copies`` lattices, each built on a
    randomly rotated and shifted copy of the features (the Gaussian is
    invariant to both, the lattice artefacts are not), then scaled by a gain
    fitted to exact row sums on a fixed sample of pixels.
    """

    def __init__(self, features: FeatureField, copies: int = 4, seed: int = 0, calibrate: bool = True,
                 width_correction: bool = True):
        h = np.asarray(features.values, dtype=np.float64)
        self.n, self.dim = h.shape
        if self.dim > MAX_LATTICE_DIM:
            raise UnsupportedDimensionError(f"feature dim {self.dim} exceeds {MAX_LATTICE_DIM}")
        h = h * (WIDTH_CORRECTION.get(self.dim, 1.0) if width_correction else 1.0)
        rng = np.random.default_rng(seed)
        self._parts = []
        for _ in range(copies if self.n > 1 else 1):
            q, r = np.linalg.qr(rng.normal(size=(self.dim, self.dim)))
            rot = q * np.sign(np.diag(r))
            shift = rng.uniform(0.0, self.dim + 1.0, self.dim)
            self._parts.append(_build_simplices(h @ rot + shift))
        self.gain = 1.0 / len(self._parts)
        if calibrate and self.n > 1:
            count = min(self.n, _CALIBRATION_ROWS)
            rows = np.linspace(0, self.n - 1, count).round().astype(np.int64)
            exact = kernel_matrix(features, rows).sum(1)
            approx = self._raw(np.ones(self.n))[rows]
            self.gain = float(exact @ approx / (approx @ approx))

    @property
    def num_vertices(self) -> int:
        return sum(p.num_vertices for p in self._parts)

    def _raw(self, v, reverse=False):
        return sum(p.apply(v, reverse) for p in self._parts)

    def filter(self, v, exclude_self=False, reverse=False):
        out = self.gain * self._raw(v, reverse)
        if exclude_self:
            out -= v
        return out


def fit_width_correction(dim: int, n: int = 1500, seed: int = 0) -> tuple[float, float]:
    """Feature scale minimising the lattice error on white noise over a
    Gaussian reference cloud (spread 2 per axis); returns ``(scale, rel_err)``.

    The gain is refitted for each trial scale, so only the kernel shape counts.
    """
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(n, dim)) * 2.0
    v = rng.normal(size=n)
    exact = np.exp(-0.5 * ((h[:, None, :] - h[None, :, :]) ** 2).sum(-1)) @ v

    def error(scale):
        field = type("Cloud", (), {"values": h * scale})()
        approx = Lattice(field, calibrate=False, width_correction=False).filter(v)
        return relative_l2(approx * (approx @ exact) / (approx @ approx), exact)

    res = minimize_scalar(error, bounds=(0.9, 1.3), method="bounded", options={"xatol": 1e-3})
    return float(res.x), float(res.fun)


def build_lattice(features: FeatureField, copies: int = 4, seed: int = 0) -> Lattice:
    """One-time construction of the lattice plan for a feature set."""
    return Lattice(features, copies=copies, seed=seed)


def lattice_filter(lattice: Lattice, values, exclude_self: bool = False) -> np.ndarray:
    v, shape = _as_column(values, lattice.n)
    return lattice.filter(v, exclude_self).reshape(shape)


def lattice_adjoint(lattice: Lattice, grad_out, exclude_self: bool = False) -> np.ndarray:
    """Exact transpose of :func:`lattice_filter` (blur passes in reverse order)."""
    g, shape = _as_column(grad_out, lattice.n)
    return lattice.filter(g, exclude_self, reverse=True).reshape(shape)


# ---------------------------------------------------------------- plans


class FilterPlan:
    """Filtering operator for one feature set: dense below the crossover, lattice above.

    The dense variant caches the full kernel matrix, so repeated filtering
    (every mean-field iteration) costs one matrix-vector product.
    """

    def __init__(self, features: FeatureField, method: str = "auto"):
        if method == "auto":
            method = "dense" if features.n <= DENSE_CROSSOVER else "lattice"
        if method not in ("dense", "lattice"):
            raise ValueError(f"unknown filter method {method!r}")
        self.features = features
        self.method = method
        self.n = features.n
        self._row_sums = {}
        if method == "dense":
            self._matrix = kernel_matrix(features)
            self._matrix.setflags(write=False)
            self._lattice = None
        else:
            self._matrix = None
            self._lattice = build_lattice(features)

    def apply(self, values, exclude_self: bool = False) -> np.ndarray:
        v, shape = _as_column(values, self.n)
        if self._lattice is not None:
            return self._lattice.filter(v, exclude_self).reshape(shape)
        out = self._matrix @ v
        if exclude_self:
            out -= v
        return out.reshape(shape)

    def adjoint(self, grad_out, exclude_self: bool = False) -> np.ndarray:
        """Transpose of :meth:`apply`.

        The kernel matrix is symmetric, so on the dense path this is the same
        operator; on the lattice path the blur passes run in reverse order,
        which is the exact transpose of the approximate forward map.
        """
        g, shape = _as_column(grad_out, self.n)
        if self._lattice is not None:
            return self._lattice.filter(g, exclude_self, reverse=True).reshape(shape)
        return self.apply(g, exclude_self).reshape(shape)

    def row_sums(self, exclude_self: bool = False) -> np.ndarray:
        """``sum_j K_ij`` (filter of the all-ones grid), cached per plan."""
        if exclude_self not in self._row_sums:
            sums = self.apply(np.ones(self.n), exclude_self)
            sums.setflags(write=False)
            self._row_sums[exclude_self] = sums
        return self._row_sums[exclude_self]


def filter_adjoint(plan, grad_out, exclude_self: bool = False) -> np.ndarray:
    """Adjoint of a filter given either a :class:`FilterPlan`, a :class:`Lattice`
    or a :class:`FeatureField` (dense)."""
    if isinstance(plan, FilterPlan):
        return plan.adjoint(grad_out, exclude_self)
    if isinstance(plan, Lattice):
        return lattice_adjoint(plan, grad_out, exclude_self)
    if isinstance(plan, FeatureField):
        return dense_filter(grad_out, plan, exclude_self)
    raise TypeError(f"cannot take adjoint of {type(plan).__name__}")


# ---------------------------------------------------------------- benchmark


def relative_l2(approx, exact) -> float:
    approx = np.asarray(approx, dtype=np.float64).ravel()
    exact = np.asarray(exact, dtype=np.float64).ravel()
    return float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))


def bench_features(n: int, kind: str = "bilateral", seed: int = 0) -> FeatureField:
    """Features of a smooth random ``sqrt(n) x sqrt(n)`` image for benchmarking."""
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ValueError(f"benchmark sizes must be perfect squares, got {n}")
    rng = np.random.default_rng(seed)
    coarse = rng.random((4, 4, 3))
    image = resample_bilinear(coarse, side, side)
    return extract_features(image, kind, spatial_bandwidth=3.0, color_bandwidth=0.2)


def bench_filter(sizes, kind: str = "bilateral", seed: int = 0):
    """Yield ``(N, dense_ms, lattice_build_ms, lattice_filter_ms, rel_l2_err)``."""
    rng = np.random.default_rng(seed)
    for n in sizes:
        feats = bench_features(n, kind, seed)
        v = rng.random(n)
        t0 = time.perf_counter()
        exact = dense_filter(v, feats)
        t1 = time.perf_counter()
        lat = build_lattice(feats)
        t2 = time.perf_counter()
        approx = lattice_filter(lat, v)
        t3 = time.perf_counter()
        yield n, 1e3 * (t1 - t0), 1e3 * (t2 - t1), 1e3 * (t3 - t2), relative_l2(approx, exact)
