"""Uniform-grid fields over a ball.

Fields are stored component-first, ``data.shape == (components, *grid.shape)``,
together with a boolean validity mask.  Invalid samples are kept at zero so
that every stored value stays finite; all norms ignore them.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, InsufficientDataError

KINDS = ("scalar", "map", "sym-tensor", "tensor")
_KIND_CODE = {"scalar": 0, "map": 1, "sym-tensor": 2, "tensor": 3}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}

MAGIC = b"CIGF"
VERSION = 1


def sym_pairs(n: int) -> list[tuple[int, int]]:
    """Upper-triangle index pairs in storage order."""
    return [(i, j) for i in range(n) for j in range(i, n)]


def sym_index(n: int) -> np.ndarray:
    """``(n, n)`` table mapping a matrix entry to its sym-tensor component."""
    idx = np.empty((n, n), dtype=int)
    for c, (i, j) in enumerate(sym_pairs(n)):
        idx[i, j] = idx[j, i] = c
    return idx


def full_to_sym(mat: np.ndarray) -> np.ndarray:
    """Symmetrize ``(n, n, ...)`` matrices and pack the upper triangle."""
    n = mat.shape[0]
    return np.stack([0.5 * (mat[i, j] + mat[j, i]) for i, j in sym_pairs(n)])


def sym_to_full(data: np.ndarray, n: int) -> np.ndarray:
    """Unpack ``(n(n+1)/2, ...)`` storage into exactly symmetric matrices."""
    idx = sym_index(n)
    return np.stack([np.stack([data[idx[i, j]] for j in range(n)]) for i in range(n)])


def n_components(kind: str, n: int, m: int | None = None) -> int | None:
    if kind == "scalar":
        return 1
    if kind == "sym-tensor":
        return n * (n + 1) // 2
    if kind == "tensor":
        return n * n
    return m


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid over the bounding cube of a ball.

    Parameters
    ----------
    n : int
        Domain dimension, 2 or 3.
    points_per_axis : int
        Points of the full grid along each axis.
    spacing : float
        Grid step.
    center : tuple of float
        Ball center; also the grid center.
    radius : float
        Current ball radius.
    start, shape : tuple of int, optional
        Index window of the full grid that is actually sampled.  Defaults to
        the whole grid.  Windows let large grids be processed in row blocks.
    """

    n: int
    points_per_axis: int
    spacing: float
    center: tuple[float, ...]
    radius: float
    start: tuple[int, ...] | None = None
    shape: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.n not in (2, 3):
            raise ConfigurationError(f"domain dimension must be 2 or 3, got {self.n}")
        if self.points_per_axis < 1 or self.spacing <= 0 or self.radius < 0:
            raise ConfigurationError("invalid grid size, spacing or radius")
        center = tuple(float(c) for c in self.center)
        if len(center) != self.n:
            raise ConfigurationError("center must have n coordinates")
        object.__setattr__(self, "center", center)
        if self.spacing * (self.points_per_axis - 1) < 2 * self.radius * (1 - 1e-12):
            raise ConfigurationError("grid does not cover the ball")
        start = (0,) * self.n if self.start is None else tuple(int(s) for s in self.start)
        shape = (self.points_per_axis,) * self.n if self.shape is None else tuple(int(s) for s in self.shape)
        if len(start) != self.n or len(shape) != self.n:
            raise ConfigurationError("window must have n entries")
        for s, m in zip(start, shape):
            if s < 0 or m < 1 or s + m > self.points_per_axis:
                raise ConfigurationError("window outside the grid")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def ball(cls, n: int, points_per_axis: int, radius: float,
             center: Sequence[float] | None = None) -> "GridSpec":
        """Grid whose extreme points lie exactly on the ball's bounding cube."""
        center = (0.0,) * n if center is None else tuple(center)
        return cls(n, points_per_axis, 2.0 * radius / (points_per_axis - 1), center, radius)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def is_full(self) -> bool:
        return self.start == (0,) * self.n and self.shape == (self.points_per_axis,) * self.n

    def full(self) -> "GridSpec":
        return replace(self, start=None, shape=None)

    def with_radius(self, radius: float) -> "GridSpec":
        return replace(self, radius=radius)

    def window(self, start: Sequence[int], shape: Sequence[int]) -> "GridSpec":
        """Sub-window in full-grid index coordinates, clipped to the grid."""
        lo = [max(0, int(s)) for s in start]
        hi = [min(self.points_per_axis, int(s) + int(m)) for s, m in zip(start, shape)]
        return replace(self, start=tuple(lo), shape=tuple(h - l for l, h in zip(lo, hi)))

    def slices(self) -> tuple[slice, ...]:
        """Slices of this window inside full-grid arrays."""
        return tuple(slice(s, s + m) for s, m in zip(self.start, self.shape))

    def axis_coords(self, i: int) -> np.ndarray:
        idx = self.start[i] + np.arange(self.shape[i]) - 0.5 * (self.points_per_axis - 1)
        return self.center[i] + idx * self.spacing

    def coords(self) -> list[np.ndarray]:
        """Sparse broadcastable coordinate arrays, one per axis."""
        out = []
        for i in range(self.n):
            shp = [1] * self.n
            shp[i] = self.shape[i]
            out.append(self.axis_coords(i).reshape(shp))
        return out

    def dense_coords(self) -> np.ndarray:
        """Coordinates as an ``(n, *shape)`` array."""
        return np.stack(np.broadcast_arrays(*self.coords()))

    def ball_mask(self, radius: float | None = None) -> np.ndarray:
        r = self.radius if radius is None else radius
        r2 = sum((x - c) ** 2 for x, c in zip(self.coords(), self.center))
        return np.broadcast_to(r2 <= r * r * (1 + 1e-12), self.shape).copy()


@dataclass(frozen=True, eq=False)
class GridField:
    """Samples of a scalar, map or tensor field on a grid window.

    Parameters
    ----------
    grid : GridSpec
    data : ndarray, shape (components, *grid.shape)
    kind : {'scalar', 'map', 'sym-tensor', 'tensor'}
        ``sym-tensor`` stores the upper triangle only; ``tensor`` stores all
        n*n entries row-major.
    valid : ndarray of bool, optional
        Points where the samples are trusted.  Defaults to the ball mask.
    """

    grid: GridSpec
    data: np.ndarray
    kind: str = "map"
    valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown field kind {self.kind!r}")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == self.grid.n:
            data = data[None]
        if data.shape[1:] != self.grid.shape:
            raise ConfigurationError(f"data shape {data.shape} does not match grid {self.grid.shape}")
        want = n_components(self.kind, self.grid.n)
        if want is not None and data.shape[0] != want:
            raise ConfigurationError(f"kind {self.kind} needs {want} components, got {data.shape[0]}")
        valid = self.grid.ball_mask() if self.valid is None else np.asarray(self.valid, dtype=bool)
        if valid.shape != self.grid.shape:
            raise ConfigurationError("validity mask does not match grid")
        if not np.isfinite(data).all():
            raise DomainError("field samples must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_function(cls, grid: GridSpec, func: Callable[..., object], kind: str = "map",
                      valid: np.ndarray | None = None) -> "GridField":
        """Sample ``func(*coords)``; it returns a component sequence or a scalar array."""
        vals = func(*grid.coords())
        if kind == "scalar" or not isinstance(vals, (list, tuple)) and np.ndim(vals) == grid.n:
            comps = [vals]
        else:
            comps = list(vals)
        data = np.stack([np.broadcast_to(np.asarray(c, dtype=float), grid.shape) for c in comps])
        return cls(grid, data, kind, valid)

    @property
    def components(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.grid.n

    def with_data(self, data: np.ndarray, kind: str | None = None,
                  valid: np.ndarray | None = None) -> "GridField":
        return GridField(self.grid, data, kind or self.kind,
                         self.valid if valid is None else valid)

    def restrict(self, radius: float) -> "GridField":
        """Same samples on a smaller ball; points outside become invalid."""
        grid = self.grid.with_radius(radius)
        valid = self.valid & grid.ball_mask()
        return GridField(grid, np.where(valid, self.data, 0.0), self.kind, valid)

    def mask(self, valid: np.ndarray) -> "GridField":
        valid = self.valid & valid
        return GridField(self.grid, np.where(valid, self.data, 0.0), self.kind, valid)

    def matrix(self) -> np.ndarray:
        """Full ``(n, n, *shape)`` matrices of a tensor field."""
        n = self.n
        if self.kind == "sym-tensor":
            return sym_to_full(self.data, n)
        if self.kind == "tensor":
            return self.data.reshape((n, n) + self.grid.shape)
        raise ConfigurationError("matrix() needs a tensor field")

    def magnitude(self) -> np.ndarray:
        """Pointwise magnitude: Euclidean for maps, max-abs entry for tensors."""
        if self.kind in ("sym-tensor", "tensor"):
            return np.abs(self.data).max(axis=0)
        return np.sqrt(np.einsum("c...,c...->...", self.data, self.data))

    def _combine(self, other: "GridField", op) -> "GridField":
        if other.grid.shape != self.grid.shape or other.kind != self.kind:
            raise ConfigurationError("fields live on different grids or kinds")
        valid = self.valid & other.valid
        return GridField(self.grid, np.where(valid, op(self.data, other.data), 0.0), self.kind, valid)

    def __add__(self, other: "GridField") -> "GridField":
        return self._combine(other, np.add)

    def __sub__(self, other: "GridField") -> "GridField":
        return self._combine(other, np.subtract)

    def __mul__(self, c: float) -> "GridField":
        return GridField(self.grid, self.data * float(c), self.kind, self.valid)

    __rmul__ = __mul__

    def __neg__(self) -> "GridField":
        return self * -1.0


@dataclass(frozen=True)
class HolderEstimate:
    """Sampled Hölder norm.  ``value = sup_part + seminorm``."""

    k: int
    alpha: float
    value: float
    pair_budget: int
    sup_part: float = 0.0
    seminorm: float = 0.0


# ---------------------------------------------------------------- derivatives

def _axis_slice(ndim: int, ax: int, lo: int, hi: int) -> tuple[slice, ...]:
    sl = [slice(None)] * ndim
    sl[ax] = slice(lo, hi)
    return tuple(sl)


def fd_array(a: np.ndarray, axis: int, h: float, step: int = 1) -> np.ndarray:
    """4th-order central difference of ``a`` along ``axis`` (a raw array axis).

    Entries within ``2*step`` cells of either end are set to zero.
    """
    m = a.shape[axis]
    out = np.zeros_like(a)
    s = step
    if m <= 4 * s:
        return out
    S = lambda lo, hi: _axis_slice(a.ndim, axis, lo, hi)
    tmp = a[S(3 * s, m - s)] - a[S(s, m - 3 * s)]
    tmp *= 8.0
    tmp += a[S(0, m - 4 * s)]
    tmp -= a[S(4 * s, m)]
    tmp /= 12.0 * h * s
    out[S(2 * s, m - 2 * s)] = tmp
    return out


def erode_axis(valid: np.ndarray, axis: int, width: int = 2) -> np.ndarray:
    """Points whose ``width``-neighbourhood along ``axis`` is entirely valid."""
    m = valid.shape[axis]
    out = np.zeros_like(valid)
    if m <= 2 * width:
        return out
    S = lambda lo, hi: _axis_slice(valid.ndim, axis, lo, hi)
    acc = valid[S(width, m - width)].copy()
    for d in range(1, width + 1):
        acc &= valid[S(width - d, m - width - d)]
        acc &= valid[S(width + d, m - width + d)]
    out[S(width, m - width)] = acc
    return out


def erode(valid: np.ndarray, width: int) -> np.ndarray:
    """Erode along every axis (box neighbourhood of half-width ``width``)."""
    out = valid
    for ax in range(valid.ndim):
        out = erode_axis(out, ax, width)
    return out


def _check_axis(f: GridField, i: int) -> None:
    if not 0 <= i < f.n:
        raise DomainError(f"axis {i} out of range")
    if min(f.grid.shape) < 5 or 2 * f.grid.radius < 4 * f.grid.spacing:
        raise ConfigurationError("need at least 5 points per axis for 4th-order differences")


def partial(f: GridField, i: int) -> GridField:
    """4th-order central derivative along axis ``i``.

    Points within two cells of an invalid point along the axis become invalid.
    """
    _check_axis(f, i)
    valid = erode_axis(f.valid, i, 2)
    d = fd_array(f.data, i + 1, f.grid.spacing)
    d *= valid
    return GridField(f.grid, d, f.kind, valid)


def derivative(f: GridField, multi: Sequence[int]) -> GridField:
    """Mixed derivative; ``multi`` lists the axes, e.g. ``(0, 0, 1)``."""
    for i in multi:
        f = partial(f, i)
    return f


def truncation_estimate(f: GridField, i: int) -> GridField:
    """Richardson estimate ``|D_h f - D_2h f| / 15`` of the FD error along ``i``."""
    _check_axis(f, i)
    valid = erode_axis(f.valid, i, 4)
    d1 = fd_array(f.data, i + 1, f.grid.spacing)
    d2 = fd_array(f.data, i + 1, f.grid.spacing, step=2)
    est = np.abs(d1 - d2) / 15.0
    return GridField(f.grid, est * valid, f.kind, valid)


def pullback(f: GridField) -> GridField:
    """Induced metric ``g_ij = d_i f . d_j f`` as a sym-tensor field."""
    n = f.n
    if f.kind not in ("map", "scalar") or f.components < n:
        raise ConfigurationError("pullback needs a map with at least n components")
    pairs = sym_pairs(n)
    g = np.zeros((len(pairs),) + f.grid.shape)
    valid = f.valid
    for i in range(n):
        _check_axis(f, i)
        valid = valid & erode_axis(f.valid, i, 2)
    h = f.grid.spacing
    for c in range(f.components):
        d = [fd_array(f.data[c], i, h) for i in range(n)]
        for p, (i, j) in enumerate(pairs):
            g[p] += d[i] * d[j]
    g *= valid
    return GridField(f.grid, g, "sym-tensor", valid)


def sym(T: GridField | np.ndarray) -> GridField | np.ndarray:
    """Symmetric part ``(T + T^t)/2``; accepts a tensor field or ``(n, n, ...)`` array."""
    if isinstance(T, GridField):
        if T.kind == "sym-tensor":
            return T
        if T.kind != "tensor":
            raise ConfigurationError("sym needs a square-matrix field")
        return GridField(T.grid, full_to_sym(T.matrix()), "sym-tensor", T.valid)
    T = np.asarray(T, dtype=float)
    if T.shape[0] != T.shape[1]:
        raise ConfigurationError("sym needs square matrices")
    return 0.5 * (T + np.swapaxes(T, 0, 1))


def eigmin_array(data: np.ndarray, n: int) -> np.ndarray:
    """Smallest eigenvalue of packed symmetric matrices, closed form."""
    if n == 2:
        a, b, c = data
        return 0.5 * (a + c) - np.hypot(0.5 * (a - c), b)
    if n == 3:
        a11, a12, a13, a22, a23, a33 = data
        q = (a11 + a22 + a33) / 3.0
        p1 = a12 ** 2 + a13 ** 2 + a23 ** 2
        b11, b22, b33 = a11 - q, a22 - q, a33 - q
        p = np.sqrt((b11 ** 2 + b22 ** 2 + b33 ** 2 + 2.0 * p1) / 6.0)
        safe = np.where(p > 0, p, 1.0)
        det = (b11 * (b22 * b33 - a23 ** 2) - a12 * (a12 * b33 - a23 * a13)
               + a13 * (a12 * a23 - b22 * a13))
        r = np.clip(det / (2.0 * safe ** 3), -1.0, 1.0)
        phi = np.arccos(r) / 3.0
        return np.where(p > 0, q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0), q)
    raise DomainError("closed-form eigenvalues need n <= 3")


def min_eigenvalue(g: GridField) -> float:
    """Minimum over valid points of the smallest eigenvalue of a metric field."""
    if g.kind != "sym-tensor":
        g = sym(g)
    if not g.valid.any():
        raise InsufficientDataError("no valid points")
    return float(eigmin_array(g.data[:, g.valid], g.n).min())


# ---------------------------------------------------------------- norms

def sup_norm(f: GridField) -> float:
    """Max pointwise magnitude over valid points."""
    if not f.valid.any():
        raise InsufficientDataError("no valid points")
    return float(f.magnitude()[f.valid].max())


def ck_seminorm(f: GridField, k: int, mask: np.ndarray | None = None) -> float:
    """``[f]_k``: largest sup over valid points of ``|d^a f|`` with ``|a| = k``."""
    best = 0.0
    found = False
    for a in _multi_indices(f.n, k):
        d = derivative(f, a)
        m = d.valid if mask is None else d.valid & mask
        if m.any():
            found = True
            best = max(best, float(d.magnitude()[m].max()))
    if not found:
        raise InsufficientDataError("no valid points after differentiation")
    return best


def _multi_indices(n: int, k: int) -> list[tuple[int, ...]]:
    return list(combinations_with_replacement(range(n), k))


def _pair_offsets(n: int, spacing: float, radius: float) -> list[np.ndarray]:
    """Dyadic axis and diagonal offsets up to half the radius."""
    dirs = [np.eye(n, dtype=int)[i] for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            for sgn in (1, -1):
                v = np.zeros(n, dtype=int)
                v[i], v[j] = 1, sgn
                dirs.append(v)
    out = []
    s = 1
    while s * spacing <= radius / 2 + 1e-15 * radius or s == 1:
        out.extend(s * d for d in dirs)
        s *= 2
    return out


def _sample_pairs(valid: np.ndarray, offsets: list[np.ndarray], budget: int,
                  seed: int) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Deterministic nested subsample of valid pairs for each offset.

    Each offset keeps every ``stride``-th candidate (stride a power of two)
    starting at a fixed seeded phase, so a larger budget always samples a
    superset of the pairs of a smaller one.
    """
    quota = max(1, budget // max(1, len(offsets)))
    rng = np.random.default_rng(seed)
    phases = rng.integers(0, 2 ** 30, size=len(offsets))
    shape = valid.shape
    out = []
    for off, ph in zip(offsets, phases):
        src = []
        dst = []
        for ax, o in enumerate(off):
            m = shape[ax]
            if abs(o) >= m:
                break
            src.append(slice(max(0, -o), m - max(0, o)))
            dst.append(slice(max(0, o), m - max(0, -o)))
        else:
            cand = valid[tuple(src)] & valid[tuple(dst)]
            sub_shape = cand.shape
            idx = np.flatnonzero(cand)
            if idx.size == 0:
                continue
            stride = 1
            while idx.size > quota * stride:
                stride *= 2
            idx = idx[int(ph) % stride::stride]
            loc = np.unravel_index(idx, sub_shape)
            a = np.ravel_multi_index(tuple(l + s.start for l, s in zip(loc, src)), shape)
            b = np.ravel_multi_index(tuple(l + s.start for l, s in zip(loc, dst)), shape)
            out.append((a, b, float(np.linalg.norm(off))))
    return out


def holder_norm(f: GridField, k: int, alpha: float, pair_budget: int = 10 ** 6,
                seed: int = 0) -> HolderEstimate:
    """Sampled ``C^{k,alpha}`` norm, ``0 < alpha <= 1``.

    See ``_holder`` for the sampling scheme.
    """
    if not 0.0 < alpha <= 1.0:
        raise DomainError("alpha must lie in (0, 1]")
    return _holder(f, k, alpha, pair_budget, seed)


def _holder(f: GridField, k: int, alpha: float, pair_budget: int = 10 ** 6,
            seed: int = 0) -> HolderEstimate:
    """Sampled ``C^{k,alpha}`` norm.

    The sup part is ``max_x sum_{|a|<=k} |d^a f(x)|``; the seminorm is the
    largest sampled ``sum_{|a|=k} |d^a f(x) - d^a f(y)| / |x-y|^alpha`` over
    dyadic axis and diagonal separations.  ``alpha = 0`` skips the seminorm.
    """
    if k < 0:
        raise DomainError("k must be non-negative")
    n = f.n
    h = f.grid.spacing
    tensor = f.kind in ("sym-tensor", "tensor")
    levels = [[()]] + [_multi_indices(n, o) for o in range(1, k + 1)]

    # validity after k derivatives: intersection over all multi-indices
    masks = {(): f.valid}
    for o in range(1, k + 1):
        for a in levels[o]:
            masks[a] = erode_axis(masks[a[:-1]], a[-1], 2)
    vk = np.ones_like(f.valid)
    for a in levels[k]:
        vk &= masks[a]
    if not vk.any():
        raise InsufficientDataError("no valid points after differentiation")

    pairs = []
    if alpha > 0:
        pairs = _sample_pairs(vk, _pair_offsets(n, h, f.grid.radius), pair_budget, seed)

    # per multi-index accumulators combined over components
    acc = {a: np.zeros(f.grid.shape) for lev in levels for a in lev}
    pacc = [{a: np.zeros(p[0].size) for a in levels[k]} for p in pairs]
    for c in range(f.components):
        vals = {(): f.data[c]}
        for o in range(1, k + 1):
            for a in levels[o]:
                vals[a] = fd_array(vals[a[:-1]], a[-1], h)
        for a, v in vals.items():
            if tensor:
                np.maximum(acc[a], np.abs(v), out=acc[a])
            else:
                acc[a] += v * v
        for (ia, ib, _), pa in zip(pairs, pacc):
            for a in levels[k]:
                flat = vals[a].ravel()
                diff = np.abs(flat[ia] - flat[ib])
                if tensor:
                    np.maximum(pa[a], diff, out=pa[a])
                else:
                    pa[a] += diff * diff
        del vals
    total = np.zeros(f.grid.shape)
    for a, v in acc.items():
        total += v if tensor else np.sqrt(v)
    sup_part = float(total[vk].max())
    semi = 0.0
    used = 0
    for (ia, _, d), pa in zip(pairs, pacc):
        s = sum((v if tensor else np.sqrt(v)) for v in pa.values())
        semi = max(semi, float(s.max()) / (d * h) ** alpha)
        used += ia.size
    return HolderEstimate(k, float(alpha), sup_part + semi, used, sup_part, semi)


def norm(f: GridField, s: float, pair_budget: int = 10 ** 6, seed: int = 0) -> float:
    """``C^s`` norm for real ``s >= 0``: ``C^k`` if ``s`` is an integer, else Hölder."""
    if s < 0:
        raise DomainError("norm order must be non-negative")
    k = int(math.floor(s + 1e-12))
    alpha = s - k
    return _holder(f, k, alpha if alpha >= 1e-12 else 0.0, pair_budget, seed).value


@dataclass(frozen=True)
class InterpolationReport:
    lhs: float
    rhs: float
    holds: bool

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else (0.0 if self.lhs == 0 else math.inf)


def interpolation_check(f: GridField, a1: float, a2: float, lam: float,
                        pair_budget: int = 10 ** 6, slack: float = 1.05,
                        constant: float = 1.0) -> InterpolationReport:
    """Compare ``||f||_a`` with ``||f||_a1^lam ||f||_a2^(1-lam)``, ``a = lam a1 + (1-lam) a2``.

    ``holds`` tests ``lhs <= slack * constant * rhs``.  With ``constant = 1``
    the inequality is not true in general: ``sin(20 x)`` with ``a1=0, a2=1``
    gives a ratio near 1.39.  The reported ``rhs`` never includes ``constant``.
    """
    if not a1 < a2 or not 0.0 < lam < 1.0:
        raise DomainError("need a1 < a2 and lam in (0, 1)")
    a = lam * a1 + (1 - lam) * a2
    lhs = norm(f, a, pair_budget)
    rhs = norm(f, a1, pair_budget) ** lam * norm(f, a2, pair_budget) ** (1 - lam)
    return InterpolationReport(lhs, rhs, bool(lhs <= slack * constant * rhs))


# ---------------------------------------------------------------- binary I/O

def _header_struct(n: int) -> struct.Struct:
    return struct.Struct("<4sIBBHIdd" + "d" * n)


def save_field(path: str | Path, f: GridField) -> None:
    """Write a full-grid field to the CIGF container.

    Samples follow the header as little-endian f64, one contiguous block per
    component, each block in row-major point order.
    """
    if not f.grid.is_full:
        raise ConfigurationError("only full-grid fields can be saved")
    g = f.grid
    head = _header_struct(g.n).pack(MAGIC, VERSION, _KIND_CODE[f.kind], g.n, f.components,
                                    g.points_per_axis, g.spacing, g.radius, *g.center)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(f.data, dtype="<f8").tobytes())


def load_field(path: str | Path) -> GridField:
    """Read a CIGF container; validity is the ball of the stored radius."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigurationError("not a CIGF file")
    n = raw[9]
    hs = _header_struct(n)
    magic, version, kind, n, comps, N, spacing, radius, *center = hs.unpack_from(raw)
    if version != VERSION:
        raise ConfigurationError(f"unsupported CIGF version {version}")
    grid = GridSpec(n, N, spacing, tuple(center), radius)
    count = comps * N ** n
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=hs.size)
    if data.size != count:
        raise ConfigurationError("truncated CIGF file")
    data = data.astype(np.float64).reshape((comps,) + grid.shape)
    return GridField(grid, data, _CODE_KIND[kind])
