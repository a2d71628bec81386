"""Direction sets and per-point frames.

Normal frames are orthonormal vectors perpendicular to the image of the
differential.  Tangent-derived frames ``nu1_k = sum_r (g^{-1} n_k)^r d_r f``
satisfy ``d_i f . nu1_k = (n_k)_i`` whenever ``g`` is the pullback metric of
the same derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError, DegenerateImmersionError, DomainError, FrameSeedError,
)
from .grid import GridField, GridSpec, eigmin_array, erode_axis, fd_array, sym_index, sym_pairs

RANK_TOL = 1e-6
SEED_TOL = 1e-3
METRIC_TOL = 1e-6


@dataclass(frozen=True)
class DirectionSet:
    """Unit directions ``n_k`` with ``Id = sum_k c_k^2 n_k n_k^T``.

    Attributes
    ----------
    dirs : ndarray, shape (K, n)
    id_coeffs : ndarray, shape (K,)
        The ``c_k`` (positive square roots).
    gram_condition : float
        Condition number of ``G_kl = (n_k . n_l)^2``.
    """

    n: int
    dirs: np.ndarray
    id_coeffs: np.ndarray
    gram_condition: float

    @property
    def K(self) -> int:
        return self.dirs.shape[0]

    def projectors(self) -> np.ndarray:
        """Packed ``n_k n_k^T`` as columns of an ``(S, K)`` matrix."""
        return np.array([[d[i] * d[j] for d in self.dirs] for i, j in sym_pairs(self.n)])


def _icosahedral() -> np.ndarray:
    phi = (1 + np.sqrt(5)) / 2
    v = np.array([[0, 1, phi], [0, -1, phi], [1, phi, 0], [-1, phi, 0], [phi, 0, 1], [phi, 0, -1]], float)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def directions_from(dirs: np.ndarray) -> DirectionSet:
    """Validate a direction set and solve for the identity coefficients."""
    dirs = np.asarray(dirs, float)
    K, n = dirs.shape
    if K != n * (n + 1) // 2:
        raise ConfigurationError("need n(n+1)/2 directions")
    if np.abs(np.linalg.norm(dirs, axis=1) - 1).max() > 1e-12:
        raise ConfigurationError("directions must be unit vectors")
    tmp = DirectionSet(n, dirs, np.ones(K), 0.0)
    P = tmp.projectors()
    ident = np.array([1.0 if i == j else 0.0 for i, j in sym_pairs(n)])
    try:
        c2 = np.linalg.solve(P, ident)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("directions do not span Sym(n)") from exc
    if np.any(c2 < 0.1):
        raise ConfigurationError("identity is not interior to the direction cone")
    G = (dirs @ dirs.T) ** 2
    return DirectionSet(n, dirs, np.sqrt(c2), float(np.linalg.cond(G)))


def make_directions(n: int) -> DirectionSet:
    """Tight-frame direction set: three at 60 degrees (n=2), icosahedral (n=3)."""
    if n == 2:
        ang = np.array([0.0, np.pi / 3, 2 * np.pi / 3])
        return directions_from(np.stack([np.cos(ang), np.sin(ang)], axis=1))
    if n == 3:
        return directions_from(_icosahedral())
    raise DomainError(f"unsupported dimension {n}")


@dataclass(frozen=True, eq=False)
class FrameField:
    """Per-point frames on a grid window.

    ``nu1`` and ``nu2`` have shape ``(K, m, *grid.shape)``.  For the spiral
    variant both families are normal; for the strain variant ``nu1`` is
    tangent-derived.
    """

    grid: GridSpec
    nu2: np.ndarray
    variant: str
    valid: np.ndarray
    nu1: np.ndarray | None = field(default=None)

    def normals(self) -> np.ndarray:
        """All normal vectors, ``(d, m, ...)``."""
        if self.variant == "spiral":
            return np.concatenate([self.nu1, self.nu2])
        return self.nu2


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("m...,m...->...", a, b)


def orthonormal_normals(T: np.ndarray, seeds: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Orthonormal normals from tangent vectors and seeds.

    Parameters
    ----------
    T : ndarray, shape (n, m, ...)
        Tangent vectors ``d_i f``.
    seeds : ndarray, shape (d, m, ...) or (d, m)
        Vectors projected onto the normal space, in order.
    valid : ndarray of bool, optional
        Guards are only enforced where valid.

    Returns
    -------
    ndarray, shape (d, m, ...)
    """
    n, m = T.shape[:2]
    rest = T.shape[2:]
    seeds = np.asarray(seeds, float)
    if seeds.ndim == 2:
        seeds = seeds.reshape(seeds.shape + (1,) * len(rest))
    d = seeds.shape[0]
    if m - n < d:
        raise ConfigurationError(f"need codimension >= {d}, have {m - n}")
    mask = np.ones(rest, bool) if valid is None else valid

    g = np.stack([_dot(T[i], T[j]) for i, j in sym_pairs(n)])
    lam = eigmin_array(g, n)
    if np.any(lam[mask] < RANK_TOL ** 2):
        raise DegenerateImmersionError("differential lost rank")

    basis: list[np.ndarray] = []
    for i in range(n):
        v = T[i].copy()
        for _ in range(2):
            for q in basis:
                v -= _dot(q, v) * q
        nv = np.sqrt(_dot(v, v))
        basis.append(v / np.where(nv > 0, nv, 1.0))
    out = []
    for j in range(d):
        v = np.broadcast_to(seeds[j], (m,) + rest).copy()
        for _ in range(2):
            for q in basis:
                v -= _dot(q, v) * q
        nv = np.sqrt(_dot(v, v))
        if np.any(nv[mask] < SEED_TOL):
            raise FrameSeedError("seed vector nearly tangent to the image")
        v /= np.where(nv > 0, nv, 1.0)
        basis.append(v)
        out.append(v)
    res = np.stack(out)
    res *= mask
    return res


def _tangents(f: GridField) -> tuple[np.ndarray, np.ndarray]:
    h = f.grid.spacing
    valid = f.valid
    for i in range(f.n):
        valid = valid & erode_axis(f.valid, i, 2)
    T = np.stack([fd_array(f.data, i + 1, h) for i in range(f.n)])
    return T, valid


def default_seeds(n: int, m: int, d: int) -> np.ndarray:
    """Ambient coordinate vectors ``e_n, ..., e_{n+d-1}``."""
    return np.eye(m)[n:n + d]


def normal_frame(f: GridField, d: int, ref: FrameField | np.ndarray | None = None) -> FrameField:
    """``d`` orthonormal normal fields of the map ``f``.

    Seeds are the ambient coordinate vectors after the first ``n``, or the
    normals of ``ref`` when given, which keeps the new frame continuous with
    the reference one.
    """
    if f.kind != "map":
        raise ConfigurationError("normal_frame needs a map")
    m = f.components
    if m - f.n < d:
        raise ConfigurationError(f"need codimension >= {d}, have {m - f.n}")
    T, valid = _tangents(f)
    if ref is None:
        seeds = default_seeds(f.n, m, d)
    else:
        seeds = ref.normals() if isinstance(ref, FrameField) else np.asarray(ref)
        seeds = seeds[:d]
    N = orthonormal_normals(T, seeds, valid)
    return FrameField(f.grid, N, "normal", valid)


def spiral_frame(f: GridField, dirs: DirectionSet, ref: FrameField | None = None) -> FrameField:
    """Two normal families per direction: ``nu1_k = N_k``, ``nu2_k = N_{K+k}``."""
    K = dirs.K
    nf = normal_frame(f, 2 * K, ref)
    return FrameField(f.grid, nf.nu2[K:], "spiral", nf.valid, nu1=nf.nu2[:K])


def tangent_vectors(T: np.ndarray, g: np.ndarray, dirs: DirectionSet,
                    valid: np.ndarray | None = None) -> np.ndarray:
    """``nu1_k = sum_r (g^{-1} n_k)^r T_r``.

    Parameters
    ----------
    T : ndarray, shape (n, m, ...)
    g : ndarray, shape (S, ...), packed metric
    """
    n = dirs.n
    mask = np.ones(g.shape[1:], bool) if valid is None else valid
    if np.any(eigmin_array(g, n)[mask] < METRIC_TOL):
        raise DegenerateImmersionError("metric is not positive definite")
    idx = sym_index(n)
    G = np.stack([np.stack([g[idx[i, j]] for j in range(n)], axis=-1) for i in range(n)], axis=-2)
    G = np.where(mask[..., None, None], G, np.eye(n))
    out = []
    for nk in dirs.dirs:
        v = np.linalg.solve(G, np.broadcast_to(nk, G.shape[:-1])[..., None])[..., 0]
        out.append(sum(v[..., r] * T[r] for r in range(n)))
    res = np.stack(out)
    res *= mask
    return res


def tangent_frame(f_ell: GridField, g_ell: GridField, dirs: DirectionSet) -> FrameField:
    """Tangent-derived family ``nu1`` of the strain construction."""
    T, valid = _tangents(f_ell)
    valid = valid & g_ell.valid
    nu1 = tangent_vectors(T, g_ell.data, dirs, valid)
    return FrameField(f_ell.grid, np.zeros((0,) + nu1.shape[1:]), "tangent", valid, nu1=nu1)


def strain_frame(f_ell: GridField, g_ell: GridField, dirs: DirectionSet,
                 ref: FrameField | None = None) -> FrameField:
    """Strain frames: tangent-derived ``nu1`` and ``K`` orthonormal normals ``nu2``."""
    nf = normal_frame(f_ell, dirs.K, ref)
    tf = tangent_frame(f_ell, g_ell, dirs)
    return FrameField(f_ell.grid, nf.nu2, "strain", nf.valid & tf.valid, nu1=tf.nu1)


def orthogonality_residual(frame: FrameField, f: GridField) -> float:
    """Largest violated orthonormality relation among normals and tangents."""
    T, valid = _tangents(f)
    valid = valid & frame.valid
    N = frame.normals()
    worst = 0.0
    for a in range(N.shape[0]):
        for i in range(T.shape[0]):
            worst = max(worst, float(np.abs(_dot(N[a], T[i])[valid]).max()))
        for b in range(a, N.shape[0]):
            target = 1.0 if a == b else 0.0
            worst = max(worst, float(np.abs(_dot(N[a], N[b])[valid] - target).max()))
    if frame.variant == "strain":
        for a in range(frame.nu1.shape[0]):
            for b in range(N.shape[0]):
                worst = max(worst, float(np.abs(_dot(frame.nu1[a], N[b])[valid]).max()))
    return worst


def identity_residual(nu1: np.ndarray, T: np.ndarray, dirs: DirectionSet,
                      valid: np.ndarray) -> float:
    """``max_{k,i} |T_i . nu1_k - (n_k)_i|`` over valid points."""
    worst = 0.0
    for k, nk in enumerate(dirs.dirs):
        for i in range(T.shape[0]):
            worst = max(worst, float(np.abs(_dot(T[i], nu1[k])[valid] - nk[i]).max()))
    return worst


def identity_truncation(f: GridField, dirs: DirectionSet,
                        T_exact: np.ndarray | None = None) -> tuple[float, float]:
    """Residual of ``T_i . nu1_k = (n_k)_i`` and its Richardson truncation estimate.

    ``nu1`` comes from finite-difference tangents and metric.  Against the
    same tangents the identity is algebraic; against ``T_exact`` it measures
    the finite-difference error, estimated by ``|nu1_h - nu1_2h| / 15``.
    """
    h = f.grid.spacing
    n = f.n
    T, valid = _tangents(f)
    T2 = np.stack([fd_array(f.data, i + 1, h, step=2) for i in range(n)])
    for i in range(n):
        valid &= erode_axis(f.valid, i, 4)
    pairs = sym_pairs(n)
    g1 = np.stack([_dot(T[i], T[j]) for i, j in pairs])
    g2 = np.stack([_dot(T2[i], T2[j]) for i, j in pairs])
    nu_h = tangent_vectors(T, g1, dirs, valid)
    nu_2h = tangent_vectors(T2, g2, dirs, valid)
    ref = T if T_exact is None else T_exact
    res = identity_residual(nu_h, ref, dirs, valid)
    est = 0.0
    for k in range(dirs.K):
        for i in range(n):
            est = max(est, float(np.abs(_dot(ref[i], nu_h[k] - nu_2h[k])[valid]).max()) / 15.0)
    return res, est
