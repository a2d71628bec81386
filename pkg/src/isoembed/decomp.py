"""Pointwise decomposition of symmetric tensors along fixed directions.

Solves ``sum_k A_k^2 n_k n_k^T + sum_k A_k t_k + sum_{k,k'} A_k A_k' t_kk' = tau``
for positive ``A`` at every grid point with damped Newton.  Tensors are
stored packed (upper triangle), so the system is square: ``K = n(n+1)/2``
unknowns against ``K`` packed entries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConeBoundaryError, GuardViolation, IllConditionedError, SolverFailure
from .frame import DirectionSet
from .grid import GridField, GridSpec, sym_pairs

log = logging.getLogger(__name__)

SIGMA1 = 0.2
FLOOR = 0.05
MAX_ITER = 50
TOL = 1e-12
COND_LIMIT = 1e8
CONTINUATION = 8


def identity_packed(n: int) -> np.ndarray:
    return np.array([1.0 if i == j else 0.0 for i, j in sym_pairs(n)])


def _flat(a: np.ndarray | None, lead: int) -> np.ndarray | None:
    if a is None:
        return None
    a = np.asarray(a, float)
    return a.reshape(a.shape[:lead] + (-1,))


def evaluate_b(A: np.ndarray, P: np.ndarray, tau_k: np.ndarray | None,
               tau_kk: np.ndarray | None) -> np.ndarray:
    """``sum A_k^2 P_k + sum A_k t_k + sum A_k A_k' t_kk'`` in packed form.

    Shapes: ``A (K, ...)``, ``P (S, K)``, ``tau_k (K, S, ...)``,
    ``tau_kk (K, K, S, ...)``.
    """
    out = np.einsum("sk,k...->s...", P, A * A)
    if tau_k is not None:
        out += np.einsum("k...,ks...->s...", A, tau_k)
    if tau_kk is not None:
        K = A.shape[0]
        for k in range(K):
            for l in range(K):
                out += (A[k] * A[l]) * tau_kk[k, l]
    return out


def jacobian(A: np.ndarray, P: np.ndarray, tau_k: np.ndarray | None,
             tau_kk: np.ndarray | None) -> np.ndarray:
    """``dG/dA`` with shape ``(S, K, ...)``."""
    J = 2.0 * P.reshape(P.shape + (1,) * (A.ndim - 1)) * A[None]
    if tau_k is not None:
        J += np.swapaxes(tau_k, 0, 1)
    if tau_kk is not None:
        K = A.shape[0]
        for j in range(K):
            for l in range(K):
                J[:, j] += (tau_kk[j, l] + tau_kk[l, j]) * A[l]
    return J


def baseline_solve(tau: np.ndarray, dirs: DirectionSet, floor: float = FLOOR) -> np.ndarray:
    """Linear solve ``sum c_k n_k n_k^T = tau``; returns ``A = sqrt(c)``.

    Raises
    ------
    ConeBoundaryError
        Some ``c_k < floor^2``.
    """
    tau = np.asarray(tau, float)
    P = dirs.projectors()
    c = np.linalg.solve(P, tau.reshape(tau.shape[0], -1)).reshape(tau.shape)
    if np.any(c < floor * floor):
        raise ConeBoundaryError(f"coefficient {c.min():.3g} below floor^2 {floor * floor:.3g}")
    return np.sqrt(c)


def guard_value(tau: np.ndarray, tau_k: np.ndarray | None, tau_kk: np.ndarray | None,
                n: int) -> np.ndarray:
    """Pointwise size of the problem after homogeneous normalisation.

    With ``s^2 = tr(tau)/n`` the problem ``(tau/s^2, t_k/s, t_kk')`` has root
    ``A/s``; the guard is ``|tau/s^2 - Id| + sum |t_k|/s + sum |t_kk'|``
    with max-abs entry norms.
    """
    tr = sum(tau[c] for c, (i, j) in enumerate(sym_pairs(n)) if i == j)
    s2 = np.maximum(tr / n, 1e-300)
    ident = identity_packed(n).reshape((-1,) + (1,) * (tau.ndim - 1))
    val = np.abs(tau / s2 - ident).max(axis=0)
    if tau_k is not None:
        val = val + np.abs(tau_k).max(axis=1).sum(axis=0) / np.sqrt(s2)
    if tau_kk is not None:
        val = val + np.abs(tau_kk).max(axis=2).sum(axis=(0, 1))
    return val


@dataclass
class NewtonResult:
    A: np.ndarray
    iterations: int
    residual: np.ndarray
    condition: np.ndarray
    guard: np.ndarray


def _inv3(J: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjugate inverse of ``(P, 3, 3)``; same singularity rule as ``_inv_small``."""
    a = [[J[:, i, j] for j in range(3)] for i in range(3)]
    cof = np.empty_like(J)
    for i in range(3):
        for j in range(3):
            i1, i2 = (i + 1) % 3, (i + 2) % 3
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            cof[:, j, i] = a[i1][j1] * a[i2][j2] - a[i1][j2] * a[i2][j1]
    det = (a[0][0] * cof[:, 0, 0] + a[0][1] * cof[:, 1, 0] + a[0][2] * cof[:, 2, 0])
    scale = np.abs(J).max(axis=(1, 2)) ** 3
    bad = ~(np.abs(det) > 1e-14 * np.maximum(scale, 1e-300))
    inv = cof / np.where(bad, 1.0, det)[:, None, None]
    inv[bad] = np.eye(3)
    return inv, bad


def _inv_small(J: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched inverse of ``(P, K, K)``; singular entries flagged, identity used."""
    if J.shape[1] == 3:
        return _inv3(J)
    det = np.linalg.det(J)
    scale = np.abs(J).max(axis=(1, 2)) ** J.shape[1]
    bad = ~(np.abs(det) > 1e-14 * np.maximum(scale, 1e-300))
    if bad.any():
        J = J.copy()
        J[bad] = np.eye(J.shape[1])
    return np.linalg.inv(J), bad


def _damped(A: np.ndarray, t: np.ndarray, tk: np.ndarray | None, tkk: np.ndarray | None,
            P: np.ndarray, floor: float, thresh: np.ndarray, max_iter: int
            ) -> tuple[np.ndarray, np.ndarray, int]:
    """Newton with backtracking on the max residual; returns ``(A, residual, iterations)``."""
    A = A.copy()
    Np = t.shape[1]

    def resid(Aa, idx):
        sub = lambda a: None if a is None else a[..., idx]
        G = evaluate_b(Aa, P, sub(tk), sub(tkk)) - t[:, idx]
        return G, np.abs(G).max(axis=0)

    G, res = resid(A, np.arange(Np))
    iters = 0
    for it in range(max_iter):
        act = np.flatnonzero(res > thresh)
        if act.size == 0:
            break
        iters = it + 1
        sub = lambda a: None if a is None else a[..., act]
        Aa = A[:, act]
        J = np.moveaxis(jacobian(Aa, P, sub(tk), sub(tkk)), -1, 0)
        Jinv, _ = _inv_small(J)
        step = -np.einsum("pkj,jp->kp", Jinv, G[:, act])
        tt = np.ones(act.size)
        r0 = res[act]
        accepted = np.zeros(act.size, bool)
        newA = Aa.copy()
        newG = G[:, act].copy()
        newr = r0.copy()
        pend = np.arange(act.size)
        for _ in range(60):
            trial = Aa[:, pend] + tt[pend] * step[:, pend]
            Gt, rt = resid(trial, act[pend])
            ok = (trial.min(axis=0) >= floor) & (rt < r0[pend])
            good = pend[ok]
            newA[:, good] = trial[:, ok]
            newG[:, good] = Gt[:, ok]
            newr[good] = rt[ok]
            accepted[good] = True
            pend = pend[~ok]
            if pend.size == 0:
                break
            tt[pend] *= 0.5
        A[:, act] = newA
        G[:, act] = newG
        res[act] = newr
        if not accepted.any():
            break
    return A, res, iters


def newton_decompose(tau: np.ndarray, tau_k: np.ndarray | None, tau_kk: np.ndarray | None,
                     dirs: DirectionSet, seed: np.ndarray | None = None, *,
                     floor: float = FLOOR, sigma1: float = SIGMA1, guard: str = "raise",
                     max_iter: int = MAX_ITER, tol: float = TOL, cond_limit: float = COND_LIMIT,
                     coords: np.ndarray | None = None) -> NewtonResult:
    """Damped Newton solve at a batch of points.

    Parameters
    ----------
    tau : ndarray, shape (S, ...)
    tau_k : ndarray, shape (K, S, ...), optional
    tau_kk : ndarray, shape (K, K, S, ...), optional
    seed : ndarray, shape (K, ...), optional
        Starting coefficients; defaults to the baseline solve of ``tau``.
    guard : {'raise', 'warn', 'off'}
        Policy when the normalised problem exceeds ``sigma1``.
    coords : ndarray, shape (n, ...), optional
        Point coordinates used in failure messages.

    Returns
    -------
    NewtonResult
        Coefficients with the same trailing shape as ``tau``.
    """
    shape = tau.shape[1:]
    K = dirs.K
    t = _flat(tau, 1)
    tk = _flat(tau_k, 2)
    tkk = _flat(tau_kk, 3)
    Np = t.shape[1]
    P = dirs.projectors()

    gval = guard_value(t, tk, tkk, dirs.n)
    if guard != "off" and Np and gval.max() > sigma1:
        msg = f"decomposition guard {gval.max():.3g} exceeds sigma1={sigma1:g}"
        if guard == "raise":
            raise GuardViolation(msg)
        log.warning(msg)

    A = baseline_solve(t, dirs, floor) if seed is None else _flat(seed, 1).copy()
    if np.any(A < floor):
        raise ConeBoundaryError("seed below the coefficient floor")
    thresh = tol * np.maximum(1.0, np.abs(t).max(axis=0))
    A, res, iters = _damped(A, t, tk, tkk, P, floor, thresh, max_iter)
    bad = np.flatnonzero(res > thresh)
    if bad.size and (tk is not None or tkk is not None):
        # continuation in the size of the perturbation tensors from the baseline
        sub = lambda a: None if a is None else a[..., bad]
        Ab = baseline_solve(t[:, bad], dirs, floor)
        for s in np.linspace(0.0, 1.0, CONTINUATION + 1)[1:]:
            sc = lambda a: None if a is None else s * a
            Ab, rb, it = _damped(Ab, t[:, bad], sc(sub(tk)), sc(sub(tkk)), P, floor,
                                 thresh[bad], max_iter)
            iters = max(iters, it)
        better = rb < res[bad]
        A[:, bad[better]] = Ab[:, better]
        res[bad[better]] = rb[better]

    failed = res > thresh
    if failed.any():
        where = ""
        if coords is not None:
            c = _flat(coords, 1)[:, np.flatnonzero(failed)[:3]]
            where = f" at points {np.round(c.T, 6).tolist()}"
        raise SolverFailure(f"Newton failed at {int(failed.sum())} points (max residual {res.max():.3g}){where}")
    if np.any(A < floor):
        raise ConeBoundaryError("coefficient crossed the floor")
    J = np.moveaxis(jacobian(A, P, tk, tkk), -1, 0)
    Jinv, bad = _inv_small(J)
    cond = np.sqrt((J ** 2).sum(axis=(1, 2)) * (Jinv ** 2).sum(axis=(1, 2)))
    cond[bad] = np.inf
    if Np and cond.max() > cond_limit:
        raise IllConditionedError(f"Jacobian condition {cond.max():.3g} exceeds {cond_limit:g}")
    return NewtonResult(A.reshape((K,) + shape), iters, res.reshape(shape),
                        cond.reshape(shape), gval.reshape(shape))


@dataclass(eq=False)
class CoefficientField:
    """Coefficients ``A_k`` on a grid window, shape ``(K, *grid.shape)``."""

    grid: GridSpec
    A: np.ndarray
    valid: np.ndarray
    floor: float = FLOOR
    guard: np.ndarray | None = None
    condition: np.ndarray | None = None

    def fields(self) -> list[GridField]:
        return [GridField(self.grid, self.A[k] * self.valid, "scalar", self.valid) for k in range(self.A.shape[0])]


def decompose_field(tau: np.ndarray, tau_k: np.ndarray | None, tau_kk: np.ndarray | None,
                    dirs: DirectionSet, grid: GridSpec, valid: np.ndarray,
                    warm: CoefficientField | np.ndarray | None = None, **opts) -> CoefficientField:
    """Pointwise solve over the valid points of a grid window.

    Invalid points get ``A = 0``.  ``opts`` are passed to ``newton_decompose``.
    """
    idx = np.flatnonzero(valid)
    pick = lambda a: None if a is None else a.reshape(a.shape[:a.ndim - grid.n] + (-1,))[..., idx]
    seed = None
    if warm is not None:
        w = warm.A if isinstance(warm, CoefficientField) else warm
        seed = pick(np.asarray(w))
    coords = pick(grid.dense_coords())
    res = newton_decompose(pick(tau), pick(tau_k), pick(tau_kk), dirs, seed, coords=coords, **opts)
    K = dirs.K
    A = np.zeros((K, grid.size))
    A[:, idx] = res.A
    gd = np.zeros(grid.size)
    gd[idx] = res.guard
    cd = np.zeros(grid.size)
    cd[idx] = res.condition
    return CoefficientField(grid, A.reshape((K,) + grid.shape), valid,
                            opts.get("floor", FLOOR), gd.reshape(grid.shape), cd.reshape(grid.shape))
