"""Oscillatory perturbations and their metric error ledgers.

Two families are supported.  ``spiral`` uses two normal fields per direction
at one frequency.  ``strain`` pairs one normal field with a tangent-derived
field ``nu1`` (``d_i f . nu1_k = (n_k)_i``) oscillating at twice the frequency.

Every ledger term is stored unsymmetrized and divided by ``delta``, so that

    pullback(f + w) = pullback(f) + delta * ledger.total()

holds up to the finite-difference error of the left-hand side.  Expanding
``d_i w . d_j w`` over ordered pairs of directions produces each mixed term
together with its transpose, hence the ``2 sym`` weights in ``total``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .decomp import CoefficientField
from .errors import LedgerMismatch, ResolutionError
from .frame import DirectionSet, FrameField, _tangents
from .grid import GridField, GridSpec, erode_axis, fd_array, sym_pairs

VARIANTS = ("spiral", "strain")
RESOLUTION = 20.0
IDENTITY_TOL = 1e-10

SPIRAL_TERMS = ("M", "L", "N", "R2", "R3", "R4", "R5", "R6")
STRAIN_TERMS = ("M", "Mlin", "Mquad", "L", "N", "R0", "R1", "R2", "R3", "R4", "R5", "R6", "R7")
# terms entering the metric as 2 sym(.)
_DOUBLED = ("L", "N", "R0", "R4", "R5", "R6", "R7")


def check_resolution(spacing: float, lam: float, variant: str) -> None:
    """Require ``spacing <= 1/(20 f)`` at the highest frequency ``f`` in use."""
    top = 2.0 * lam if variant == "strain" else lam
    if spacing > 1.0 / (RESOLUTION * top) * (1 + 1e-12):
        raise ResolutionError(
            f"spacing {spacing:.3g} exceeds 1/(20*{top:.4g}) = {1 / (RESOLUTION * top):.3g}")


def phases(grid: GridSpec, dirs: DirectionSet, lam: float) -> np.ndarray:
    """``lam * (x - center) . n_k`` with offsets built from integer indices, ``(K, *shape)``."""
    off = []
    for i in range(grid.n):
        shp = [1] * grid.n
        shp[i] = grid.shape[i]
        idx = grid.start[i] + np.arange(grid.shape[i]) - 0.5 * (grid.points_per_axis - 1)
        off.append((idx * grid.spacing).reshape(shp))
    return np.stack([lam * sum(nk[i] * off[i] for i in range(grid.n)) * np.ones(grid.shape)
                     for nk in dirs.dirs])


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Contract the leading vector axis."""
    return np.einsum("m...,m...->...", a, b)


def _gram(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``(X_i . Y_j)`` for stacks ``X, Y`` of shape ``(n, m, ...)``."""
    return np.einsum("im...,jm...->ij...", X, Y)


def _sym2(T: np.ndarray) -> np.ndarray:
    return T + np.swapaxes(T, 0, 1)


def _pack(T: np.ndarray) -> np.ndarray:
    """Symmetric part of ``(n, n, ...)`` in packed storage."""
    return np.stack([0.5 * (T[i, j] + T[j, i]) for i, j in sym_pairs(T.shape[0])])


pack = _pack


def unpack(P: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((n, n) + P.shape[1:])
    for c, (i, j) in enumerate(sym_pairs(n)):
        out[i, j] = out[j, i] = P[c]
    return out


@dataclass(eq=False)
class Geometry:
    """A-independent data of one stage on a grid window.

    Attributes
    ----------
    T : ndarray, shape (n, m, ...)
        Tangent vectors of the mollified map.
    nu1, nu2 : ndarray, shape (K, m, ...)
    dnu1, dnu2 : ndarray, shape (n, K, m, ...)
        First derivatives of the frame fields.
    theta : ndarray, shape (K, ...)
        Phases ``lam * (x - center) . n_k``.
    valid : ndarray of bool
        Points where all of the above are defined.
    """

    variant: str
    dirs: DirectionSet
    lam: float
    delta: float
    spacing: float
    T: np.ndarray
    nu1: np.ndarray
    nu2: np.ndarray
    dnu1: np.ndarray
    dnu2: np.ndarray
    theta: np.ndarray
    valid: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.T.shape[0]

    @property
    def K(self) -> int:
        return self.dirs.K

    def memo(self, key: str, build):
        """Coefficient-independent intermediate, computed once per window."""
        if key not in self.cache:
            self.cache[key] = build()
        return self.cache[key]

    def trig(self) -> dict[str, np.ndarray]:
        return self.memo("trig", self._trig)

    def _trig(self) -> dict[str, np.ndarray]:
        th = self.theta
        out = {"s": np.sin(th), "c": np.cos(th)}
        if self.variant == "strain":
            out["S2"] = np.sin(2 * th)
            out["C2"] = np.cos(2 * th)
        return out


def geometry(frames: FrameField, f_ell: GridField, dirs: DirectionSet, lam: float,
             delta: float, step: int = 1) -> Geometry:
    """Differentiate the frames and attach phases.

    ``step`` selects the finite-difference stride (2 gives the coarse
    estimate used for truncation checks).
    """
    variant = "spiral" if frames.variant == "spiral" else "strain"
    if frames.nu1 is None:
        raise ValueError("frames carry no nu1 family")
    h = f_ell.grid.spacing
    n = f_ell.n
    if step == 1:
        T, valid = _tangents(f_ell)
    else:
        T = np.stack([fd_array(f_ell.data, i + 1, h, step) for i in range(n)])
        valid = f_ell.valid
        for i in range(n):
            valid = valid & erode_axis(f_ell.valid, i, 2 * step)
    valid = valid & frames.valid
    dv = valid.copy()
    for i in range(n):
        dv &= erode_axis(valid, i, 2 * step)
    dnu1 = np.stack([fd_array(frames.nu1, i + 2, h, step) for i in range(n)])
    dnu2 = np.stack([fd_array(frames.nu2, i + 2, h, step) for i in range(n)])
    return Geometry(variant, dirs, float(lam), float(delta), h, T, frames.nu1, frames.nu2,
                    dnu1, dnu2, phases(f_ell.grid, dirs, lam), dv)


# ---------------------------------------------------------------- tau tensors

def tau_tensors(geom: Geometry) -> tuple[np.ndarray, np.ndarray]:
    """Linear and bilinear coefficient tensors of the decomposition, packed.

    Returns ``tau_k (K, S, ...)`` and ``tau_kk (K, K, S, ...)`` such that the
    part of the normalised metric quadratic-or-less in ``A`` and free of
    derivatives of ``A`` equals
    ``sum A_k^2 n_k n_k + sum A_k tau_k + sum A_k A_k' tau_kk'``.
    """
    tr = geom.trig()
    s, c = tr["s"], tr["c"]
    lam, d12 = geom.lam, math.sqrt(geom.delta)
    dirs = geom.dirs.dirs
    K, n = geom.K, geom.n
    tk, tkk = [], []
    if geom.variant == "spiral":
        Dn = s[None, :, None] * geom.dnu1 + c[None, :, None] * geom.dnu2
        V = c[:, None] * geom.nu1 - s[:, None] * geom.nu2
        for k in range(K):
            tk.append(_pack(_sym2(_gram(geom.T, Dn[:, k]))) / (lam * d12))
            row = []
            for l in range(K):
                DV = np.einsum("im...,m...->i...", Dn[:, k], V[l])
                nl = dirs[l].reshape((1, n) + (1,) * DV[0].ndim)
                row.append(_pack(_sym2(DV[:, None] * nl)) / lam)
            tkk.append(np.stack(row))
    else:
        S2 = tr["S2"]
        r2 = math.sqrt(2.0)
        for k in range(K):
            tk.append(_pack(_sym2(_gram(geom.T, r2 * c[k] * geom.dnu2[:, k]))) / (lam * d12))
            row = []
            for l in range(K):
                D2 = r2 * c[k] * geom.dnu2[:, k]
                Y2 = -r2 * s[l] * geom.nu2[l]
                DY = np.einsum("im...,m...->i...", D2, Y2)
                nl = dirs[l].reshape((1, n) + (1,) * DY[0].ndim)
                t = _sym2(DY[:, None] * nl) / lam
                if l == k:
                    t = t + _sym2(_gram(geom.T, geom.dnu1[:, k]) * (0.25 * S2[k])) / lam
                row.append(_pack(t))
            tkk.append(np.stack(row))
    return np.stack(tk) * geom.valid, np.stack(tkk) * geom.valid


# ---------------------------------------------------------------- perturbation

def perturbation(geom: Geometry, A: np.ndarray) -> np.ndarray:
    """``w`` as an ``(m, ...)`` array."""
    tr = geom.trig()
    lam, d12 = geom.lam, math.sqrt(geom.delta)
    w = np.zeros(geom.nu2.shape[1:])
    for k in range(geom.K):
        if geom.variant == "spiral":
            w += (d12 * A[k] / lam) * (tr["s"][k] * geom.nu1[k] + tr["c"][k] * geom.nu2[k])
        else:
            w += (geom.delta * A[k] ** 2 / (4 * lam)) * tr["S2"][k] * geom.nu1[k]
            w += (d12 * math.sqrt(2.0) * A[k] / lam) * tr["c"][k] * geom.nu2[k]
    return w


def coefficient_gradient(A: np.ndarray, spacing: float, valid: np.ndarray,
                         step: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """``dA (n, K, ...)`` and the eroded validity mask."""
    n = valid.ndim
    dA = np.stack([fd_array(A, i + 1, spacing, step) for i in range(n)])
    v = valid.copy()
    for i in range(n):
        v &= erode_axis(valid, i, 2 * step)
    return dA, v


# ---------------------------------------------------------------- ledger terms

def _spiral_terms(geom: Geometry, A: np.ndarray, dA: np.ndarray) -> tuple[dict, dict]:
    tr = geom.trig()
    s, c = tr["s"], tr["c"]
    lam, d12 = geom.lam, math.sqrt(geom.delta)
    dirs = geom.dirs.dirs
    n, K = geom.n, geom.K
    bshape = (1,) * s[0].ndim

    def frame_data():
        U = s[:, None] * geom.nu1 + c[:, None] * geom.nu2
        V = c[:, None] * geom.nu1 - s[:, None] * geom.nu2
        Dn = s[None, :, None] * geom.dnu1 + c[None, :, None] * geom.dnu2
        return (U, V, Dn, np.einsum("im...,jkm...->ijk...", geom.T, Dn),
                np.einsum("im...,km...->ik...", geom.T, V), np.einsum("im...,km...->ik...", geom.T, U))
    U, V, Dn, TD, TV, TU = geom.memo("spiral", frame_data)
    nk = lambda k, i: dirs[k][i]
    Vn = np.stack([sum(nk(k, i) * A[k] * V[k] for k in range(K)) for i in range(n)])
    H = np.stack([sum(dA[i, k] * U[k] for k in range(K)) for i in range(n)]) / lam
    G = np.einsum("k...,ikm...->im...", A, Dn) / lam
    t = {
        "M": _gram(Vn, Vn),
        "R2": _gram(G, G),
        "R3": _gram(H, H),
        "R4": _gram(G, H),
        "R5": _gram(G, Vn),
        "R6": _gram(H, Vn),
    }
    t["L"] = np.einsum("k...,ijk...->ij...", A, TD) / (lam * d12)
    N = np.zeros((n, n) + s[0].shape)
    for k in range(K):
        nkj = dirs[k].reshape((1, n) + bshape)
        N += (A[k] * TV[:, k])[:, None] * nkj + TU[:, k][:, None] * dA[:, k][None] / lam
    t["N"] = N / d12
    return t, {"dw": (Vn + H + G) * d12}


def _strain_terms(geom: Geometry, A: np.ndarray, dA: np.ndarray) -> tuple[dict, dict]:
    tr = geom.trig()
    s, c, S2, C2 = tr["s"], tr["c"], tr["S2"], tr["C2"]
    lam, d12 = geom.lam, math.sqrt(geom.delta)
    r2 = math.sqrt(2.0)
    dirs = geom.dirs.dirs
    n, K = geom.n, geom.K
    A2 = A * A
    nu1, nu2 = geom.nu1, geom.nu2

    Y1 = (0.5 * d12) * (A2 * C2)[:, None] * nu1
    Y2 = (-r2) * (A * s)[:, None] * nu2
    Y1n = np.stack([sum(dirs[k][i] * Y1[k] for k in range(K)) for i in range(n)])
    Y2n = np.stack([sum(dirs[k][i] * Y2[k] for k in range(K)) for i in range(n)])
    Z1 = np.stack([sum((0.5 * d12) * (A[k] * dA[i, k] * S2[k]) * nu1[k] for k in range(K))
                   for i in range(n)]) / lam
    Z2 = np.stack([sum(r2 * (dA[i, k] * c[k]) * nu2[k] for k in range(K)) for i in range(n)]) / lam
    D1 = np.einsum("k...,ikm...->im...", (0.25 * d12) * A2 * S2, geom.dnu1) / lam
    D2 = np.einsum("k...,ikm...->im...", r2 * A * c, geom.dnu2) / lam
    Yn, Zs, Ds = Y1n + Y2n, Z1 + Z2, D1 + D2

    T1, T2, TD1, TD2 = geom.memo("strain", lambda: (
        np.einsum("im...,km...->ik...", geom.T, nu1), np.einsum("im...,km...->ik...", geom.T, nu2),
        np.einsum("im...,jkm...->ijk...", geom.T, geom.dnu1),
        np.einsum("im...,jkm...->ijk...", geom.T, geom.dnu2)))
    bshape = (1,) * s[0].ndim
    Mlin = np.zeros((n, n) + s[0].shape)
    R7 = np.zeros_like(Mlin)
    N = np.zeros_like(Mlin)
    for k in range(K):
        nkj = dirs[k].reshape((1, n) + bshape)
        Mlin += (A2[k] * C2[k] * T1[:, k])[:, None] * nkj
        R7 += T1[:, k][:, None] * (A[k] * S2[k] * dA[:, k])[None] / (2 * lam)
        N += (-r2 * A[k] * s[k] * T2[:, k])[:, None] * nkj
        N += T2[:, k][:, None] * (r2 * c[k] * dA[:, k])[None] / lam
    L = (np.einsum("k...,ijk...->ij...", 0.25 * A2 * S2, TD1)
         + np.einsum("k...,ijk...->ij...", r2 * A * c / d12, TD2)) / lam

    Mquad = _gram(Y2n, Y2n)
    t = {
        "Mlin": Mlin,
        "Mquad": Mquad,
        "M": 0.5 * _sym2(Mlin) + Mquad,
        "L": L,
        "N": N / d12,
        "R0": _gram(Y1n, Y2n),
        "R1": _gram(Y1n, Y1n),
        "R2": _gram(Ds, Ds),
        "R3": _gram(Zs, Zs),
        "R4": _gram(Ds, Zs),
        "R5": _gram(Ds, Yn),
        "R6": _gram(Zs, Yn),
        "R7": R7,
    }
    bil = {
        "R2": _gram(D2, D2),
        "R3": _gram(Z2, Z2),
        "R4": _gram(D2, Z2),
        "R5": _gram(D2, Y2n),
        "R6": _gram(Z2, Y2n),
    }
    return t, {"bilinear": bil, "dw": (Yn + Zs + Ds) * d12}


def ledger_terms(geom: Geometry, A: np.ndarray, dA: np.ndarray) -> tuple[dict, dict]:
    """All normalised ledger terms as ``(n, n, ...)`` arrays.

    Returns ``(terms, extra)``; for the strain family ``extra['bilinear']``
    holds the parts of ``R2..R6`` that are bilinear in ``A``.  ``extra['dw']``
    is ``d_i w`` assembled from its product-rule pieces.
    """
    if geom.variant == "spiral":
        return _spiral_terms(geom, A, dA)
    return _strain_terms(geom, A, dA)


def total_from(terms: dict[str, np.ndarray], variant: str) -> np.ndarray:
    """Normalised metric increment: plain terms plus ``2 sym`` of the mixed ones."""
    plain = ("M", "R2", "R3") if variant == "spiral" else ("M", "R1", "R2", "R3")
    out = sum(terms[k] for k in plain)
    for k in _DOUBLED:
        if k in terms:
            out = out + _sym2(terms[k])
    return out


def b_part(terms: dict[str, np.ndarray], extra: dict, variant: str) -> np.ndarray:
    """Part absorbed by the pointwise decomposition: ``M + 2 sym(L + R5)`` (bilinear ``R5`` for strain)."""
    r5 = terms["R5"] if variant == "spiral" else extra["bilinear"]["R5"]
    return terms["M"] + _sym2(terms["L"] + r5)


def iterated_part(terms: dict[str, np.ndarray], extra: dict, variant: str,
                  mode: str = "bilinear") -> np.ndarray:
    """Error fed back through the coefficient iteration.

    ``'bilinear'``: ``R2 + R3 + 2 sym R4`` (bilinear parts for strain).
    ``'full'``: everything outside ``b_part``.
    """
    if mode == "full":
        return total_from(terms, variant) - b_part(terms, extra, variant)
    src = terms if variant == "spiral" else extra["bilinear"]
    return src["R2"] + src["R3"] + _sym2(src["R4"])


# ---------------------------------------------------------------- containers

@dataclass
class TermNorm:
    sup: float = 0.0
    dsup: float = 0.0

    @property
    def norm0(self) -> float:
        return self.sup

    @property
    def norm1(self) -> float:
        return self.sup + self.dsup

    def merge(self, other: "TermNorm") -> None:
        self.sup = max(self.sup, other.sup)
        self.dsup = max(self.dsup, other.dsup)


def term_norm(T: np.ndarray, valid: np.ndarray, spacing: float,
              interior: np.ndarray | None = None) -> TermNorm:
    """Max-abs entry and max-abs first derivative of a ``(n, n, ...)`` field."""
    n = valid.ndim
    mask = valid if interior is None else valid & interior
    sup = float(np.abs(T[:, :, mask]).max()) if mask.any() else 0.0
    dv = valid.copy()
    for i in range(n):
        dv &= erode_axis(valid, i, 2)
    if interior is not None:
        dv &= interior
    dsup = 0.0
    if dv.any():
        for i in range(n):
            dsup = max(dsup, float(np.abs(fd_array(T, i + 2, spacing)[:, :, dv]).max()))
    return TermNorm(sup, dsup)


@dataclass(eq=False)
class ErrorLedger:
    """Normalised error terms of one stage.

    ``terms`` maps names to ``(n, n, *shape)`` arrays divided by ``delta``;
    ``L``, ``R0`` and ``R4..R7`` are unsymmetrized.  ``Rtilde`` holds the
    trilinear and quadrilinear parts (strain only).  ``E`` is the residual
    ``h - b(A) - R(A)`` when a target was supplied.
    """

    variant: str
    delta: float
    lam: float
    valid: np.ndarray
    terms: dict[str, np.ndarray]
    bilinear: dict[str, np.ndarray] = field(default_factory=dict)
    E: np.ndarray | None = None
    norms: dict[str, TermNorm] = field(default_factory=dict)
    checks: dict[str, float] = field(default_factory=dict)

    @property
    def L(self) -> np.ndarray:
        return self.terms["L"]

    @property
    def M(self) -> np.ndarray:
        return self.terms["M"]

    @property
    def R(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.terms.items() if k.startswith("R")}

    @property
    def Rtilde(self) -> dict[str, np.ndarray]:
        out = {k: self.terms[k] - v for k, v in self.bilinear.items()}
        if self.variant == "strain":
            out["R0"] = self.terms["R0"]
            out["R1"] = self.terms["R1"]
        return out

    def total(self) -> np.ndarray:
        return total_from(self.terms, self.variant)

    def cancellation(self) -> np.ndarray:
        """``sym(R6 + 2 R7)`` (strain) or ``R6`` (spiral)."""
        if self.variant == "spiral":
            return self.terms["R6"]
        return 0.5 * _sym2(self.terms["R6"] + 2 * self.terms["R7"])

    def table(self, bounds: dict[str, float] | None = None) -> list[dict]:
        """Rows ``term, norm0, norm1, bound, ratio``."""
        bounds = bounds or {}
        rows = []
        for name, tn in self.norms.items():
            b = bounds.get(name)
            ratio = None if not b else tn.norm0 / b
            rows.append({"term": name, "norm0": tn.norm0, "norm1": tn.norm1,
                         "bound": b, "ratio": ratio})
        return rows


def write_ledger_csv(path, rows: list[dict]) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["term", "norm0", "norm1", "bound", "ratio"])
        wr.writeheader()
        for r in rows:
            wr.writerow({k: ("" if r[k] is None else r[k]) for k in wr.fieldnames})


def _max(x: np.ndarray, mask: np.ndarray) -> float:
    return float(np.abs(x[..., mask]).max()) if mask.any() else 0.0


def evaluate_ledger(geom: Geometry, A: np.ndarray, *, target: np.ndarray | None = None,
                    mode: str = "bilinear", interior: np.ndarray | None = None,
                    coarse: Geometry | None = None) -> tuple[ErrorLedger, np.ndarray]:
    """Evaluate every term for coefficients ``A`` on a window.

    Parameters
    ----------
    target : ndarray, shape (S, ...), optional
        Packed ``h``; enables the residual ``E``.
    interior : ndarray of bool, optional
        Restricts norms and checks (row-block drivers pass the block core).
    coarse : Geometry, optional
        Same window differentiated with stride 2; gives the truncation
        estimate for the strain ``R7`` identity.

    Returns
    -------
    ledger : ErrorLedger
    dw : ndarray, shape (n, m, ...)
        ``d_i w`` from the product rule.
    """
    dA, valid = coefficient_gradient(A, geom.spacing, geom.valid)
    terms, extra = ledger_terms(geom, A, dA)
    core = valid if interior is None else valid & interior
    led = ErrorLedger(geom.variant, geom.delta, geom.lam, valid, terms,
                      extra.get("bilinear", {}))
    if target is not None:
        E = target - _pack(b_part(terms, extra, geom.variant)
                           + iterated_part(terms, extra, geom.variant, mode))
        led.E = E * valid
    for name in terms:
        led.norms[name] = term_norm(terms[name], valid, geom.spacing, interior)
    for name, v in led.Rtilde.items():
        led.norms[f"{name}~"] = term_norm(v, valid, geom.spacing, interior)
    canc = led.cancellation()
    led.norms["cancel"] = term_norm(canc, valid, geom.spacing, interior)

    total = led.total()
    scale = _max(total, core)
    led.checks["scale"] = scale
    dw = extra["dw"]
    quad = _gram(dw, dw) / geom.delta
    if geom.variant == "spiral":
        rhs = terms["M"] + terms["R2"] + terms["R3"] + _sym2(terms["R4"] + terms["R5"] + terms["R6"])
        led.checks["R6"] = _max(terms["R6"], core)
    else:
        rhs = (terms["Mquad"] + terms["R1"] + terms["R2"] + terms["R3"]
               + _sym2(terms["R0"] + terms["R4"] + terms["R5"] + terms["R6"]))
        led.checks["R0"] = _max(terms["R0"], core)
        ident = 2 * terms["R7"] + np.swapaxes(led.bilinear["R6"], 0, 1)
        led.checks["R7_identity"] = _max(ident, core)
        if coarse is not None:
            cA, cv = coefficient_gradient(A, geom.spacing, coarse.valid, step=2)
            ct, _ = ledger_terms(coarse, A, cA)
            m = core & cv
            led.checks["R7_truncation"] = _max(terms["R7"] - ct["R7"], m) / 15.0
    led.checks["quadratic_identity"] = _max(quad - rhs, core)
    led.checks["first_sum"] = _max(terms["N"], core)
    return led, dw


def master_residual(f_ell: GridField, w: np.ndarray, ledger: ErrorLedger,
                    interior: np.ndarray | None = None) -> tuple[float, float]:
    """``max |pullback(f + w) - pullback(f) - delta total|`` and ``max |delta total|``.

    Both pullbacks use the package finite differences.
    """
    h = f_ell.grid.spacing
    n = f_ell.n
    valid = ledger.valid.copy()
    for i in range(n):
        valid &= erode_axis(ledger.valid, i, 2)
    if interior is not None:
        valid &= interior
    Tf = np.stack([fd_array(f_ell.data, i + 1, h) for i in range(n)])
    Tw = np.stack([fd_array(w, i + 1, h) for i in range(n)])
    diff = _gram(Tf, Tw)
    diff = _sym2(diff) + _gram(Tw, Tw)
    dt = ledger.delta * ledger.total()
    return _max(diff - dt, valid), _max(dt, valid)


def check_ledger(ledger: ErrorLedger, tol: float = IDENTITY_TOL, fd_factor: float = 10.0) -> None:
    """Raise ``LedgerMismatch`` when an exact identity fails."""
    c = ledger.checks
    scale = max(c.get("scale", 0.0), 1e-300)
    bad = []
    if c.get("quadratic_identity", 0.0) > tol * scale:
        bad.append(f"quadratic expansion off by {c['quadratic_identity']:.3g}")
    if ledger.variant == "spiral" and c.get("R6", 0.0) > tol * scale:
        bad.append(f"R6 = {c['R6']:.3g} is not zero")
    if ledger.variant == "strain":
        if c.get("R0", 0.0) > tol * scale:
            bad.append(f"R0 = {c['R0']:.3g} is not zero")
        lim = max(fd_factor * c.get("R7_truncation", 0.0), tol * scale)
        if c.get("R7_identity", 0.0) > lim:
            bad.append(f"R7 identity off by {c['R7_identity']:.3g} (limit {lim:.3g})")
    if bad:
        raise LedgerMismatch("; ".join(bad))


# ---------------------------------------------------------------- grid-level API

@dataclass(eq=False)
class Perturbation:
    """Map increment ``w`` with the coefficients that produced it."""

    w: GridField
    A: CoefficientField
    lam: float
    delta: float
    variant: str = "spiral"

    def constants(self) -> dict[str, float]:
        """``C_r = ||w||_r / (delta^(1/2) lam^(r-1))`` for ``r = 0, 1, 2``."""
        from .grid import norm
        d12 = math.sqrt(self.delta)
        return {f"C{r}": norm(self.w, r) / (d12 * self.lam ** (r - 1)) for r in (0, 1, 2)}


def _build(A: CoefficientField, frames: FrameField, f_ell: GridField, dirs: DirectionSet,
           lam: float, delta: float, variant: str) -> Perturbation:
    check_resolution(f_ell.grid.spacing, lam, variant)
    geom = geometry(frames, f_ell, dirs, lam, delta)
    valid = frames.valid & A.valid
    w = perturbation(geom, A.A) * valid
    return Perturbation(GridField(f_ell.grid, w, "map", valid), A, lam, delta, variant)


def build_spiral(A: CoefficientField, frames: FrameField, f_ell: GridField, dirs: DirectionSet,
                 lam: float, delta: float) -> Perturbation:
    """``w = sum_k delta^(1/2) A_k / lam (sin nu1_k + cos nu2_k)`` at phase ``lam x.n_k``."""
    if frames.variant != "spiral":
        raise ValueError("spiral perturbation needs spiral frames")
    return _build(A, frames, f_ell, dirs, lam, delta, "spiral")


def build_strain(A: CoefficientField, frames: FrameField, f_ell: GridField, dirs: DirectionSet,
                 lam: float, delta: float) -> Perturbation:
    """``w = sum_k delta A_k^2/(4 lam) sin(2 ph) nu1_k + delta^(1/2) sqrt2 A_k/lam cos(ph) nu2_k``."""
    if frames.variant != "strain":
        raise ValueError("strain perturbation needs strain frames")
    return _build(A, frames, f_ell, dirs, lam, delta, "strain")


def tau_tensors_spiral(f_ell: GridField, frames: FrameField, dirs: DirectionSet, lam: float,
                       delta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(tau_k, tau_kk, valid)`` for spiral frames."""
    geom = geometry(frames, f_ell, dirs, lam, delta)
    return (*tau_tensors(geom), geom.valid)


def tau_tensors_strain(f_ell: GridField, frames: FrameField, dirs: DirectionSet, lam: float,
                       delta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(tau_k, tau_kk, valid)`` for strain frames."""
    geom = geometry(frames, f_ell, dirs, lam, delta)
    return (*tau_tensors(geom), geom.valid)


def ledger(f_ell: GridField, A: CoefficientField, frames: FrameField, dirs: DirectionSet,
           lam: float, delta: float, variant: str | None = None, *,
           target: GridField | None = None, check: bool = True) -> ErrorLedger:
    """Full ledger on a whole grid with identity checks.

    The master reconstruction residual is stored under ``checks['master']``
    next to ``checks['master_scale']``.
    """
    variant = variant or ("spiral" if frames.variant == "spiral" else "strain")
    geom = geometry(frames, f_ell, dirs, lam, delta)
    coarse = geometry(frames, f_ell, dirs, lam, delta, step=2) if variant == "strain" else None
    led, _ = evaluate_ledger(geom, A.A, target=None if target is None else target.data,
                             coarse=coarse)
    w = perturbation(geom, A.A) * (frames.valid & A.valid)
    led.valid &= A.valid
    res, sc = master_residual(f_ell, w, led)
    led.checks["master"] = res
    led.checks["master_scale"] = sc
    if check:
        check_ledger(led)
    return led
