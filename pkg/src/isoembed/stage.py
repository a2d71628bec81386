"""Parameter schedule, initial data, the single stage and the multi-stage driver."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import perturb as P
from .decomp import FLOOR, SIGMA1, decompose_field, evaluate_b
from .errors import (ConfigurationError, HypothesisViolation, IsoembedError, ScheduleInfeasible,
                     StageAbort)
from .frame import DirectionSet, make_directions, spiral_frame, strain_frame
from .grid import (GridField, GridSpec, eigmin_array, erode, fd_array, holder_norm, norm, pullback,
                   sym_pairs)
from .kallen import KallenConfig, check_divergence, kallen_iterate, merge_traces
from .mollify import mollify

log = logging.getLogger(__name__)

SERIES_COLUMNS = ["q", "delta", "lambda", "ell", "defect0", "defect_beta", "w0", "w1", "w2",
                  "minEig", "C_w", "rho_kallen"]


def codimension(n: int, variant: str) -> int:
    """Normal directions needed by a variant."""
    K = n * (n + 1) // 2
    if variant == "spiral":
        return 2 * K
    if variant == "strain":
        return K
    raise ConfigurationError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class Ansatz:
    """Double exponential amplitudes and frequencies."""

    a: float
    b: float
    alpha: float
    beta: float
    epsilon: float

    @property
    def beta_star(self) -> float:
        return 1.0 / (2.0 - self.beta)

    @property
    def eps_star(self) -> float:
        return self.epsilon * self.beta_star

    def delta(self, q: int) -> float:
        return self.a ** (-2.0 * self.alpha * self.b ** (q - 1))

    def lam(self, q: int) -> float:
        return self.a ** (self.b ** q)

    def ell(self, q: int) -> float:
        """Mollification length of stage ``q``."""
        return (self.lam(q) ** (-1.0 - self.eps_star)
                * (self.delta(q + 1) / self.delta(q)) ** self.beta_star)

    def restrictions(self) -> list[str]:
        """Violated structural restrictions, by name."""
        bad = []
        if not 2 * self.alpha < 2 - self.beta:
            bad.append("2α<2−β")
        if not self.b > 1:
            bad.append("b>1")
        if not 0 < self.epsilon < 0.25:
            bad.append("0<epsilon<1/4")
        if not 0 < self.alpha < 1:
            bad.append("0<alpha<1")
        if not 0 < self.beta < 1:
            bad.append("0<beta<1")
        if not self.a > 1:
            bad.append("a>1")
        return bad


def bound_violations(ans: Ansatz, q: int, steps: int) -> list[str]:
    """Stage inequalities that fail for ``q`` with ``steps`` iteration steps."""
    ell = ans.ell(q)
    lq, lq1 = ans.lam(q), ans.lam(q + 1)
    dq, dq1, dq2 = ans.delta(q), ans.delta(q + 1), ans.delta(q + 2)
    bad = []
    if not lq * ell <= 1:
        bad.append(f"bound2: lam_q*ell <= 1 (q={q}, {lq * ell:.4g})")
    if not 1 <= lq1 * ell:
        bad.append(f"bound2: 1 <= lam_(q+1)*ell (q={q}, {lq1 * ell:.4g})")
    left = math.sqrt(dq) * lq * ell
    mid = math.sqrt(dq1) * lq1 * ell
    if not left <= mid:
        bad.append(f"bound3: delta_q^(1/2) lam_q ell <= delta_(q+1)^(1/2) lam_(q+1) ell "
                   f"(q={q}, {left:.4g} > {mid:.4g})")
    if not mid <= 1:
        bad.append(f"bound3: delta_(q+1)^(1/2) lam_(q+1) ell <= 1 (q={q}, {mid:.4g})")
    lhs = (lq1 * ell) ** (-steps)
    rhs = dq2 * lq1 ** (-ans.epsilon)
    if not lhs <= rhs:
        bad.append(f"bound4: (lam_(q+1) ell)^-steps <= delta_(q+2) lam_(q+1)^-epsilon "
                   f"(q={q}, steps={steps}, {lhs:.4g} > {rhs:.4g})")
    return bad


@dataclass(frozen=True)
class StageParams:
    q: int
    a: float
    b: float
    alpha: float
    beta: float
    epsilon: float
    delta_q: float
    delta_q1: float
    delta_q2: float
    lambda_q: float
    lambda_q1: float
    ell: float
    beta_star: float
    eps_star: float
    theta: float = 0.1
    kallen_steps: int = 5
    violations: tuple[str, ...] = ()

    @property
    def feasible(self) -> bool:
        return not self.violations

    @property
    def lam_ell(self) -> float:
        return self.lambda_q1 * self.ell

    def to_dict(self) -> dict:
        d = asdict(self)
        d["violations"] = list(self.violations)
        return d


def schedule(q: int, ansatz: Ansatz, kallen_steps: int = 5, theta: float = 0.1,
             strict: bool = True) -> StageParams:
    """Parameters of stage ``q``.

    Structural restrictions always raise.  Failed stage inequalities raise
    when ``strict``; otherwise they are listed in ``violations``.
    """
    bad = ansatz.restrictions()
    if bad:
        raise ScheduleInfeasible("infeasible parameters: " + "; ".join(bad))
    viol = bound_violations(ansatz, q, kallen_steps)
    if viol and strict:
        raise ScheduleInfeasible("infeasible schedule: " + "; ".join(viol))
    return StageParams(q, ansatz.a, ansatz.b, ansatz.alpha, ansatz.beta, ansatz.epsilon,
                       ansatz.delta(q), ansatz.delta(q + 1), ansatz.delta(q + 2),
                       ansatz.lam(q), ansatz.lam(q + 1), ansatz.ell(q), ansatz.beta_star,
                       ansatz.eps_star, theta, kallen_steps, tuple(viol))


def validate_schedule(ansatz: Ansatz, stages: int, kallen_steps: int = 5) -> list[str]:
    """Every violated restriction or inequality for stages ``0..stages-1``."""
    bad = ansatz.restrictions()
    if bad:
        return bad
    return [v for q in range(stages) for v in bound_violations(ansatz, q, kallen_steps)]


# ---------------------------------------------------------------- initial data

@dataclass
class InitialSpec:
    """Analytic base embedding and metric perturbation.

    ``kind`` is ``inclusion`` (x, 0), ``scaled`` (c x, 0) or ``graph``
    (c x, bump, 0).  The Gaussian bump has width ``width * R`` and peak
    second derivative ``curvature``, so it stays gentle on small balls.  ``metric='pullback'`` sets ``g = f0# e + delta1 (Id + P)``;
    ``metric='identity'`` sets ``g = Id`` and solves for ``P``.
    ``scale='match'`` picks ``c = sqrt(1 - delta1)``.  ``p_iso='match'``
    picks ``P = (delta2/delta1) Id + oscillation``.
    """

    kind: str = "graph"
    scale: float | str = 1.0
    curvature: float = 0.5
    width: float = 0.5
    metric: str = "pullback"
    p_iso: float | str = 0.0
    p_osc: float = 0.0
    p_freq: float = 2.0


@dataclass(eq=False)
class InitialData:
    f0: GridField
    g: GridField
    perturbation: GridField
    info: dict


def _eye_packed(n: int, shape: tuple[int, ...]) -> np.ndarray:
    return np.stack([np.full(shape, 1.0 if i == j else 0.0) for i, j in sym_pairs(n)])


def initial_data(grid: GridSpec, variant: str, spec: InitialSpec, ansatz: Ansatz,
                 pair_budget: int = 200_000, seed: int = 0) -> InitialData:
    """Short embedding ``f0`` and target metric ``g`` meeting the stage-0 hypotheses.

    Raises
    ------
    HypothesisViolation
        When the metric perturbation exceeds its budgets or ``g`` is not
        strictly above the pullback of ``f0``.
    """
    n = grid.n
    m = n + codimension(n, variant)
    d1, d2 = ansatz.delta(1), ansatz.delta(2)
    lam0, eps, beta = ansatz.lam(0), ansatz.epsilon, ansatz.beta
    if spec.kind not in ("inclusion", "scaled", "graph"):
        raise ConfigurationError(f"unknown base embedding {spec.kind!r}")
    if spec.scale == "match":
        if not 0 < d1 < 1:
            raise ConfigurationError("scale 'match' needs delta1 < 1")
        c = math.sqrt(1.0 - d1)
    else:
        c = 1.0 if spec.kind == "inclusion" else float(spec.scale)
    kap0 = spec.curvature if spec.kind == "graph" else 0.0

    X = grid.dense_coords() - np.asarray(grid.center).reshape((n,) + (1,) * n)
    R = grid.radius
    wid = spec.width * R
    bump = kap0 * wid ** 2 * np.exp(-(X ** 2).sum(axis=0) / (2 * wid ** 2))
    grad = -bump * X / wid ** 2
    valid = grid.ball_mask()
    data = np.zeros((m,) + grid.shape)
    data[:n] = c * X + np.asarray(grid.center).reshape((n,) + (1,) * n)
    data[n] = bump
    data *= valid
    f0 = GridField(grid, data, "map", valid)
    pairs = sym_pairs(n)
    g0 = np.stack([c * c * (i == j) + grad[i] * grad[j] for i, j in pairs])

    # metric perturbation: isotropic part plus a diagonal oscillation
    kap = math.pi * spec.p_freq / R
    osc = np.zeros((len(pairs),) + grid.shape)
    for p, (i, j) in enumerate(pairs):
        if i == j:
            osc[p] = spec.p_osc * lam0 ** (-eps) * np.cos(kap * X[i] + 0.5 * math.pi * i)
    eye = _eye_packed(n, grid.shape)
    if spec.metric == "identity":
        if kap0 != 0:
            raise ConfigurationError("metric 'identity' needs a flat base embedding")
        Pd = ((1.0 - c * c) / d1 - 1.0) * eye
        g = eye.copy()
    elif spec.metric == "pullback":
        iso = d2 / d1 if spec.p_iso == "match" else float(spec.p_iso)
        Pd = iso * eye + osc
        g = g0 + d1 * (eye + Pd)
    else:
        raise ConfigurationError(f"unknown metric mode {spec.metric!r}")
    Pd = Pd * valid
    g = g * valid
    Pf = GridField(grid, Pd, "sym-tensor", valid)
    p0 = float(np.abs(Pd[:, valid]).max())
    pb = holder_norm(Pf, 0, beta, pair_budget, seed).value
    short = float(eigmin_array(g - g0, n)[valid].min())
    info = {"scale": c, "P0": p0, "P_beta": pb, "P0_budget": lam0 ** (-eps),
            "P_beta_budget": lam0 ** (beta - eps), "shortness": short, "delta1": d1}
    if p0 > info["P0_budget"] * (1 + 1e-12):
        raise HypothesisViolation(f"|P|_0 = {p0:.4g} exceeds {info['P0_budget']:.4g}")
    if pb > info["P_beta_budget"] * (1 + 1e-12):
        raise HypothesisViolation(f"|P|_beta = {pb:.4g} exceeds {info['P_beta_budget']:.4g}")
    if not short > 0:
        raise HypothesisViolation(f"initial map is not short (min eigenvalue {short:.3g})")
    return InitialData(f0, GridField(grid, g, "sym-tensor", valid), Pf, info)


# ---------------------------------------------------------------- metric error

# eigenvalues at rounding level count as degenerate
POS_TOL = 1e-12

def metric_error_h(g: np.ndarray, g_ell: GridField, delta_q1: float, delta_q2: float,
                   theta: float, epsilon: float, policy: str = "warn",
                   pair_budget: int = 200_000, seed: int = 0) -> tuple[GridField, dict]:
    """``h = (g - g_ell - delta_q2 Id) / delta_q1`` with its positivity and closeness checks.

    Raises
    ------
    HypothesisViolation
        ``h`` not positive definite (always), or far from the identity when
        ``policy='abort'``.
    """
    n = g_ell.n
    valid = g_ell.valid
    eye = _eye_packed(n, g_ell.grid.shape)
    hd = (g - g_ell.data - delta_q2 * eye) / delta_q1
    hd *= valid
    h = GridField(g_ell.grid, hd, "sym-tensor", valid)
    ev = eigmin_array(hd, n)
    ev = np.where(valid, ev, np.inf)
    emin = float(ev.min())
    if not emin > POS_TOL:
        idx = np.unravel_index(int(np.argmin(ev)), ev.shape)
        x = [float(g_ell.grid.axis_coords(i)[idx[i]]) for i in range(n)]
        raise HypothesisViolation(f"metric error h is not positive definite at x={x} "
                                  f"(min eigenvalue {emin:.3g})")
    expo = max(epsilon ** 2, 0.01)
    dist = holder_norm(h - GridField(g_ell.grid, eye * valid, "sym-tensor", valid), 0, expo,
                       pair_budget, seed).value
    info = {"h_min_eig": emin, "h_minus_id": dist, "theta": theta, "theta_ok": dist < theta,
            "h_exponent": expo}
    if dist >= theta:
        msg = f"|h - Id| = {dist:.3g} is not below theta = {theta:g}"
        if policy == "abort":
            raise HypothesisViolation(msg)
        log.warning(msg)
    return h, info


# ---------------------------------------------------------------- stage

@dataclass
class StageOptions:
    """Numerical policies of a stage.

    ``iterate`` selects which ledger terms the coefficient iteration absorbs
    (``bilinear`` or ``full``).  ``halo`` rows surround each block of
    ``block_rows`` rows; ``None`` picks one that covers every stencil of the
    pipeline, including the per-step erosion of the iteration.
    """

    iterate: str = "bilinear"
    guard: str = "warn"
    sigma1: float = SIGMA1
    floor: float = FLOOR
    theta_policy: str = "warn"
    block_rows: int = 128
    halo: int | None = None
    pair_budget: int = 200_000
    seed: int = 0
    mollify_method: str = "auto"
    master_tol: float = 1e-5
    check_divergence: bool = True
    check_ledger: bool = True
    c_limit: float = 10.0


@dataclass
class StageReport:
    q: int
    variant: str
    params: dict
    radius_in: float = 0.0
    radius_out: float = 0.0
    entry: dict = field(default_factory=dict)
    h: dict = field(default_factory=dict)
    decomposition: dict = field(default_factory=dict)
    kallen: dict = field(default_factory=dict)
    ledger: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    master: dict = field(default_factory=dict)
    defect: dict = field(default_factory=dict)
    w: dict = field(default_factory=dict)
    kappa: dict = field(default_factory=dict)
    min_eig: float | None = None
    passed: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    aborted: str | None = None

    @property
    def ok(self) -> bool:
        return self.aborted is None and all(self.passed.values())

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def series_row(self) -> dict:
        p = self.params
        rhos = self.kallen.get("rho_tail")
        return {"q": self.q, "delta": p.get("delta_q1"), "lambda": p.get("lambda_q1"),
                "ell": p.get("ell"), "defect0": self.defect.get("ratio0"),
                "defect_beta": self.defect.get("ratio_beta"), "w0": self.w.get("w0"),
                "w1": self.w.get("w1"), "w2": self.w.get("w2"), "minEig": self.min_eig,
                "C_w": self.w.get("C_w"), "rho_kallen": rhos}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        return v if math.isfinite(v) else None
    return x


def write_series_csv(path, reports: list[StageReport]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=SERIES_COLUMNS)
        wr.writeheader()
        for r in reports:
            wr.writerow({k: ("" if v is None else v) for k, v in r.series_row().items()})


def ledger_bounds(params: StageParams) -> dict[str, float]:
    """Nominal sizes of the normalised ledger terms."""
    le = params.lam_ell
    prev = math.sqrt(params.delta_q / params.delta_q1) * params.lambda_q / params.lambda_q1
    sq = math.sqrt(params.delta_q1)
    out = {"M": 1.0, "Mlin": 1.0, "Mquad": 1.0, "L": 1.0 / le, "R1": params.delta_q1,
           "R2": prev ** 2, "R3": 1.0 / le ** 2, "R4": prev / le, "R5": 1.0 / le,
           "R6": 1.0 / le, "R7": 1.0 / le, "cancel": params.delta_q1 / le}
    for k in ("R0", "R1", "R2", "R3", "R4", "R5", "R6", "R7"):
        out[f"{k}~"] = sq
    return out


def _ck_norms(E: np.ndarray, mask: np.ndarray, h: float) -> tuple[float, float, float]:
    """Max-abs of ``E`` and of its first and second derivatives, accumulated."""
    n = mask.ndim
    e0 = float(np.abs(E[..., mask]).max()) if mask.any() else 0.0
    m1 = erode(mask, 2)
    m2 = erode(m1, 2)
    d1 = [fd_array(E, i + 1, h) for i in range(n)]
    s1 = max((float(np.abs(d[..., m1]).max()) for d in d1), default=0.0) if m1.any() else 0.0
    s2 = 0.0
    if m2.any():
        for i in range(n):
            for j in range(i, n):
                s2 = max(s2, float(np.abs(fd_array(d1[i], j + 1, h)[..., m2]).max()))
    return e0, e0 + s1, e0 + s1 + s2


def _mx(x: np.ndarray, mask: np.ndarray) -> float:
    return float(np.abs(x[..., mask]).max()) if mask.any() else 0.0


class _Block:
    """Per-window stage work: frames, coefficients, ledger and increment."""

    def __init__(self, f_win: GridField, h_win: GridField, interior: np.ndarray,
                 dirs: DirectionSet, params: StageParams, variant: str, opts: StageOptions):
        self.variant = variant
        self.opts = opts
        self.dirs = dirs
        lam, delta = params.lambda_q1, params.delta_q1
        if variant == "spiral":
            frames = spiral_frame(f_win, dirs)
        else:
            frames = strain_frame(f_win, pullback(f_win), dirs)
        self.geom = P.geometry(frames, f_win, dirs, lam, delta)
        self.coarse = (P.geometry(frames, f_win, dirs, lam, delta, step=2)
                       if variant == "strain" else None)
        self.base = self.geom.valid & h_win.valid
        self.interior = interior
        self.f_win = f_win
        self.h_win = h_win
        self.steps = params.kallen_steps
        self.lam_ell = params.lam_ell

    def run(self):
        geom, base, opts = self.geom, self.base, self.opts
        sp = geom.spacing
        tk, tkk = P.tau_tensors(geom)
        Pm = self.dirs.projectors()
        target = self.h_win.data
        stats = {"guard": 0.0, "condition": 0.0}

        def F(T, warm):
            cf = decompose_field(T, tk, tkk, self.dirs, self.f_win.grid, base, warm,
                                 floor=opts.floor, sigma1=opts.sigma1, guard=opts.guard)
            core = base & self.interior
            stats["guard"] = max(stats["guard"], _mx(cf.guard, core))
            stats["condition"] = max(stats["condition"], _mx(cf.condition, core))
            return cf.A

        # R(a_s) is only trusted where a_s is: each step erodes the region by
        # one derivative stencil, so the rim never feeds back a jump in A
        masks = [base]
        for _ in range(self.steps):
            masks.append(erode(masks[-1], 2))
        cache: dict = {"calls": 0}

        def Rform(a):
            if cache.get("key") is a:
                return cache["val"]
            cache["calls"] += 1
            v = masks[min(cache["calls"], self.steps)]
            dA, _ = P.coefficient_gradient(a, sp, base)
            terms, extra = P.ledger_terms(geom, a, dA)
            val = P.pack(P.iterated_part(terms, extra, self.variant, opts.iterate)) * v
            cache.update(key=a, val=val)
            return val

        final = masks[self.steps - 1]
        emask = masks[self.steps] & self.interior
        cfg = KallenConfig(self.steps, lam=geom.lam, L=self.lam_ell / geom.lam)
        A, trace, _ = kallen_iterate(target, F, lambda a: evaluate_b(a, Pm, tk, tkk), Rform, cfg,
                                     norms=lambda E: _ck_norms(E, emask, sp), check=False,
                                     mask=final & self.interior)
        A = A * final
        fgeom = replace(geom, valid=final)
        fcoarse = None if self.coarse is None else replace(self.coarse,
                                                           valid=self.coarse.valid & final)
        led, _ = P.evaluate_ledger(fgeom, A, target=target, mode=opts.iterate,
                                   interior=self.interior, coarse=fcoarse)
        w = P.perturbation(geom, A) * final
        res, sc = P.master_residual(self.f_win, w, led, self.interior)
        self.mask = final
        base = final
        core = base & self.interior
        out = {
            "trace": trace, "ledger": led, "w": w, "A": A,
            "tau_k": _mx(tk, core), "tau_kk": _mx(tkk, core),
            "A_max": _mx(A, core), "A_min": float(A[:, core].min()) if core.any() else 0.0,
            "guard": stats["guard"], "condition": stats["condition"],
            "master": res, "master_scale": sc,
        }
        return out


def _merge_checks(acc: dict, new: dict) -> None:
    for k, v in new.items():
        acc[k] = max(acc.get(k, 0.0), v)


def run_stage(f_q: GridField, g: GridField, params: StageParams, variant: str = "strain",
              opts: StageOptions | None = None, dirs: DirectionSet | None = None,
              progress: Callable[[str], None] | None = None) -> tuple[GridField, StageReport]:
    """One inductive step ``f_q -> f_{q+1}`` with every check recorded.

    Raises
    ------
    StageAbort
        Any sub-stage failure; ``exc.report`` holds the partial report.
    """
    opts = opts or StageOptions()
    dirs = dirs or make_directions(f_q.n)
    t0 = time.perf_counter()
    rep = StageReport(params.q, variant, params.to_dict(), radius_in=f_q.grid.radius)
    say = progress or (lambda msg: log.info(msg))
    try:
        out = _stage(f_q, g, params, variant, opts, dirs, rep, say)
    except IsoembedError as exc:
        rep.aborted = f"{type(exc).__name__}: {exc}"
        rep.wall_clock = time.perf_counter() - t0
        raise StageAbort(rep.aborted, rep) from exc
    rep.wall_clock = time.perf_counter() - t0
    return out, rep


def _stage(f_q, g, params, variant, opts, dirs, rep, say):
    n = f_q.n
    grid = f_q.grid
    sp = grid.spacing
    lam, d1, d2 = params.lambda_q1, params.delta_q1, params.delta_q2
    eps, beta = params.epsilon, params.beta
    if f_q.components != n + codimension(n, variant):
        raise ConfigurationError(f"{variant} stage needs {n + codimension(n, variant)} components")
    P.check_resolution(sp, lam, variant)

    # entry hypotheses, recorded only
    gq = pullback(f_q)
    eye = _eye_packed(n, grid.shape)
    ent = (g.data - gq.data) / params.delta_q1 - eye
    ent *= gq.valid
    ent_f = GridField(grid, ent, "sym-tensor", gq.valid)
    rep.entry = {"ratio0": _mx(ent, gq.valid), "budget0": params.lambda_q ** (-eps),
                 "ratio_beta": holder_norm(ent_f, 0, beta, opts.pair_budget, opts.seed).value,
                 "budget_beta": params.lambda_q ** (beta - eps),
                 "min_eig": float(eigmin_array(g.data - gq.data, n)[gq.valid].min())}
    del gq, ent, ent_f

    say(f"stage {params.q}: mollify at ell={params.ell:.4g}")
    f_ell = mollify(f_q, params.ell, opts.mollify_method)
    rep.radius_out = f_ell.grid.radius
    g_ell = pullback(f_ell)
    h, hinfo = metric_error_h(g.data, g_ell, d1, d2, params.theta, eps, opts.theta_policy,
                              opts.pair_budget, opts.seed)
    rep.h = hinfo
    del g_ell

    N0 = grid.shape[0]
    B = opts.block_rows
    H = opts.halo if opts.halo is not None else 2 * params.kallen_steps + 24
    K = dirs.K
    A_all = np.zeros((K,) + grid.shape)
    w_all = np.zeros_like(f_ell.data)
    mask_all = np.zeros(grid.shape, bool)
    traces, norms, checks = [], {}, {}
    dec = {"guard": 0.0, "condition": 0.0, "A_max": 0.0, "A_min": math.inf,
           "tau_k": 0.0, "tau_kk": 0.0}
    master = {"residual": 0.0, "scale": 0.0}
    ledger_valid = np.zeros(grid.shape, bool)
    for r0 in range(0, N0, B):
        r1 = min(N0, r0 + B)
        if not h.valid[r0:r1].any():
            continue
        lo, hi = max(0, r0 - H), min(N0, r1 + H)
        start = (lo,) + (0,) * (n - 1)
        wshape = (hi - lo,) + grid.shape[1:]
        wgrid = grid.window(start, wshape)
        f_win = GridField(wgrid, f_ell.data[:, lo:hi], "map", f_ell.valid[lo:hi])
        h_win = GridField(wgrid, h.data[:, lo:hi], "sym-tensor", h.valid[lo:hi])
        interior = np.zeros(wshape, bool)
        interior[r0 - lo:r1 - lo] = True
        blk = _Block(f_win, h_win, interior, dirs, params, variant, opts)
        res = blk.run()
        core = slice(r0 - lo, r1 - lo)
        A_all[:, r0:r1] = res["A"][:, core]
        w_all[:, r0:r1] = res["w"][:, core]
        mask_all[r0:r1] = blk.mask[core]
        led = res["ledger"]
        ledger_valid[r0:r1] = led.valid[core]
        traces.append(res["trace"])
        for name, tn in led.norms.items():
            if name in norms:
                norms[name].merge(tn)
            else:
                norms[name] = tn
        _merge_checks(checks, led.checks)
        for k in ("guard", "condition", "A_max", "tau_k", "tau_kk"):
            dec[k] = max(dec[k], res[k])
        dec["A_min"] = min(dec["A_min"], res["A_min"])
        master["residual"] = max(master["residual"], res["master"])
        master["scale"] = max(master["scale"], res["master_scale"])
        say(f"stage {params.q}: rows {r0}-{r1} done")
    if not mask_all.any():
        raise ConfigurationError("no valid points left for the stage")

    # merged ledger for the report and identity checks
    merged = P.ErrorLedger(variant, d1, lam, ledger_valid, {}, norms=norms, checks=checks)
    rep.ledger = merged.table(ledger_bounds(params))
    rep.checks = dict(checks)
    rep.decomposition = dec
    trace = merge_traces(traces)
    rhos = [r.rho for r in trace.records[1:] if r.rho is not None]
    rep.kallen = {"trace": [asdict(r) for r in trace.records],
                  "rho_tail": max(rhos) if rhos else None,
                  "rho_bound": 4.0 / params.lam_ell, "lam_ell": params.lam_ell}
    master["ratio"] = master["residual"] / master["scale"] if master["scale"] else 0.0
    rep.master = master
    if opts.check_divergence:
        check_divergence([r.da0 for r in trace.records])
    if opts.check_ledger:
        P.check_ledger(merged)

    # new map and conclusion checks
    f_next = GridField(f_ell.grid, (f_ell.data + w_all) * mask_all, "map", mask_all)
    del f_ell
    gn = pullback(f_next)
    v = gn.valid
    diff = (g.data - gn.data) * v
    defect = diff - d2 * eye * v
    ratio = GridField(grid, defect / d2, "sym-tensor", v)
    rb = holder_norm(ratio, 0, beta, opts.pair_budget, opts.seed).value
    r0_ = _mx(defect, v) / d2
    rep.min_eig = float(eigmin_array(diff, n)[v].min())
    rep.defect = {"defect0": r0_ * d2, "ratio0": r0_, "ratio_beta": rb,
                  "budget0": lam ** (-eps), "budget_beta": lam ** (beta - eps),
                  "relaxed_budget": 1.0, "contraction": _mx(diff, v) / d2}
    del gn, diff, defect, ratio
    wf = GridField(f_next.grid, w_all * mask_all, "map", mask_all)
    wn = [norm(wf, r, opts.pair_budget, opts.seed) for r in (0, 1, 2)]
    cs = [wn[r] / (math.sqrt(d1) * lam ** (r - 1)) for r in (0, 1, 2)]
    rep.w = {"w0": wn[0], "w1": wn[1], "w2": wn[2], "C0": cs[0], "C1": cs[1], "C2": cs[2],
             "C_w": max(cs)}
    rep.kappa = {f"r{r}": norm(f_next, r, opts.pair_budget, opts.seed) for r in (0, 1, 2)}

    canc_ok = True
    if variant == "spiral":
        canc_ok = checks.get("R6", 0.0) <= P.IDENTITY_TOL * checks.get("scale", 0.0)
    rep.passed = {
        "defect_relaxed": r0_ <= 1.0,
        "shortness": rep.min_eig > 0,
        "w_constants": max(cs) <= opts.c_limit,
        "master": master["ratio"] <= opts.master_tol,
        "cancellation": bool(canc_ok),
    }
    rep.defect["strict_ok"] = r0_ <= rep.defect["budget0"]
    rep.defect["beta_ok"] = rb <= rep.defect["budget_beta"]
    return f_next


# ---------------------------------------------------------------- multi-stage driver

@dataclass
class RunResult:
    reports: list[StageReport]
    f0: GridField
    f: GridField
    g: GridField
    diagnostics: dict


def holder_partial_sum(ansatz: Ansatz, stages: int, C: float, alpha_prime: float) -> float:
    """``sum_{q=1}^{Q} C delta_q^(1/2) lambda_q^alpha'``."""
    return sum(C * math.sqrt(ansatz.delta(q)) * ansatz.lam(q) ** alpha_prime
               for q in range(1, stages + 1))


def run(grid: GridSpec, ansatz: Ansatz, variant: str, stages: int, init: InitialSpec,
        opts: StageOptions | None = None, kallen_steps: int = 5, theta: float = 0.1,
        strict: bool = True, margin: float = 0.9, alpha_prime: float | None = None,
        on_stage: Callable[[StageReport], None] | None = None) -> RunResult:
    """Run ``stages`` consecutive stages from analytic initial data.

    ``margin`` bounds the total shrink as a fraction of the initial radius.
    """
    opts = opts or StageOptions()
    if strict:
        bad = validate_schedule(ansatz, stages, kallen_steps)
        if bad:
            raise ScheduleInfeasible("infeasible schedule: " + "; ".join(bad))
    params = [schedule(q, ansatz, kallen_steps, theta, strict=False) for q in range(stages)]
    shrink = sum(p.ell for p in params)
    if shrink > margin * grid.radius:
        raise ScheduleInfeasible(f"total shrink {shrink:.4g} exceeds margin "
                                 f"{margin:g} x radius {grid.radius:.4g}")
    top = ansatz.lam(stages)
    P.check_resolution(grid.spacing, top, variant)
    data = initial_data(grid, variant, init, ansatz, opts.pair_budget, opts.seed)
    dirs = make_directions(grid.n)
    f = data.f0
    reports = []
    for p in params:
        f, rep = run_stage(f, data.g, p, variant, opts, dirs)
        reports.append(rep)
        if on_stage:
            on_stage(rep)
    ap = 0.9 * ansatz.alpha / ansatz.b if alpha_prime is None else alpha_prime
    diff = GridField(f.grid, (f.data - data.f0.data) * f.valid, "map", f.valid)
    measured = holder_norm(diff, 1, ap, opts.pair_budget, opts.seed).value
    C = max(r.w["C_w"] for r in reports)
    psum = holder_partial_sum(ansatz, stages, C, ap)
    diag = {"alpha_prime": ap, "holder_measured": measured, "partial_sum": psum, "C": C,
            "holder_ratio": measured / psum, "total_shrink": shrink, "margin": margin,
            "radius0": grid.radius, "initial": data.info}
    return RunResult(reports, data.f0, f, data.g, diag)


def write_reports(out_dir: str | Path, result: RunResult) -> list[Path]:
    """One JSON document per stage, the series CSV and the run summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in result.reports:
        p = out / f"stage_{r.q}.json"
        p.write_text(r.to_json())
        paths.append(p)
    write_series_csv(out / "series.csv", result.reports)
    (out / "summary.json").write_text(json.dumps(_jsonable(result.diagnostics), indent=2,
                                                 sort_keys=True))
    return paths
