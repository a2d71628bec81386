"""Almost-fixed-point coefficient iteration.

``a0 = 0``, ``a1 = F(T)``, ``a_{s+1} = F(T - R(a_s))`` where ``F`` inverts the
pointwise quadratic form ``b``.  Because ``b(a_{s+1}) = T - R(a_s)`` the
residual ``E_s = T - b(a_s) - R(a_s)`` telescopes:
``E_{s+1} = R(a_s) - R(a_{s+1})``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DivergenceError

log = logging.getLogger(__name__)

Array = np.ndarray
Solve = Callable[[Array, "Array | None"], Array]
Form = Callable[[Array], Array]


@dataclass(frozen=True)
class KallenConfig:
    """Iteration parameters.

    ``lam * L`` should be large for geometric decay; small products are
    allowed but logged, since desk-scale schedules sit near one.
    """

    steps: int = 5
    r1: int = 2
    lam: float = math.inf
    L: float = 1.0
    c_star: float | None = None

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.lam * self.L <= 10:
            log.info("lambda*L = %.3g is not large; decay per step may be weak", self.lam * self.L)


@dataclass
class StepRecord:
    step: int
    E0: float
    E1: float | None
    E2: float | None
    da0: float
    rho: float | None


@dataclass
class IterationTrace:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def rhos(self) -> list[float]:
        return [r.rho for r in self.records if r.rho is not None]

    def to_json_lines(self) -> str:
        """One JSON object per step."""
        return "\n".join(json.dumps(asdict(r)) for r in self.records) + "\n"

    @classmethod
    def from_json_lines(cls, text: str) -> "IterationTrace":
        return cls([StepRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])


def residual(T: Array, a: Array, bform: Form, Rform: Form) -> Array:
    """``E = T - b(a) - R(a)``."""
    return T - bform(a) - Rform(a)


def _max_abs(x: Array) -> float:
    return float(np.abs(x).max()) if x.size else 0.0


def check_divergence(da: Sequence[float]) -> None:
    """Raise if the update size grew for two consecutive steps (from step 2 on)."""
    d = list(da)[1:]
    for i in range(2, len(d)):
        if d[i] > d[i - 1] > d[i - 2]:
            raise DivergenceError(f"coefficient updates grew at steps {i}..{i + 2}: {d[i - 2:i + 1]}")


def kallen_iterate(T: Array, F: Solve, bform: Form, Rform: Form, cfg: KallenConfig,
                   norms: Callable[[Array], tuple[float, float | None, float | None]] | None = None,
                   check: bool = True, mask: Array | None = None) -> tuple[Array, IterationTrace, list[Array]]:
    """Run ``cfg.steps`` steps.

    Parameters
    ----------
    T : ndarray
        Target tensor field.
    F : callable ``(target, warm) -> a``
        Pointwise inverse of ``bform``.
    bform, Rform : callable ``a -> tensor``
    norms : callable, optional
        Returns ``(E0, E1, E2)`` for a residual; defaults to the max-abs
        entry with no derivative norms.
    check : bool
        Run the divergence test (blocked callers test after merging).
    mask : ndarray of bool, optional
        Points over which update sizes and default norms are taken.

    Returns
    -------
    a : ndarray
        ``a^(steps)``.
    trace : IterationTrace
        One record per step ``s = 1..steps``.
    residuals : list of ndarray
        ``E_s`` for each step.
    """
    pick = (lambda x: x) if mask is None else (lambda x: x[..., mask])
    norms = norms or (lambda E: (_max_abs(pick(E)), None, None))
    trace = IterationTrace()
    residuals = []
    a_prev = None
    a = F(T, None)
    prevE = None
    for s in range(1, cfg.steps + 1):
        if s > 1:
            a_prev, a = a, F(T - Rform(a), a)
        E = residual(T, a, bform, Rform)
        residuals.append(E)
        E0, E1, E2 = norms(E)
        da = _max_abs(pick(a)) if a_prev is None else _max_abs(pick(a - a_prev))
        rho = None if prevE is None or prevE == 0 else E0 / prevE
        trace.records.append(StepRecord(s, E0, E1, E2, da, rho))
        prevE = E0
    if check:
        check_divergence([r.da0 for r in trace])
    return a, trace, residuals


def merge_traces(traces: Sequence[IterationTrace]) -> IterationTrace:
    """Combine per-block traces of the same run by taking maxima; ``rho`` is recomputed."""
    traces = [t for t in traces if len(t)]
    if not traces:
        return IterationTrace()
    steps = len(traces[0])
    if any(len(t) != steps for t in traces):
        raise ValueError("traces have different lengths")

    def mx(vals):
        vals = [v for v in vals if v is not None]
        return max(vals) if vals else None

    out = IterationTrace()
    prev = None
    for s in range(steps):
        recs = [t.records[s] for t in traces]
        E0 = mx(r.E0 for r in recs)
        rho = None if prev is None or prev == 0 else E0 / prev
        out.records.append(StepRecord(s + 1, E0, mx(r.E1 for r in recs), mx(r.E2 for r in recs),
                                      mx(r.da0 for r in recs), rho))
        prev = E0
    return out
