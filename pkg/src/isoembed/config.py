"""Run configuration: nested JSON sections with every default embedded."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .grid import GridSpec
from .stage import Ansatz, InitialSpec, StageOptions


@dataclass
class AnsatzSection:
    a: float = 100.0
    b: float = 1.14
    alpha: float = 0.15
    beta: float = 0.1
    epsilon: float = 0.01


@dataclass
class GridSection:
    """``radius = null`` derives the radius from ``points_per_wave`` at the top frequency."""

    points_per_axis: int = 2048
    radius: float | None = None
    points_per_wave: float = 20.0
    margin: float = 0.9
    block_rows: int = 128


@dataclass
class InitialSection:
    kind: str = "graph"
    scale: float | str = 1.0
    curvature: float = 0.5
    width: float = 0.5
    metric: str = "pullback"
    p_iso: float | str = "match"
    p_osc: float = 0.0
    p_freq: float = 2.0


@dataclass
class Tolerances:
    theta: float = 0.1
    sigma1: float = 0.2
    sigma_floor: float = 0.05
    frame_tol: float = 1e-10
    guard: str = "warn"
    theta_policy: str = "warn"
    master_tol: float = 1e-5
    c_limit: float = 10.0


@dataclass
class RunConfig:
    n: int = 2
    variant: str = "strain"
    stages: int = 3
    kallen_steps: int = 5
    iterate: str = "bilinear"
    strict_schedule: bool = True
    ansatz: AnsatzSection = field(default_factory=AnsatzSection)
    grid: GridSection = field(default_factory=GridSection)
    initial: InitialSection = field(default_factory=InitialSection)
    tolerances: Tolerances = field(default_factory=Tolerances)
    output: str = "out"
    seed: int = 0
    pair_budget: int = 200_000
    alpha_prime: float | None = None

    _SECTIONS = {"ansatz": AnsatzSection, "grid": GridSection, "initial": InitialSection,
                 "tolerances": Tolerances}

    def __post_init__(self) -> None:
        if self.variant not in ("spiral", "strain"):
            raise ConfigurationError(f"variant must be spiral or strain, got {self.variant!r}")
        if self.n not in (2, 3):
            raise ConfigurationError("n must be 2 or 3")
        if self.stages < 1 or self.kallen_steps < 1:
            raise ConfigurationError("stages and kallen_steps must be positive")
        if self.iterate not in ("bilinear", "full"):
            raise ConfigurationError("iterate must be bilinear or full")

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        kw = {}
        for k, v in d.items():
            sec = cls._SECTIONS.get(k)
            if sec is not None:
                if not isinstance(v, dict):
                    raise ConfigurationError(f"section {k!r} must be an object")
                names = {f.name for f in fields(sec)}
                bad = set(v) - names
                if bad:
                    raise ConfigurationError(f"unknown keys in {k!r}: {sorted(bad)}")
                v = sec(**v)
            kw[k] = v
        return cls(**kw)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    # ------------------------------------------------------------ builders

    def build_ansatz(self) -> Ansatz:
        a = self.ansatz
        return Ansatz(a.a, a.b, a.alpha, a.beta, a.epsilon)

    def build_grid(self) -> GridSpec:
        g = self.grid
        if g.radius is None:
            top = self.build_ansatz().lam(self.stages) * (2 if self.variant == "strain" else 1)
            h = 1.0 / (g.points_per_wave * top)
            if not math.isfinite(h) or h <= 0:
                raise ConfigurationError("cannot derive the grid spacing")
            return GridSpec.ball(self.n, g.points_per_axis, 0.5 * (g.points_per_axis - 1) * h)
        return GridSpec.ball(self.n, g.points_per_axis, g.radius)

    def build_initial(self) -> InitialSpec:
        return InitialSpec(**asdict(self.initial))

    def build_options(self) -> StageOptions:
        t = self.tolerances
        return StageOptions(iterate=self.iterate, guard=t.guard, sigma1=t.sigma1,
                            floor=t.sigma_floor, theta_policy=t.theta_policy,
                            block_rows=self.grid.block_rows, pair_budget=self.pair_budget,
                            seed=self.seed, master_tol=t.master_tol, c_limit=t.c_limit)
