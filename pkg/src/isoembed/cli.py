"""Command line entry point.

Exit codes: 0 success, 1 I/O or configuration error, 2 infeasible
schedule, 3 stage abort or failed stage check.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigurationError, IsoembedError, ScheduleInfeasible, StageAbort

EXIT_OK, EXIT_IO, EXIT_SCHEDULE, EXIT_STAGE = 0, 1, 2, 3

log = logging.getLogger("isoembed")


class _Ctx:
    def __init__(self, args):
        self.args = args
        self.quiet = args.quiet

    def say(self, msg: str) -> None:
        if not self.quiet:
            print(msg)

    def out_dir(self, default: str) -> Path:
        p = Path(self.args.out or default)
        p.mkdir(parents=True, exist_ok=True)
        return p

    def config(self) -> dict:
        if not self.args.config:
            return {}
        try:
            return json.loads(Path(self.args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    from .stage import _jsonable
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True))


# ---------------------------------------------------------------- run

def cmd_run(ctx: _Ctx) -> int:
    from .grid import save_field
    from .mesh import write_obj
    from .stage import RunResult, run, validate_schedule, write_reports, write_series_csv

    cfg = RunConfig.load(ctx.args.config) if ctx.args.config else RunConfig()
    if ctx.args.seed is not None:
        cfg.seed = ctx.args.seed
    if ctx.args.out:
        cfg.output = ctx.args.out
    ans = cfg.build_ansatz()
    bad = validate_schedule(ans, cfg.stages, cfg.kallen_steps)
    if bad and (cfg.strict_schedule or ans.restrictions()):
        raise ScheduleInfeasible("infeasible schedule: " + "; ".join(bad))
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    grid = cfg.build_grid()
    ctx.say(f"grid {grid.points_per_axis}^{grid.n}, radius {grid.radius:.6g}, "
            f"spacing {grid.spacing:.6g}")
    done = []

    def on_stage(rep):
        done.append(rep)
        (out / f"stage_{rep.q}.json").write_text(rep.to_json())
        ctx.say(f"stage {rep.q}: defect ratio {rep.defect['ratio0']:.4g} "
                f"(budget {rep.defect['budget0']:.4g}), C_w {rep.w['C_w']:.3g}, "
                f"min eig {rep.min_eig:.3g}, {rep.wall_clock:.1f}s, ok={rep.ok}")

    try:
        res = run(grid, ans, cfg.variant, cfg.stages, cfg.build_initial(), cfg.build_options(),
                  cfg.kallen_steps, cfg.tolerances.theta, cfg.strict_schedule,
                  cfg.grid.margin, cfg.alpha_prime, on_stage=on_stage)
    except StageAbort as exc:
        if exc.report is not None:
            (out / f"stage_{exc.report.q}.json").write_text(exc.report.to_json())
            write_series_csv(out / "series.csv", done + [exc.report])
        raise
    write_reports(out, res)
    save_field(out / "final.cigf", res.f)
    if grid.n == 2:
        write_obj(out / "final.obj", res.f, (1, 2, 3))
    d = res.diagnostics
    ctx.say(f"Hölder check: measured {d['holder_measured']:.4g} vs partial sum "
            f"{d['partial_sum']:.4g}; total shrink {d['total_shrink']:.4g}")
    return EXIT_OK if all(r.ok for r in res.reports) else EXIT_STAGE


# ---------------------------------------------------------------- sub-experiments

def cmd_decompose(ctx: _Ctx) -> int:
    from .decomp import identity_packed, newton_decompose, evaluate_b
    from .frame import make_directions

    c = ctx.config()
    n = int(c.get("n", 2))
    dirs = make_directions(n)
    tau = np.asarray(c.get("tau") or identity_packed(n), float)
    tk = c.get("tau_k")
    tkk = c.get("tau_kk")
    tk = None if tk is None else np.asarray(tk, float)
    tkk = None if tkk is None else np.asarray(tkk, float)
    res = newton_decompose(tau[:, None], None if tk is None else tk[..., None],
                           None if tkk is None else tkk[..., None], dirs,
                           guard=c.get("guard", "raise"))
    A = res.A[:, 0]
    resid = float(np.abs(evaluate_b(res.A, dirs.projectors(), None if tk is None else tk[..., None],
                                    None if tkk is None else tkk[..., None])[:, 0] - tau).max())
    for k, a in enumerate(A):
        ctx.say(f"A_{k} = {a:.15f}")
    ctx.say(f"residual {resid:.3g}, condition {float(res.condition[0]):.4g}")
    _write_json(ctx.out_dir("out") / "decompose.json",
                {"A": A.tolist(), "residual": resid, "iterations": res.iterations,
                 "condition": float(res.condition[0]), "guard": float(res.guard[0])})
    return EXIT_OK if resid <= 1e-10 else EXIT_STAGE


def cmd_frames(ctx: _Ctx) -> int:
    from .frame import identity_truncation, make_directions, orthogonality_residual, spiral_frame
    from .grid import GridField, GridSpec

    c = ctx.config()
    N = int(c.get("points", 129))
    eps = float(c.get("eps", 0.3))
    g = GridSpec.ball(2, N, 1.0)
    dirs = make_directions(2)

    def surface(m):
        return GridField.from_function(
            g, lambda x, y: [x + 0 * y, y + 0 * x, eps * np.sin(x + 2 * y) * np.cos(x)]
            + [0 * x * y] * (m - 3), "map")

    ortho = orthogonality_residual(spiral_frame(surface(8), dirs), surface(8))
    f = surface(5)
    X, Y = np.broadcast_arrays(*g.coords())
    z0 = eps * (np.cos(X + 2 * Y) * np.cos(X) - np.sin(X + 2 * Y) * np.sin(X))
    z1 = eps * 2 * np.cos(X + 2 * Y) * np.cos(X)
    one, zero = np.ones_like(X), np.zeros_like(X)
    T = np.stack([np.stack([one, zero, z0, zero, zero]), np.stack([zero, one, z1, zero, zero])])
    res, est = identity_truncation(f, dirs, T)
    ok = ortho <= 1e-10 and res <= 10 * est
    ctx.say(f"spiral orthogonality {ortho:.3g}")
    ctx.say(f"strain identity {res:.3g} vs truncation estimate {est:.3g}")
    _write_json(ctx.out_dir("out") / "frames.json",
                {"orthogonality": ortho, "identity": res, "truncation": est, "ok": ok})
    return EXIT_OK if ok else EXIT_STAGE


def cmd_mollify_bench(ctx: _Ctx) -> int:
    from .mollify import benchmark_rates

    c = ctx.config()
    seed = ctx.args.seed if ctx.args.seed is not None else int(c.get("seed", 0))
    rep = benchmark_rates(int(c.get("points", 1025)),
                          tuple(c.get("ells", (0.08, 0.04, 0.02, 0.01))), seed,
                          float(c.get("tolerance", 0.3)))
    for k in rep.orders:
        ctx.say(f"({k}) order {rep.orders[k]:.3f} nominal {rep.nominal[k]:g} "
                f"{'ok' if rep.passed[k] else 'FAIL'}")
    _write_json(ctx.out_dir("out") / "mollify.json",
                {"ells": rep.ells, "values": rep.values, "orders": rep.orders,
                 "nominal": rep.nominal, "passed": rep.passed})
    return EXIT_OK if rep.ok else EXIT_STAGE


def cmd_kallen_toy(ctx: _Ctx) -> int:
    from .kallen import KallenConfig, kallen_iterate

    c = ctx.config()
    eps = float(c.get("epsilon", 0.01))
    steps = int(c.get("steps", 6))
    a, trace, _ = kallen_iterate(np.array([1.0]), lambda t, warm: np.sqrt(t), lambda a: a * a,
                                 lambda a: eps * a, KallenConfig(steps=steps, lam=1 / eps))
    exact = (-eps + math.sqrt(eps * eps + 4)) / 2
    err = abs(float(a[0]) - exact)
    ctx.say(f"fixed point {float(a[0]):.15f} (closed form {exact:.15f}, error {err:.2g})")
    out = ctx.out_dir("out")
    (out / "kallen_trace.jsonl").write_text(trace.to_json_lines())
    return EXIT_OK if err <= 1e-10 else EXIT_STAGE


def cmd_export_mesh(ctx: _Ctx) -> int:
    from .grid import load_field
    from .mesh import write_obj

    f = load_field(ctx.args.field)
    path = Path(ctx.args.out or Path(ctx.args.field).with_suffix(".obj"))
    if path.is_dir():
        path = path / (Path(ctx.args.field).stem + ".obj")
    nv, nf = write_obj(path, f, ctx.args.coords)
    ctx.say(f"wrote {path} ({nv} vertices, {nf} faces)")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run, "decompose": cmd_decompose, "frames": cmd_frames,
    "mollify-bench": cmd_mollify_bench, "kallen-toy": cmd_kallen_toy,
    "export-mesh": cmd_export_mesh,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration file")
    common.add_argument("--out", metavar="DIR", help="output directory (file for export-mesh)")
    common.add_argument("--seed", type=int, metavar="U64", help="seed for pair sampling")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    p = argparse.ArgumentParser(prog="isoembed", description="Stage laboratory for isometric "
                                "embedding iterations on grids.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run the configured stages")
    sub.add_parser("decompose", parents=[common], help="pointwise coefficient solve")
    sub.add_parser("frames", parents=[common], help="frame identity checks")
    sub.add_parser("mollify-bench", parents=[common], help="fitted mollification orders")
    sub.add_parser("kallen-toy", parents=[common], help="scalar coefficient iteration")
    e = sub.add_parser("export-mesh", parents=[common], help="OBJ surface from a field file")
    e.add_argument("field", help="CIGF field container")
    e.add_argument("--coords", default="1,2,3", help="1-based ambient coordinate triple")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](_Ctx(args))
    except ScheduleInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEDULE
    except StageAbort as exc:
        print(f"error: stage aborted: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except IsoembedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
