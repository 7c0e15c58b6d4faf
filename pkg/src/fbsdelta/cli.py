"""Batch front end: ``fbsdelta <command> config.yaml [--out-dir DIR]``.

Commands: solve, check-mp, optimize, brute-force, mp-experiment.
Exit codes: 0 pass, 2 invalid input, 3 solver non-convergence,
4 failed MP or residual check.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ProblemConfig, parse_config
from .control import check_mp, evaluate_cost, solve_adjoint
from .errors import (
    BudgetExceeded,
    ControlOutOfDomain,
    FBSError,
    NoConvergence,
    NodeMismatch,
    ParseError,
    SingularJacobian,
    ValidationError,
)
from .fbsde import RESIDUAL_TOL, solve_state, state_residuals
from .io import export_control, fmt, import_control, node_path, write_trajectories
from .lattice import AdaptedProcess
from .optimize import brute_force, mp_necessity_experiment, projected_gradient

EXIT_OK, EXIT_INVALID, EXIT_NOCONV, EXIT_CHECK = 0, 2, 3, 4
COMMANDS = ("solve", "check-mp", "optimize", "brute-force", "mp-experiment")


@dataclass
class RunReport:
    command: str
    digest: str
    values: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    table: str = ""
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def render(self) -> str:
        lines = [f"command: {self.command}", f"config_sha256: {self.digest}"]
        for k, v in self.values.items():
            lines.append(f"{k}: {fmt(v) if isinstance(v, (float, np.floating)) else v}")
        for k, ok in self.flags.items():
            lines.append(f"check {k}: {'PASS' if ok else 'FAIL'}")
        if self.table:
            lines.append("")
            lines.append(self.table)
        lines.append(f"wall_time_s: {self.wall_time:.3f}")
        lines.append(f"result: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _verify(problem, control, traj, tol_mp, report: RunReport, with_mp: bool, solver_tol: float):
    """Recompute residuals, J and the MP residual with the independent checkers."""
    fres, bres = state_residuals(problem, control, traj)
    tol = max(RESIDUAL_TOL, solver_tol) * (1 + 1e-9)
    report.values["forward_residual_max"] = fres
    report.values["backward_residual_max"] = bres
    report.values["J"] = evaluate_cost(problem, control, traj)
    report.values["solver_method"] = traj.diagnostics.get("method", "")
    report.values["solver_iterations"] = traj.diagnostics.get("iterations", 0)
    report.flags["residuals"] = fres <= tol and bres <= tol
    adj = solve_adjoint(problem, control, traj)
    mp = check_mp(problem, control, tol_mp, traj=traj, adj=adj)
    report.values["mp_residual_max"] = mp.max_rho
    report.values["mp_residual_argmax"] = f"t={mp.argmax[0]} node_path={node_path(mp.argmax[1])!r}"
    report.values["tol_mp"] = tol_mp
    if with_mp:
        report.flags["mp"] = mp.passed
        report.values["mp_status"] = ("PASS, max rho <= tol_mp" if mp.passed else "FAIL, max rho > tol_mp")
    return adj


def _initial_control(cfg: ProblemConfig, problem, args) -> AdaptedProcess:
    if args.control:
        u = import_control(args.control, problem.tree, problem.r)
        problem.check_control(u)
        return u
    return problem.constant_control()


def run(command: str, cfg: ProblemConfig, out_dir, control_path=None, tol_mp=None, grids=None,
        grid=None) -> RunReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    args = argparse.Namespace(control=control_path)
    tol_mp = cfg.solver.tol_mp if tol_mp is None else tol_mp
    problem = cfg.build_problem()
    solver = cfg.solver.kwargs() if problem.coupling == "full" else {}
    report = RunReport(command, cfg.digest)
    start = time.perf_counter()

    if command == "mp-experiment":
        exp = mp_necessity_experiment(problem, grids or (5, 9, 17), **solver)
        report.table = exp.table()
        report.values["levels"] = len(exp.rows)
        report.flags["rho_decreasing"] = exp.monotone
        report.values["complete"] = not exp.notes
    else:
        u0 = _initial_control(cfg, problem, args)
        if command in ("solve", "check-mp"):
            u = u0
        elif command == "optimize":
            u = _optimize(cfg, problem, u0, tol_mp, solver, report)
        elif command == "brute-force":
            G = grid or cfg.optimizer["grid"]
            res = brute_force(problem, G, tol_mp=tol_mp, **solver)
            report.values["grid_points"] = G
            report.values["evaluations"] = res.evaluations
            u = res.control
        else:
            raise ValueError(f"unknown command {command!r}")
        traj = solve_state(problem, u, **solver)
        adj = _verify(problem, u, traj, tol_mp, report, with_mp=command in ("check-mp", "optimize"),
                      solver_tol=cfg.solver.tol)
        write_trajectories(out / "trajectories.csv", problem, u, traj, adj)
        if command in ("optimize", "brute-force"):
            export_control(out / "control.csv", u)
    report.wall_time = time.perf_counter() - start
    (out / "report.txt").write_text(report.render(), encoding="utf-8")
    return report


def _optimize(cfg, problem, u0, tol_mp, solver, report):
    ocfg = cfg.optimizer_config(tol_mp)
    starts = [u0]
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.optimizer["restarts"]):
        vals = [problem.lo[t] + (problem.hi[t] - problem.lo[t]) * rng.random((problem.tree.n_nodes(t), problem.r))
                for t in range(problem.tree.T + 1)]
        starts.append(AdaptedProcess(problem.tree, 0, problem.tree.T, tuple(vals)))
    best = None
    for u in starts:
        res = projected_gradient(problem, u, ocfg, **solver)
        if best is None or res.J < best.J:
            best = res
    report.values["optimizer_iterations"] = best.iterations
    report.values["optimizer_converged"] = best.converged
    report.values["starts"] = len(starts)
    return best.control


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbsdelta", description="Controlled FBSΔE solver on scenario trees.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("config", help="YAML problem configuration")
    p.add_argument("--out-dir", default=".", help="directory for trajectories.csv, report.txt, control.csv")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--tol-mp", type=float, default=None, help="override solver.tol_mp")
    p.add_argument("--control", default=None, help="control.csv to evaluate or start from")
    p.add_argument("--grid", type=int, default=None, help="grid points per dimension for brute-force")
    p.add_argument("--grids", default=None, help="comma-separated grid sizes for mp-experiment")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.tol_mp is not None and args.tol_mp <= 0:
            raise ValidationError("--tol-mp", "must be positive")
        grids = tuple(int(g) for g in args.grids.split(",")) if args.grids else None
        report = run(args.command, cfg, args.out_dir, control_path=args.control, tol_mp=args.tol_mp,
                     grids=grids, grid=args.grid)
    except (ParseError, ValidationError, NodeMismatch, ControlOutOfDomain, BudgetExceeded, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NoConvergence, SingularJacobian) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except FBSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    sys.stdout.write(report.render())
    return EXIT_OK if report.passed else EXIT_CHECK


if __name__ == "__main__":
    raise SystemExit(main())
