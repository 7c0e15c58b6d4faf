"""Control optimization: projected gradient on H_u and a brute-force grid oracle."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .control import MPReport, check_mp, cost_gradient, evaluate_cost, hamiltonian_u_all, mp_residual, TOL_MP
from .errors import BudgetExceeded
from .fbsde import ControlProblem, solve_state
from .lattice import AdaptedProcess

DEFAULT_BUDGET = 10**6


@dataclass
class OptimizerConfig:
    step0: float = 1.0
    shrink: float = 0.5
    c1: float = 1e-4
    tol_mp: float = TOL_MP
    max_outer_iters: int = 500
    max_backtracks: int = 60
    step_rule: str = "bb"
    step_min: float = 1e-10
    step_max: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.step0 <= 0 or self.c1 <= 0 or self.tol_mp <= 0 or self.max_outer_iters <= 0:
            raise ValueError("optimizer settings must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink factor must lie in (0, 1)")
        if self.step_rule not in ("bb", "fixed"):
            raise ValueError("step_rule must be 'bb' or 'fixed'")
        if not 0 < self.step_min <= self.step0 <= self.step_max:
            raise ValueError("need 0 < step_min <= step0 <= step_max")


@dataclass
class OptimizationResult:
    control: AdaptedProcess
    J: float
    mp_report: MPReport
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    evaluations: int = 0


def _clip(problem: ControlProblem, vals: list[np.ndarray]) -> list[np.ndarray]:
    return [np.clip(v, problem.lo[t], problem.hi[t]) for t, v in enumerate(vals)]


def projected_gradient(problem: ControlProblem, u0: AdaptedProcess, config: OptimizerConfig | None = None,
                       **solver) -> OptimizationResult:
    """u <- Proj_U(u + step H_u) with Armijo backtracking on J.

    The first search starts from ``step0``. With ``step_rule="bb"`` later
    searches start from the Barzilai-Borwein step s's / s'y measured in the
    path-probability metric (the spectral projected gradient), which copes
    with coordinates of very different curvature; "fixed" always starts
    from ``step0``. Stops when the MP residual is at most ``tol_mp``, when no
    step gives sufficient decrease, or after ``max_outer_iters``.
    """
    cfg = config or OptimizerConfig()
    problem.check_control(u0)
    tree = problem.tree
    u = u0
    traj = solve_state(problem, u, **solver)
    J = evaluate_cost(problem, u, traj)
    history = [J]
    converged = False
    it = 0
    evals = 1
    step0 = cfg.step0
    prev = None
    for it in range(cfg.max_outer_iters + 1):
        Hu = hamiltonian_u_all(problem, u, traj)
        rho = max(float(np.max(r)) for r in mp_residual(problem, u, Hu))
        if rho <= cfg.tol_mp:
            converged = True
            break
        if it == cfg.max_outer_iters:
            break
        grad = cost_gradient(problem, Hu)
        if prev is not None and cfg.step_rule == "bb":
            s_prev, g_prev = prev
            ss = sum(float(tree.probs[t] @ (s_prev[t] ** 2).sum(axis=1)) for t in range(tree.T + 1))
            sy = sum(float(np.sum(s_prev[t] * (grad[t] - g_prev[t]))) for t in range(tree.T + 1))
            step0 = cfg.step_max if sy <= 0 else min(cfg.step_max, max(cfg.step_min, ss / sy))
        step = step0
        accepted = False
        for _ in range(cfg.max_backtracks):
            vals = _clip(problem, [u[t] + step * Hu[t] for t in range(tree.T + 1)])
            du = [vals[t] - u[t] for t in range(tree.T + 1)]
            decrease = sum(float(np.sum(g * s)) for g, s in zip(grad, du))
            if decrease < 0:
                cand = AdaptedProcess(tree, 0, tree.T, tuple(vals))
                ctraj = solve_state(problem, cand, **solver)
                Jc = evaluate_cost(problem, cand, ctraj)
                evals += 1
                if Jc <= J + cfg.c1 * decrease:
                    prev = (du, grad)
                    u, traj, J = cand, ctraj, Jc
                    accepted = True
                    break
            step *= cfg.shrink
        history.append(J)
        if not accepted:
            break
    report = check_mp(problem, u, cfg.tol_mp)
    J = evaluate_cost(problem, u)
    return OptimizationResult(u, J, report, it, converged and report.passed, history, evals)


def decision_coordinates(problem: ControlProblem) -> list[tuple[int, int, int]]:
    """(t, node position, component) of every free control coordinate, in lexicographic order."""
    tree = problem.tree
    coords = []
    for t in range(tree.T + 1):
        free = [k for k in range(problem.r) if problem.hi[t, k] > problem.lo[t, k]]
        for j in range(tree.n_nodes(t)):
            coords.extend((t, j, k) for k in free)
    return coords


def grid_spacing(problem: ControlProblem, grid_points: int) -> float:
    widths = problem.hi - problem.lo
    return float(np.max(widths) / (grid_points - 1)) if grid_points > 1 else float(np.max(widths))


def brute_force(problem: ControlProblem, grid_points_per_dim: int, budget: int = DEFAULT_BUDGET,
                tol_mp: float = TOL_MP, **solver) -> OptimizationResult:
    """Exhaustive search over adapted controls on the uniform grid of each U_t.

    Candidates are enumerated in lexicographic order of grid indices over
    ``decision_coordinates``; only strict improvements replace the incumbent,
    so ties go to the lexicographically smallest index.
    """
    G = int(grid_points_per_dim)
    if G < 1:
        raise ValueError("grid_points_per_dim must be >= 1")
    tree = problem.tree
    coords = decision_coordinates(problem)
    count = G ** len(coords)
    if count > budget:
        raise BudgetExceeded(count, budget)
    grids = {(t, k): np.linspace(problem.lo[t, k], problem.hi[t, k], G) if G > 1
             else np.array([0.5 * (problem.lo[t, k] + problem.hi[t, k])])
             for t in range(tree.T + 1) for k in range(problem.r)}
    base = [np.broadcast_to(problem.lo[t], (tree.n_nodes(t), problem.r)).copy() for t in range(tree.T + 1)]
    best_J, best_vals = np.inf, None
    for combo in itertools.product(range(G), repeat=len(coords)):
        vals = [b.copy() for b in base]
        for (t, j, k), g in zip(coords, combo):
            vals[t][j, k] = grids[t, k][g]
        u = AdaptedProcess(tree, 0, tree.T, tuple(vals))
        J = evaluate_cost(problem, u, **solver)
        if J < best_J:
            best_J, best_vals = J, vals
    u = AdaptedProcess(tree, 0, tree.T, tuple(best_vals))
    report = check_mp(problem, u, tol_mp)
    return OptimizationResult(u, best_J, report, 0, True, [], count)


@dataclass
class ExperimentRow:
    grid_points: int
    spacing: float
    J: float
    max_rho: float
    result: OptimizationResult | None = field(default=None, repr=False, compare=False)


@dataclass
class ExperimentReport:
    rows: list
    ratios: list
    monotone: bool
    notes: list = field(default_factory=list)
    slack: float = 0.3

    def table(self) -> str:
        lines = [f"{'grid':>6} {'spacing':>12} {'J':>22} {'max_rho':>12} {'ratio':>8}"]
        for i, r in enumerate(self.rows):
            ratio = f"{self.ratios[i - 1]:8.3f}" if i > 0 else f"{'':>8}"
            lines.append(f"{r.grid_points:>6} {r.spacing:>12.6g} {r.J:>22.15g} {r.max_rho:>12.4e} {ratio}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def mp_necessity_experiment(problem: ControlProblem, grids=(5, 9, 17), budget: int = DEFAULT_BUDGET,
                            slack: float = 0.3, **solver) -> ExperimentReport:
    """Brute-force optimum and its MP residual for each grid refinement.

    ``monotone`` holds when every refinement satisfies
    rho_{k+1} <= (1 + slack) rho_k.
    """
    rows, notes = [], []
    for G in grids:
        try:
            res = brute_force(problem, G, budget=budget, **solver)
        except BudgetExceeded as exc:
            notes.append(f"grid {G}: BudgetExceeded ({exc.combinations} combinations > budget {exc.budget})")
            break
        rows.append(ExperimentRow(G, grid_spacing(problem, G), res.J, res.mp_report.max_rho, res))
    ratios = []
    for a, b in zip(rows, rows[1:]):
        ratios.append(b.max_rho / a.max_rho if a.max_rho > 0 else (0.0 if b.max_rho == 0 else np.inf))
    monotone = all(b.max_rho <= (1 + slack) * a.max_rho for a, b in zip(rows, rows[1:]))
    return ExperimentReport(rows, ratios, monotone, notes, slack)
