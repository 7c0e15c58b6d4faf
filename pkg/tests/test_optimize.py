from __future__ import annotations

import numpy as np
import pytest

from fbsdelta import (
    ControlProblem,
    FunctionCoefficients,
    LQCoefficients,
    OptimizerConfig,
    brute_force,
    build_tree,
    check_mp,
    evaluate_cost,
    mp_necessity_experiment,
    projected_gradient,
)
from fbsdelta.errors import BudgetExceeded
from fbsdelta.optimize import decision_coordinates, grid_spacing

from instances import monotone_full_instance, random_control


def scalar_problem(T=2, lo=-1.0, hi=1.0, **arrays):
    """d = 2 LQ problem whose terminal control is pinned (U_T a single point)."""
    c = LQCoefficients(1, 1, 1, 2, T, **arrays)
    los = np.full((T + 1, 1), lo)
    his = np.full((T + 1, 1), hi)
    los[T] = his[T] = 0.0
    return ControlProblem(build_tree(2, T, [0.4, 0.6]), c, [0.5], [0.0], los, his)


def interior_problem():
    return scalar_problem(A=[[0.3]], B=[[1.0]], Sx=np.array([0.2, -0.1]).reshape(1, 2, 1),
                          Su=np.array([0.3, 0.1]).reshape(1, 2, 1), Fx=[[0.5]], Fu=[[0.2]],
                          Q=[[1.0]], Qy=[[0.5]], R=[[2.0]], qy=[0.3], ru=[0.1], H=[[1.0]], g=[0.2])


def test_single_point_domain_converges_immediately():
    pb = scalar_problem(lo=0.3, hi=0.3, B=[[1.0]], Q=[[1.0]], R=[[1.0]])
    res = projected_gradient(pb, pb.constant_control())
    assert res.iterations == 0 and res.converged
    assert res.mp_report.max_rho == 0.0


def test_brute_force_picks_nearest_grid_point():
    c = FunctionCoefficients(1, 1, 1, 2, 1, l=lambda t, idx, x, y, zt, u: (u[:, 0] - 0.4) ** 2)
    pb = ControlProblem(build_tree(2, 1, [0.5, 0.5]), c, [0.0], [0.0], [[0.0], [0.0]], [[1.0], [0.0]])
    res = brute_force(pb, 3)
    assert res.evaluations == 3
    assert res.control[0][0, 0] == 0.5


def test_brute_force_enumeration_size_and_budget():
    pb = interior_problem()
    assert len(decision_coordinates(pb)) == 3
    assert brute_force(pb, 5).evaluations == 125
    with pytest.raises(BudgetExceeded) as err:
        brute_force(pb, 5, budget=10)
    assert err.value.combinations == 125


def test_brute_force_tie_break_is_lexicographic():
    pb = scalar_problem()
    res = brute_force(pb, 3)
    for t in range(2):
        assert np.all(res.control[t] == -1.0)


def test_brute_force_is_grid_minimum():
    pb = interior_problem()
    res = brute_force(pb, 5)
    rng = np.random.default_rng(0)
    grid = np.linspace(-1, 1, 5)
    for _ in range(30):
        u = random_control(rng, pb)
        u = u.replace(0, grid[rng.integers(0, 5, size=(1, 1))]).replace(1, grid[rng.integers(0, 5, size=(2, 1))])
        assert evaluate_cost(pb, u) >= res.J - 1e-15


def test_projected_gradient_reaches_brute_force_argmin():
    pb = interior_problem()
    bf = brute_force(pb, 21)
    res = projected_gradient(pb, pb.constant_control())
    assert res.converged and res.mp_report.max_rho <= 1e-8
    h = grid_spacing(pb, 21)
    for t in range(2):
        assert np.all(np.abs(res.control[t] - bf.control[t]) <= h / 2 + 1e-12)
    assert res.J <= bf.J + 1e-15


def test_projected_gradient_pins_active_bound():
    # a strong linear pull (ru = -5) pushes the optimum to hi = 1 at t = 0, 1
    pb = scalar_problem(B=[[1.0]], Q=[[0.5]], R=[[1.0]], ru=[-5.0])
    bf = brute_force(pb, 9)
    assert np.all(bf.control[0] == 1.0) and np.all(bf.control[1] == 1.0)
    res = projected_gradient(pb, pb.constant_control())
    assert res.converged
    assert np.all(res.control[0] == 1.0) and np.all(res.control[1] == 1.0)
    assert res.mp_report.max_rho <= 1e-8


@pytest.mark.parametrize("rule", ["bb", "fixed"])
def test_projected_gradient_descent_and_admissibility(rule):
    pb = interior_problem()
    res = projected_gradient(pb, random_control(np.random.default_rng(1), pb), OptimizerConfig(step_rule=rule))
    assert all(b <= a + 1e-15 for a, b in zip(res.history, res.history[1:]))
    pb.check_control(res.control)
    assert res.converged


def test_projected_gradient_fully_coupled():
    pb = monotone_full_instance()
    res = projected_gradient(pb, pb.constant_control(0.2))
    assert res.converged
    assert check_mp(pb, res.control).max_rho <= 1e-8


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(shrink=1.5)
    with pytest.raises(ValueError):
        OptimizerConfig(step_rule="newton")
    with pytest.raises(ValueError):
        OptimizerConfig(step0=0.0)


def test_experiment_constant_cost():
    pb = scalar_problem()
    rep = mp_necessity_experiment(pb, grids=(3, 5))
    assert [r.max_rho for r in rep.rows] == [0.0, 0.0]
    assert rep.monotone and not rep.notes


def test_experiment_budget_gives_partial_report():
    pb = interior_problem()
    rep = mp_necessity_experiment(pb, grids=(3, 5, 9), budget=200)
    assert len(rep.rows) == 2
    assert "BudgetExceeded" in rep.notes[0] and "729" in rep.notes[0]
    assert "BudgetExceeded" in rep.table()
