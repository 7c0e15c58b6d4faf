from __future__ import annotations

import numpy as np
import pytest

from fbsdelta import (
    AdaptedProcess,
    ControlProblem,
    FunctionCoefficients,
    LQCoefficients,
    build_tree,
    check_monotone,
    itilde,
    solve_forward,
    solve_fully_coupled,
    solve_partially_coupled,
    solve_state,
    state_residuals,
)
from fbsdelta.errors import ControlOutOfDomain, DimensionMismatch, MissingYZ, NoConvergence

from instances import leaf_paths, monolithic_state_solve, monotone_full_instance, random_control, random_lq


def zero_problem(d=2, T=2, kind="partial", x0=1.5, yT=0.25, **fns):
    c = FunctionCoefficients(1, 1, 1, d, T, coupling=kind, **fns)
    return ControlProblem(build_tree(d, T, np.full(d, 1 / d)), c, [x0], [yT], [-1.0], [1.0])


def test_zero_coefficients_keep_initial_and_terminal_values():
    pb = zero_problem()
    sol = solve_state(pb, pb.constant_control())
    for t in range(3):
        assert np.all(sol.X[t] == 1.5)
        assert np.all(sol.Y[t] == 0.25)
    for t in range(2):
        assert np.allclose(sol.Z[t], 0)


def test_deterministic_drift():
    pb = zero_problem(b=lambda t, idx, x, y, zt, u: np.ones((len(idx), 1)))
    X = solve_forward(pb, pb.constant_control())
    for t in range(3):
        assert np.allclose(X[t], 1.5 + t)


def test_zero_generator_gives_conditional_expectation_of_yT():
    rng = np.random.default_rng(0)
    tree = build_tree(3, 2, [0.2, 0.3, 0.5])
    c = FunctionCoefficients(1, 1, 1, 3, 2)
    yT = rng.normal(size=(9, 1))
    pb = ControlProblem(tree, c, [0.0], yT, [0.0], [0.0])
    sol = solve_partially_coupled(pb, pb.constant_control())
    expected = sum(prob * yT[path[-1][1], 0] for path, prob in leaf_paths(tree))
    assert sol.Y[0][0, 0] == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("seed", range(4))
def test_partial_lq_matches_monolithic_oracle(seed):
    rng = np.random.default_rng(seed)
    pb = random_lq(rng, d=2 + seed % 2, T=3, m=2, n=2, r=2)
    u = random_control(rng, pb)
    X, Y, Z = monolithic_state_solve(pb, u)
    sol = solve_state(pb, u)
    I = itilde(pb.tree.d)
    for t in range(4):
        assert np.allclose(sol.X[t], X[t], atol=1e-11)
        assert np.allclose(sol.Y[t], Y[t], atol=1e-11)
    for t in range(3):
        assert np.allclose(sol.Z[t] @ I, Z[t] @ I, atol=1e-11)
    assert max(state_residuals(pb, u, sol)) <= 1e-12


def test_decoupled_full_instance_converges_in_one_picard_iteration():
    rng = np.random.default_rng(9)
    pb = random_lq(rng, d=2, T=3, m=1, n=1, r=1, kind="partial")
    full = ControlProblem(pb.tree, LQCoefficients(1, 1, 1, 2, 3, coupling="full", **pb.coeffs.arrays,
                                                  H=pb.coeffs.H, g=pb.coeffs.g),
                          pb.x0, pb.yT, pb.lo, pb.hi)
    u = random_control(rng, pb)
    ref = solve_state(pb, u)
    sol = solve_fully_coupled(full, u, method="picard", theta=1.0)
    # the first sweep already solves the system; the second confirms it
    assert sol.diagnostics["iterations"] <= 2
    for t in range(4):
        assert np.allclose(sol.Y[t], ref.Y[t], atol=1e-13)


def test_picard_and_newton_agree_on_monotone_instance():
    pb = monotone_full_instance()
    u = pb.constant_control(0.2)
    pic = solve_fully_coupled(pb, u, method="picard", theta=0.5)
    new = solve_fully_coupled(pb, u, method="newton")
    for t in range(4):
        assert np.allclose(pic.X[t], new.X[t], atol=1e-9)
        assert np.allclose(pic.Y[t], new.Y[t], atol=1e-9)
    assert max(state_residuals(pb, u, pic)) <= 1e-10
    X, Y, Z = monolithic_state_solve(pb, u)
    for t in range(4):
        assert np.allclose(new.X[t], X[t], atol=1e-10)


def test_max_iter_one_raises_no_convergence():
    pb = monotone_full_instance()
    with pytest.raises(NoConvergence) as err:
        solve_fully_coupled(pb, pb.constant_control(0.2), max_iter=1)
    assert err.value.residual > 1e-10


def test_auto_falls_back_to_newton():
    rng = np.random.default_rng(4)
    pb = random_lq(rng, d=2, T=3, kind="full", scale=1.5, costs=False)
    u = random_control(rng, pb)
    sol = solve_fully_coupled(pb, u, method="auto", max_iter=20)
    assert max(state_residuals(pb, u, sol)) <= 1e-9


def test_forward_needs_yz_under_full_coupling():
    pb = monotone_full_instance()
    u = pb.constant_control(0.2)
    with pytest.raises(MissingYZ):
        solve_forward(pb, u)
    sol = solve_fully_coupled(pb, u)
    X = solve_forward(pb, u, yz_input=(sol.Y, sol.Z))
    for t in range(4):
        assert np.allclose(X[t], sol.X[t], atol=1e-12)


def test_control_domain_and_dimensions():
    pb = zero_problem()
    bad = pb.constant_control().replace(1, np.array([[0.0], [1.5]]))
    with pytest.raises(ControlOutOfDomain, match=r"node \(1,\)"):
        solve_state(pb, bad)
    with pytest.raises(DimensionMismatch):
        ControlProblem(pb.tree, pb.coeffs, [0.0], np.zeros((3, 1)), [0.0], [1.0])
    with pytest.raises(ValueError):
        ControlProblem(pb.tree, pb.coeffs, [0.0], [0.0], [1.0], [0.0])


def test_residual_walker_detects_corruption():
    pb = monotone_full_instance()
    u = pb.constant_control(0.2)
    sol = solve_fully_coupled(pb, u)
    Xbad = sol.X.replace(2, sol.X[2] + np.array([[0.0], [1e-6], [0.0], [0.0]]))
    fres, _ = state_residuals(pb, u, type(sol)(Xbad, sol.Y, sol.Z))
    assert fres == pytest.approx(1e-6, rel=1e-3)


# --- monotone condition -----------------------------------------------------

def _example_coeffs(sign=-1.0, zscale=1.0):
    b = lambda t, idx, x, y, zt, u: sign * y  # noqa: E731

    def sigma(t, idx, x, y, zt, u):
        out = np.zeros((len(idx), 1, 2))
        out[:, 0, 0] = -zscale * zt[:, 0, 0]
        return out

    f = lambda t, idx, x, y, zt, u: x  # noqa: E731
    return FunctionCoefficients(1, 1, 1, 2, 2, b=b, sigma=sigma, f=f, coupling="full")


def _example_problem(**kw):
    return ControlProblem(build_tree(2, 2, [0.5, 0.5]), _example_coeffs(**kw), [0.0], [0.0], [0.0], [1.0])


def test_monotone_example_slack_matches_hand_derivation():
    # <A1 - A2, dl> = -dx^2 - dy^2 - p(1-p) dzt^2 with p = 1/2, so the best alpha is 1/4
    rep = check_monotone(_example_problem(), alpha=0.2, samples=20000)
    assert rep.passed and rep.method == "sampled"
    assert rep.alpha_estimate == pytest.approx(0.25, abs=2e-3)
    assert rep.alpha_estimate >= 0.25 - 1e-12
    assert not check_monotone(_example_problem(), alpha=0.5).passed
    assert check_monotone(_example_problem(zscale=4.0), alpha=0.5).passed


def test_monotone_wrong_sign_fails_with_witness():
    rep = check_monotone(_example_problem(sign=1.0), alpha=0.5)
    assert not rep.passed
    w = rep.witnesses[0]
    assert w["slack"] < 0 and 0 <= w["t"] < 2
    assert rep.alpha_estimate < 0


def test_monotone_all_zero_coefficients():
    pb = ControlProblem(build_tree(2, 2, [0.5, 0.5]), LQCoefficients(1, 1, 1, 2, 2, coupling="full"),
                        [0.0], [0.0], [0.0], [1.0])
    assert check_monotone(pb, alpha=0.0).passed
    assert not check_monotone(pb, alpha=0.1).passed
    assert check_monotone(pb, alpha=0.0, method="sampled").passed


def test_matrix_and_sampled_methods_agree():
    pb = monotone_full_instance()
    mat = check_monotone(pb, alpha=0.5)
    smp = check_monotone(pb, alpha=0.5, method="sampled", samples=40000)
    assert mat.passed and smp.passed
    assert mat.method == "matrix"
    assert smp.alpha_estimate >= mat.alpha_estimate - 1e-12
    assert smp.alpha_estimate == pytest.approx(mat.alpha_estimate, abs=5e-3)


def test_monotone_requires_full_coupling():
    with pytest.raises(ValueError):
        check_monotone(zero_problem())


def test_adapted_process_shape_checks():
    tree = build_tree(2, 2, [0.5, 0.5])
    with pytest.raises(Exception):
        AdaptedProcess(tree, 0, 1, (np.zeros((1, 1)), np.zeros((3, 1))))
