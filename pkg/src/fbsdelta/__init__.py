"""Forward-backward stochastic difference equations on scenario trees.

Solvers for controlled FBSΔE systems driven by a finite-state martingale
difference, their adjoint and variational equations, the maximum-principle
residual, and small-scale control optimizers.
"""

from .bsde import BsdeSolution, canonicalize, equiv_m, mrep, solve_bsde, z_seminorm
from .coefficients import CoefficientSet, FunctionCoefficients, LQCoefficients
from .control import (
    AdjointTriple,
    MPReport,
    PerturbationSpec,
    VariationalTriple,
    check_mp,
    evaluate_cost,
    hamiltonian,
    hamiltonian_u,
    perturb,
    solve_adjoint_p1,
    solve_adjoint_p2,
    solve_variational_p1,
    solve_variational_p2,
)
from .fbsde import (
    ControlProblem,
    MonotoneReport,
    SolutionTriple,
    check_monotone,
    solve_forward,
    solve_fully_coupled,
    solve_partially_coupled,
    solve_state,
    state_residuals,
)
from .lattice import (
    AdaptedProcess,
    ScenarioTree,
    build_tree,
    cond_cov,
    cond_expect,
    expectation,
    itilde,
    martingale_increment,
    norm_equivalence_constants,
)
from .optimize import OptimizationResult, OptimizerConfig, brute_force, mp_necessity_experiment, projected_gradient

__version__ = "0.1.0"

__all__ = [
    "AdaptedProcess",
    "AdjointTriple",
    "BsdeSolution",
    "CoefficientSet",
    "ControlProblem",
    "FunctionCoefficients",
    "LQCoefficients",
    "MPReport",
    "MonotoneReport",
    "OptimizationResult",
    "OptimizerConfig",
    "PerturbationSpec",
    "ScenarioTree",
    "SolutionTriple",
    "VariationalTriple",
    "brute_force",
    "build_tree",
    "canonicalize",
    "check_monotone",
    "check_mp",
    "cond_cov",
    "cond_expect",
    "equiv_m",
    "evaluate_cost",
    "expectation",
    "hamiltonian",
    "hamiltonian_u",
    "itilde",
    "martingale_increment",
    "mp_necessity_experiment",
    "mrep",
    "norm_equivalence_constants",
    "perturb",
    "projected_gradient",
    "solve_adjoint_p1",
    "solve_adjoint_p2",
    "solve_bsde",
    "solve_forward",
    "solve_fully_coupled",
    "solve_partially_coupled",
    "solve_state",
    "solve_variational_p1",
    "solve_variational_p2",
    "state_residuals",
    "z_seminorm",
]
