"""Cost functional, variational and adjoint equations, Hamiltonian and MP residual.

Both problems share one set of formulas. With C_t = E[M_{t+1} M_{t+1}^T | F_t]
the Hamiltonian is

    H(t, x, y, zt, u, p, q, k) = b.p + sum_i sigma_i C_t q_i^T - f.k - l,

and the adjoint system is

    Delta p_t = -H_x(t+1) + q_t M_{t+1},                     p_T = -h_x(X_T),
    Delta k_t = -H_y(t) + [-H_zt(t) Itilde^T C_t^+] M_{t+1},  k_0 = 0.

Under partial coupling b_y = b_zt = sigma_y = sigma_zt = 0, so k is an
explicit forward recursion and (p, q) a BSΔE; under full coupling the system
is solved as one stacked linear system.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import InfeasibleDirection
from .fbsde import (
    DOMAIN_TOL,
    ControlProblem,
    FBSystem,
    SolutionTriple,
    solve_linear,
    solve_state,
)
from .lattice import AdaptedProcess, itilde, itilde_pinv

TOL_MP = 1e-8


def _apply(J: np.ndarray, v: np.ndarray, out_shape: tuple) -> np.ndarray:
    """Contract a Jacobian (N, *out, *in) with a direction (N, *in)."""
    N = len(v)
    return np.einsum("noi,ni->no", J.reshape(N, int(np.prod(out_shape, dtype=int)), -1),
                     v.reshape(N, -1)).reshape((N,) + out_shape)


# ---------------------------------------------------------------------------
# cost and perturbations
# ---------------------------------------------------------------------------

def running_cost(problem: ControlProblem, control: AdaptedProcess, traj: SolutionTriple) -> list[np.ndarray]:
    """l(t, X_t, Y_t, Z_t Itilde, u_t) on every node, t = 0..T (zero at T)."""
    c, tree = problem.coeffs, problem.tree
    return [c.l(t, np.arange(tree.n_nodes(t)), traj.X[t], traj.Y[t], traj.zt(t), control[t])
            for t in range(tree.T + 1)]


def evaluate_cost(problem: ControlProblem, control: AdaptedProcess, traj: SolutionTriple | None = None,
                  **solver) -> float:
    """J(u) = E sum_{t<T} l(t) + E h(X_T)."""
    if traj is None:
        traj = solve_state(problem, control, **solver)
    tree = problem.tree
    ls = running_cost(problem, control, traj)
    J = sum(float(tree.probs[t] @ ls[t]) for t in range(tree.T))
    NT = tree.n_nodes(tree.T)
    return J + float(tree.probs[tree.T] @ problem.coeffs.h(np.arange(NT), traj.X[tree.T]))


@dataclass
class PerturbationSpec:
    """Direction dv at time s (an (d**s, r) array or node -> vector map) and size eps."""

    s: int
    dv: np.ndarray | Mapping
    eps: float

    def direction(self, problem: ControlProblem) -> np.ndarray:
        tree = problem.tree
        if not 0 <= self.s <= tree.T:
            raise InfeasibleDirection(f"perturbation time {self.s} outside 0..{tree.T}")
        if isinstance(self.dv, Mapping):
            dv = np.array([np.asarray(self.dv[nd], dtype=float) for nd in tree.nodes(self.s)])
        else:
            dv = np.asarray(self.dv, dtype=float)
        N = tree.n_nodes(self.s)
        if dv.size == problem.r and dv.shape != (N, problem.r):
            dv = np.broadcast_to(dv.reshape(problem.r), (N, problem.r)).copy()
        if dv.shape != (N, problem.r):
            raise InfeasibleDirection(f"direction has shape {dv.shape}, expected ({N}, {problem.r})")
        return dv


def perturb(problem: ControlProblem, control: AdaptedProcess, spec: PerturbationSpec) -> AdaptedProcess:
    """u^eps = u + delta_{ts} eps dv; the direction must keep u_s + dv in U_s."""
    if not 0.0 <= spec.eps <= 1.0:
        raise InfeasibleDirection(f"eps = {spec.eps} outside [0, 1]")
    dv = spec.direction(problem)
    s = spec.s
    target = control[s] + dv
    bad = (target < problem.lo[s] - DOMAIN_TOL) | (target > problem.hi[s] + DOMAIN_TOL)
    if np.any(bad):
        j, k = np.argwhere(bad)[0]
        raise InfeasibleDirection(f"u_s + dv leaves U_s at node {problem.tree.node(s, j)}, component {k}")
    return control.replace(s, control[s] + spec.eps * dv)


# ---------------------------------------------------------------------------
# linearization along a trajectory
# ---------------------------------------------------------------------------

class Linearization:
    """All coefficient Jacobians along (X, Y, Z Itilde, u), t = 0..T."""

    def __init__(self, problem: ControlProblem, control: AdaptedProcess, traj: SolutionTriple):
        self.problem, self.control, self.traj = problem, control, traj
        c, tree = problem.coeffs, problem.tree
        self.J: dict[tuple[str, str], list[np.ndarray]] = {}
        for name in ("b", "sigma", "f", "l"):
            for wrt in ("x", "y", "zt", "u"):
                self.J[name, wrt] = [
                    c.jacobian(name, wrt, t, np.arange(tree.n_nodes(t)), traj.X[t], traj.Y[t], traj.zt(t), control[t])
                    for t in range(tree.T + 1)]
        NT = tree.n_nodes(tree.T)
        self.h_x = c.h_x(np.arange(NT), traj.X[tree.T])

    def __getitem__(self, key):
        return self.J[key]

    def H_partial(self, wrt: str, t: int, p: np.ndarray, q: np.ndarray | None, k: np.ndarray) -> np.ndarray:
        """H_wrt at depth t for adjoint values p (N, m), q (N, m, d), k (N, n)."""
        c, tree = self.problem.coeffs, self.problem.tree
        N = tree.n_nodes(t)
        in_shape = c.in_shape(wrt)
        Jb = self.J["b", wrt][t].reshape(N, c.m, -1)
        Jf = self.J["f", wrt][t].reshape(N, c.n, -1)
        Jl = self.J["l", wrt][t].reshape(N, -1)
        out = np.einsum("nmi,nm->ni", Jb, p) - np.einsum("nki,nk->ni", Jf, k) - Jl
        if t < tree.T and q is not None:
            Js = self.J["sigma", wrt][t].reshape(N, c.m, tree.d, -1)
            out = out + np.einsum("nadi,nde,nae->ni", Js, tree.cov(t), q)
        return out.reshape((N,) + in_shape)


# ---------------------------------------------------------------------------
# variational equation
# ---------------------------------------------------------------------------

@dataclass
class VariationalTriple:
    xi: AdaptedProcess
    eta: AdaptedProcess
    zeta: AdaptedProcess
    diagnostics: dict = field(default_factory=dict)

    @property
    def zeta_tilde(self) -> AdaptedProcess:
        I = itilde(self.xi.tree.d)
        return AdaptedProcess(self.zeta.tree, 0, self.zeta.t_hi, tuple(z @ I for z in self.zeta.values))


def variational_system(lin: Linearization, spec: PerturbationSpec) -> FBSystem:
    problem = lin.problem
    c, tree = problem.coeffs, problem.tree
    dv = spec.eps * spec.direction(problem)

    def lin_part(name, t, xi, eta, zt):
        out = c.out_shape(name)
        v = (_apply(lin[name, "x"][t], xi, out) + _apply(lin[name, "y"][t], eta, out)
             + _apply(lin[name, "zt"][t], zt, out))
        if t == spec.s:
            v = v + _apply(lin[name, "u"][t], dv, out)
        return v

    return FBSystem(tree, c.m, c.n, np.zeros(c.m), np.zeros((tree.n_nodes(tree.T), c.n)),
                    drift=lambda t, A, B, Z: lin_part("b", t, A, B, Z),
                    diffusion=lambda t, A, B, Z: lin_part("sigma", t, A, B, Z),
                    generator=lambda t, A, B, Z: lin_part("f", t, A, B, Z),
                    coupled=c.coupling == "full")


def _variational(problem, control, spec, traj, full: bool) -> VariationalTriple:
    if traj is None:
        traj = solve_state(problem, control)
    lin = Linearization(problem, control, traj)
    system = variational_system(lin, spec)
    if full:
        As, Bs, Zs, diag = solve_linear(system)
    else:
        As = system.forward(*system.zeros_B())
        Bs, _, Zs = system.backward(As)
        diag = {"method": "sweep"}
    T = problem.tree.T
    return VariationalTriple(AdaptedProcess(problem.tree, 0, T, tuple(As)),
                             AdaptedProcess(problem.tree, 0, T, tuple(Bs)),
                             AdaptedProcess(problem.tree, 0, T - 1, tuple(Zs)), diag)


def solve_variational_p1(problem: ControlProblem, control: AdaptedProcess, spec: PerturbationSpec,
                         traj: SolutionTriple | None = None) -> VariationalTriple:
    """Forward recursion for xi, then the linear BSΔE for (eta, zeta)."""
    if problem.coupling != "partial":
        raise ValueError("solve_variational_p1 needs partial coupling")
    return _variational(problem, control, spec, traj, full=False)


def solve_variational_p2(problem: ControlProblem, control: AdaptedProcess, spec: PerturbationSpec,
                         traj: SolutionTriple | None = None) -> VariationalTriple:
    """The coupled linear variational system as one stacked linear solve."""
    return _variational(problem, control, spec, traj, full=True)


def solve_variational(problem, control, spec, traj=None) -> VariationalTriple:
    return _variational(problem, control, spec, traj, full=problem.coupling == "full")


# ---------------------------------------------------------------------------
# adjoint equation
# ---------------------------------------------------------------------------

@dataclass
class AdjointTriple:
    p: AdaptedProcess
    q: AdaptedProcess
    k: AdaptedProcess
    diagnostics: dict = field(default_factory=dict)

    @property
    def q_tilde(self) -> AdaptedProcess:
        I = itilde(self.p.tree.d)
        return AdaptedProcess(self.q.tree, 0, self.q.t_hi, tuple(z @ I for z in self.q.values))


def adjoint_system(lin: Linearization) -> FBSystem:
    """Forward variable k (dim n), backward pair (p, q) with p of dim m."""
    problem = lin.problem
    c, tree = problem.coeffs, problem.tree
    I = itilde(tree.d)
    Ip = itilde_pinv(tree.d)

    def drift(t, k, p, qt):
        return -lin.H_partial("y", t, p, qt @ Ip, k)

    def diffusion(t, k, p, qt):
        Hz = lin.H_partial("zt", t, p, qt @ Ip, k)
        return -np.einsum("nke,de,ndf->nkf", Hz, I, tree.cov_pinv(t))

    def generator(t, k, p, qt):
        return lin.H_partial("x", t, p, qt @ Ip if t < tree.T else None, k)

    return FBSystem(tree, c.n, c.m, np.zeros(c.n), -lin.h_x, drift, diffusion, generator,
                    coupled=c.coupling == "full")


def _adjoint(problem, control, traj, full: bool, lin: Linearization | None = None) -> AdjointTriple:
    if lin is None:
        if traj is None:
            traj = solve_state(problem, control)
        lin = Linearization(problem, control, traj)
    system = adjoint_system(lin)
    if full:
        ks, ps, qs, diag = solve_linear(system)
    else:
        ks = system.forward(*system.zeros_B())
        ps, _, qs = system.backward(ks)
        diag = {"method": "sweep"}
    T = problem.tree.T
    return AdjointTriple(AdaptedProcess(problem.tree, 0, T, tuple(ps)),
                         AdaptedProcess(problem.tree, 0, T - 1, tuple(qs)),
                         AdaptedProcess(problem.tree, 0, T, tuple(ks)), diag)


def solve_adjoint_p1(problem: ControlProblem, control: AdaptedProcess,
                     traj: SolutionTriple | None = None) -> AdjointTriple:
    """k by forward recursion, then (p, q) by a BSΔE from p_T = -h_x(X_T)."""
    if problem.coupling != "partial":
        raise ValueError("solve_adjoint_p1 needs partial coupling")
    return _adjoint(problem, control, traj, full=False)


def solve_adjoint_p2(problem: ControlProblem, control: AdaptedProcess,
                     traj: SolutionTriple | None = None) -> AdjointTriple:
    """The coupled adjoint system as one stacked linear solve."""
    return _adjoint(problem, control, traj, full=True)


def solve_adjoint(problem, control, traj=None) -> AdjointTriple:
    return _adjoint(problem, control, traj, full=problem.coupling == "full")


# ---------------------------------------------------------------------------
# Hamiltonian and MP residual
# ---------------------------------------------------------------------------

def hamiltonian(problem: ControlProblem, node, u, x, y, zt, p, q, k) -> float:
    """H at one node; q is an m x d matrix (any ~_M representative)."""
    c, tree = problem.coeffs, problem.tree
    node = tuple(node)
    t, j = tree.index(node)
    args = ([j], np.atleast_1d(np.asarray(x, float))[None], np.atleast_1d(np.asarray(y, float))[None],
            np.asarray(zt, float).reshape(1, c.n, tree.d - 1), np.atleast_1d(np.asarray(u, float))[None])
    H = float(c.b(t, *args)[0] @ np.atleast_1d(p)) - float(c.f(t, *args)[0] @ np.atleast_1d(k)) \
        - float(c.l(t, *args)[0])
    if t < tree.T:
        sig = c.sigma(t, *args)[0]
        H += float(np.einsum("ad,de,ae->", sig, tree.cov(t)[j], np.asarray(q, float).reshape(c.m, tree.d)))
    return H


def hamiltonian_u_all(problem: ControlProblem, control: AdaptedProcess, traj: SolutionTriple | None = None,
                      adj: AdjointTriple | None = None, lin: Linearization | None = None) -> list[np.ndarray]:
    """H_u on every node, t = 0..T, each entry of shape (d**t, r)."""
    if lin is None:
        if traj is None:
            traj = solve_state(problem, control)
        lin = Linearization(problem, control, traj)
    if adj is None:
        adj = _adjoint(problem, control, lin.traj, problem.coupling == "full", lin=lin)
    T = problem.tree.T
    return [lin.H_partial("u", t, adj.p[t], adj.q[t] if t < T else None, adj.k[t]) for t in range(T + 1)]


def hamiltonian_u(problem: ControlProblem, node, control: AdaptedProcess, traj: SolutionTriple | None = None,
                  adj: AdjointTriple | None = None) -> np.ndarray:
    t, j = problem.tree.index(tuple(node))
    return hamiltonian_u_all(problem, control, traj, adj)[t][j]


def cost_gradient(problem: ControlProblem, Hu: list[np.ndarray]) -> list[np.ndarray]:
    """dJ/du at each node: -(path probability) H_u."""
    return [-problem.tree.probs[t][:, None] * Hu[t] for t in range(len(Hu))]


def mp_residual(problem: ControlProblem, control: AdaptedProcess, Hu: list[np.ndarray]) -> list[np.ndarray]:
    """sup over the box of <H_u, v - u>, per node."""
    out = []
    for t, H in enumerate(Hu):
        u = control[t]
        up = H * (problem.hi[t] - u)
        dn = H * (problem.lo[t] - u)
        out.append(np.maximum(np.maximum(up, dn), 0.0).sum(axis=1))
    return out


@dataclass
class MPReport:
    rho: list
    max_rho: float
    argmax: tuple
    passed: bool
    tol: float
    Hu: list = field(default_factory=list, repr=False)

    @property
    def pass_(self) -> bool:
        return self.passed


def check_mp(problem: ControlProblem, control: AdaptedProcess, tol_mp: float = TOL_MP,
             traj: SolutionTriple | None = None, adj: AdjointTriple | None = None) -> MPReport:
    problem.check_control(control)
    Hu = hamiltonian_u_all(problem, control, traj, adj)
    rho = mp_residual(problem, control, Hu)
    best, arg = -1.0, (0, ())
    for t, r in enumerate(rho):
        j = int(np.argmax(r))
        if r[j] > best:
            best, arg = float(r[j]), (t, problem.tree.node(t, j))
    return MPReport(rho, best, arg, best <= tol_mp, tol_mp, Hu)


# ---------------------------------------------------------------------------
# product-rule bookkeeping
# ---------------------------------------------------------------------------

def cross_terms(problem: ControlProblem, control: AdaptedProcess, spec: PerturbationSpec,
                traj: SolutionTriple | None = None) -> dict[str, list[np.ndarray]]:
    """Pathwise pieces of Delta<xi, p> and Delta<eta, k> on each (node, outcome).

    Returns per-depth (d**t, d) arrays for t < T:
      "d_xp":   Delta<xi_t, p_t>
      "main_xp": <xi_{t+1}, -H_x(t+1)> + <S_xi M, q M> + <D_xi, p_t>
      "phi":     <xi_t + D_xi, q M> + <S_xi M, p_t>
    and likewise "d_yk", "main_yk" = -<G_eta(t+1), k_{t+1}> + <eta_t, D_k> +
    <zeta M, S_k M>, "psi" = <zeta M, k_t + D_k> + <eta_t, S_k M>, where D and
    S denote drift and diffusion coefficients. phi and psi have zero
    conditional mean.
    """
    if traj is None:
        traj = solve_state(problem, control)
    lin = Linearization(problem, control, traj)
    var = _variational(problem, control, spec, traj, problem.coupling == "full")
    adj = _adjoint(problem, control, traj, problem.coupling == "full", lin=lin)
    vs = variational_system(lin, spec)
    ads = adjoint_system(lin)
    tree = problem.tree
    d, I = tree.d, itilde(tree.d)
    out = {k: [] for k in ("d_xp", "main_xp", "phi", "d_yk", "main_yk", "psi")}
    for t in range(tree.T):
        N = tree.n_nodes(t)
        M = tree.increments(t)
        xi, eta, zeta = var.xi[t], var.eta[t], var.zeta[t]
        p, q, k = adj.p[t], adj.q[t], adj.k[t]
        zt = zeta @ I
        qt = q @ I
        Dxi = vs.drift(t, xi, eta, zt)
        Sxi = vs.diffusion(t, xi, eta, zt)
        Dk = ads.drift(t, k, p, qt)
        Sk = ads.diffusion(t, k, p, qt)
        xi1 = var.xi[t + 1].reshape(N, d, -1)
        eta1 = var.eta[t + 1].reshape(N, d, -1)
        p1 = adj.p[t + 1].reshape(N, d, -1)
        k1 = adj.k[t + 1].reshape(N, d, -1)
        zt1 = var.zeta[t + 1] @ I if t + 1 < tree.T else np.zeros((N * d,) + zt.shape[1:])
        qn = adj.q[t + 1] @ I if t + 1 < tree.T else np.zeros((N * d,) + qt.shape[1:])
        Hx1 = ads.generator(t + 1, adj.k[t + 1], adj.p[t + 1], qn).reshape(N, d, -1)
        Geta1 = vs.generator(t + 1, var.xi[t + 1], var.eta[t + 1], zt1).reshape(N, d, -1)
        SxiM = np.einsum("nad,nid->nia", Sxi, M)
        qM = np.einsum("nad,nid->nia", q, M)
        zM = np.einsum("nad,nid->nia", zeta, M)
        SkM = np.einsum("nad,nid->nia", Sk, M)
        out["d_xp"].append(np.einsum("nia,nia->ni", xi1, p1) - (xi * p).sum(1)[:, None])
        out["main_xp"].append(np.einsum("nia,nia->ni", xi1, -Hx1) + np.einsum("nia,nia->ni", SxiM, qM)
                              + (Dxi * p).sum(1)[:, None])
        out["phi"].append(np.einsum("na,nia->ni", xi + Dxi, qM) + np.einsum("nia,na->ni", SxiM, p))
        out["d_yk"].append(np.einsum("nia,nia->ni", eta1, k1) - (eta * k).sum(1)[:, None])
        out["main_yk"].append(-np.einsum("nia,nia->ni", Geta1, k1) + (eta * Dk).sum(1)[:, None]
                              + np.einsum("nia,nia->ni", zM, SkM))
        out["psi"].append(np.einsum("nia,na->ni", zM, k + Dk) + np.einsum("na,nia->ni", eta, SkM))
    return out
