"""Controlled forward equations and coupled forward-backward difference systems.

Problem 1 (partial coupling): the forward coefficients see only (x, u), so X
is an explicit forward recursion and (Y, Z) a BSΔE driven by it.
Problem 2 (full coupling, m = n = 1): b and sigma also see (y, zt), which is
solved either by damped Picard sweeps or by Newton on the stacked node system.

The same stacked machinery (``FBSystem``) also solves the linear variational
and adjoint systems of the control module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import backward_sweep, canonicalize
from .coefficients import CoefficientSet, LQCoefficients
from .errors import ControlOutOfDomain, DimensionMismatch, MissingYZ, NoConvergence, SingularJacobian
from .lattice import AdaptedProcess, ScenarioTree, itilde, itilde_pinv

DOMAIN_TOL = 1e-12
NEWTON_FD_STEP = 1e-7
RESIDUAL_TOL = 1e-10


@dataclass
class ControlProblem:
    """Tree, coefficients, initial/terminal data and box control domains.

    ``lo``/``hi`` have shape (T+1, r); a single length-r vector is broadcast
    over time. ``yT`` is a length-n vector or a (d**T, n) array of leaf values.
    """

    tree: ScenarioTree
    coeffs: CoefficientSet
    x0: np.ndarray
    yT: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        c, tree = self.coeffs, self.tree
        if (c.d, c.T) != (tree.d, tree.T):
            raise DimensionMismatch(f"coefficients are for d={c.d}, T={c.T}; tree has d={tree.d}, T={tree.T}")
        self.x0 = np.asarray(self.x0, dtype=float).reshape(c.m)
        yT = np.asarray(self.yT, dtype=float)
        NT = tree.n_nodes(tree.T)
        if yT.size == c.n:
            yT = np.broadcast_to(yT.reshape(c.n), (NT, c.n)).copy()
        if yT.shape != (NT, c.n):
            raise DimensionMismatch(f"yT has shape {yT.shape}; expected ({c.n},) or ({NT}, {c.n})")
        self.yT = yT
        self.lo = self._box(self.lo, "lo")
        self.hi = self._box(self.hi, "hi")
        if np.any(self.lo > self.hi):
            t, k = np.argwhere(self.lo > self.hi)[0]
            raise ValueError(f"control domain empty at t={t}, component {k}: lo > hi")

    def _box(self, v, name):
        v = np.asarray(v, dtype=float)
        r, T1 = self.coeffs.r, self.tree.T + 1
        if v.shape == (r,) or v.shape == ():
            v = np.broadcast_to(v, (T1, r)).copy()
        if v.shape != (T1, r):
            raise DimensionMismatch(f"{name} has shape {v.shape}; expected ({r},) or ({T1}, {r})")
        return v

    @property
    def m(self) -> int:
        return self.coeffs.m

    @property
    def n(self) -> int:
        return self.coeffs.n

    @property
    def r(self) -> int:
        return self.coeffs.r

    @property
    def coupling(self) -> str:
        return self.coeffs.coupling

    def constant_control(self, value=None) -> AdaptedProcess:
        """Constant control, by default the box midpoint at each time."""
        vals = []
        for t in range(self.tree.T + 1):
            v = 0.5 * (self.lo[t] + self.hi[t]) if value is None else np.asarray(value, dtype=float)
            vals.append(np.broadcast_to(v, (self.tree.n_nodes(t), self.r)).copy())
        return AdaptedProcess(self.tree, 0, self.tree.T, tuple(vals))

    def check_control(self, control: AdaptedProcess) -> None:
        if control.tree is not self.tree and (control.tree.d, control.tree.T) != (self.tree.d, self.tree.T):
            raise DimensionMismatch("control lives on a different tree")
        if (control.t_lo, control.t_hi) != (0, self.tree.T) or control.value_shape != (self.r,):
            raise DimensionMismatch(f"control must cover times 0..{self.tree.T} with shape ({self.r},)")
        for t in range(self.tree.T + 1):
            u = control[t]
            bad = (u < self.lo[t] - DOMAIN_TOL) | (u > self.hi[t] + DOMAIN_TOL)
            if np.any(bad):
                j, k = np.argwhere(bad)[0]
                raise ControlOutOfDomain(
                    f"u[{k}] = {float(u[j, k])!r} outside [{self.lo[t, k]}, {self.hi[t, k]}] "
                    f"at t={t}, node {self.tree.node(t, j)}")


@dataclass
class SolutionTriple:
    X: AdaptedProcess
    Y: AdaptedProcess
    Z: AdaptedProcess
    diagnostics: dict = field(default_factory=dict)

    @property
    def Z_tilde(self) -> AdaptedProcess:
        I = itilde(self.X.tree.d)
        return AdaptedProcess(self.Z.tree, 0, self.Z.t_hi, tuple(z @ I for z in self.Z.values))

    def zt(self, t: int) -> np.ndarray:
        """Z_t Itilde at depth t, zero at the horizon."""
        tree = self.X.tree
        if t >= tree.T:
            return np.zeros((tree.n_nodes(t), self.Y.value_shape[0], tree.d - 1))
        return self.Z[t] @ itilde(tree.d)


# ---------------------------------------------------------------------------
# generic stacked forward-backward system
# ---------------------------------------------------------------------------

@dataclass
class FBSystem:
    """A_{t+1} = A_t + drift(t) + diffusion(t) M_{t+1}, A_0 given;
    B_t = B_{t+1} + gen(t+1) - Z_t M_{t+1}, B_T given.

    Callables receive ``(t, A_t, B_t, Bt_t)`` as full depth-t arrays with
    shapes (N, a), (N, b), (N, b, d-1); ``Bt`` is Z_t Itilde (zero at T).
    drift -> (N, a), diffusion -> (N, a, d) for t < T; gen -> (N, b) for t >= 1.
    ``coupled`` says whether drift/diffusion read (B, Bt).
    """

    tree: ScenarioTree
    a: int
    b: int
    A0: np.ndarray
    BT: np.ndarray
    drift: Callable
    diffusion: Callable
    generator: Callable
    coupled: bool = True

    def zeros_B(self):
        tree = self.tree
        Bs = [np.zeros((tree.n_nodes(t), self.b)) for t in range(tree.T)] + [np.asarray(self.BT, dtype=float)]
        Zts = [np.zeros((tree.n_nodes(t), self.b, tree.d - 1)) for t in range(tree.T)]
        return Bs, Zts

    def zt_at(self, Zts, t):
        if t >= self.tree.T:
            return np.zeros((self.tree.n_nodes(t), self.b, self.tree.d - 1))
        return Zts[t]

    def forward(self, Bs, Zts) -> list[np.ndarray]:
        tree = self.tree
        As = [np.asarray(self.A0, dtype=float).reshape(1, self.a)]
        for t in range(tree.T):
            A = As[t]
            dr = self.drift(t, A, Bs[t], Zts[t])
            df = self.diffusion(t, A, Bs[t], Zts[t])
            M = tree.increments(t)
            nxt = A[:, None, :] + dr[:, None, :] + np.einsum("nad,nid->nia", df, M)
            As.append(nxt.reshape(-1, self.a))
        return As

    def backward(self, As):
        def gen(t, idx, y, zt):
            return self.generator(t, As[t], y, zt)
        Bs, Zs = backward_sweep(self.tree, gen, np.asarray(self.BT, dtype=float))
        I = itilde(self.tree.d)
        return Bs, [Z @ I for Z in Zs], Zs

    def residuals(self, As, Bs, Zts) -> tuple[np.ndarray, np.ndarray]:
        """Stacked forward and backward residuals (all nodes, all outcomes)."""
        tree, d = self.tree, self.tree.d
        Ip = itilde_pinv(d)
        fw, bw = [], []
        for t in range(tree.T):
            A, B, Zt = As[t], Bs[t], Zts[t]
            N = len(A)
            M = tree.increments(t)
            dr = self.drift(t, A, B, Zt)
            df = self.diffusion(t, A, B, Zt)
            r = (As[t + 1].reshape(N, d, self.a) - A[:, None, :] - dr[:, None, :]
                 - np.einsum("nad,nid->nia", df, M))
            fw.append(r.reshape(-1))
            g = self.generator(t + 1, As[t + 1], Bs[t + 1], self.zt_at(Zts, t + 1))
            Z = Zt @ Ip
            r = (Bs[t + 1].reshape(N, d, self.b) - B[:, None, :] + g.reshape(N, d, self.b)
                 - np.einsum("nkd,nid->nik", Z, M))
            bw.append(r.reshape(-1))
        return np.concatenate(fw), np.concatenate(bw)

    # packing of the Newton unknowns: A_1..A_T, B_0..B_{T-1}, Bt_0..Bt_{T-1}
    def pack(self, As, Bs, Zts) -> np.ndarray:
        T = self.tree.T
        return np.concatenate([As[t].reshape(-1) for t in range(1, T + 1)]
                              + [Bs[t].reshape(-1) for t in range(T)]
                              + [Zts[t].reshape(-1) for t in range(T)])

    def unpack(self, v):
        tree, T, d = self.tree, self.tree.T, self.tree.d
        pos = 0
        As = [np.asarray(self.A0, dtype=float).reshape(1, self.a)]
        for t in range(1, T + 1):
            k = tree.n_nodes(t) * self.a
            As.append(v[pos:pos + k].reshape(-1, self.a))
            pos += k
        Bs = []
        for t in range(T):
            k = tree.n_nodes(t) * self.b
            Bs.append(v[pos:pos + k].reshape(-1, self.b))
            pos += k
        Bs.append(np.asarray(self.BT, dtype=float))
        Zts = []
        for t in range(T):
            k = tree.n_nodes(t) * self.b * (d - 1)
            Zts.append(v[pos:pos + k].reshape(-1, self.b, d - 1))
            pos += k
        return As, Bs, Zts

    def residual_vector(self, v) -> np.ndarray:
        return np.concatenate(self.residuals(*self.unpack(v)))


def _finish(system: FBSystem, As, Bs, Zts):
    Ip = itilde_pinv(system.tree.d)
    return As, Bs, [canonicalize(Zt @ Ip) for Zt in Zts]


def solve_picard(system: FBSystem, theta: float = 0.5, tol: float = RESIDUAL_TOL, max_iter: int = 500,
                 init=None):
    """Damped Picard: forward sweep with current (B, Z), then a BSΔE sweep.

    Iterates until the sup-node change of (B, Z Itilde) is at most ``tol``
    and the stacked residual of the resulting triple confirms it.
    """
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    Bs, Zts = init if init is not None else system.zeros_B()
    res = np.inf
    for it in range(1, max_iter + 1):
        As = system.forward(Bs, Zts)
        Bn, Ztn, _ = system.backward(As)
        change = max(max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(Bs, Bn)),
                     max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(Zts, Ztn)))
        if change <= tol or it == max_iter:
            fw, bw = system.residuals(As, Bn, Ztn)
            res = float(max(np.max(np.abs(fw), initial=0.0), np.max(np.abs(bw), initial=0.0)))
            if res <= tol:
                return _finish(system, As, Bn, Ztn) + ({"iterations": it, "residual": res, "method": "picard"},)
        else:
            res = change
        Bs = [(1 - theta) * B + theta * Bnew for B, Bnew in zip(Bs, Bn)]
        Zts = [(1 - theta) * Z + theta * Znew for Z, Znew in zip(Zts, Ztn)]
    raise NoConvergence(f"Picard did not reach residual {tol:g} in {max_iter} iterations (last {res:.3g})",
                        residual=res, iterations=max_iter)


def _jacobian(system: FBSystem, v, R0, step=NEWTON_FD_STEP):
    J = np.empty((len(R0), len(v)))
    for k in range(len(v)):
        h = step * max(1.0, abs(v[k]))
        w = v.copy()
        w[k] += h
        J[:, k] = (system.residual_vector(w) - R0) / h
    return J


def _solve(J, rhs):
    try:
        step = np.linalg.solve(J, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobian(f"stacked Jacobian is singular: {exc}") from None
    if not np.all(np.isfinite(step)) or np.linalg.cond(J) > 1e14:
        raise SingularJacobian(f"stacked Jacobian is numerically singular (cond {np.linalg.cond(J):.3g})")
    return step


def solve_newton(system: FBSystem, tol: float = RESIDUAL_TOL, max_iter: int = 50, init=None):
    """Damped Newton on the stacked residual with a finite-difference Jacobian."""
    if init is None:
        Bs, Zts = system.zeros_B()
        As = system.forward(Bs, Zts)
        Bs, Zts, _ = system.backward(As)
        As = system.forward(Bs, Zts)
    else:
        As, Bs, Zts = init
    v = system.pack(As, Bs, Zts)
    R = system.residual_vector(v)
    res = float(np.max(np.abs(R), initial=0.0))
    for it in range(1, max_iter + 1):
        if res <= tol:
            return _finish(system, *system.unpack(v)) + ({"iterations": it - 1, "residual": res, "method": "newton"},)
        J = _jacobian(system, v, R)
        step = _solve(J, -R)
        lam, norm0 = 1.0, np.linalg.norm(R)
        while True:
            w = v + lam * step
            Rw = system.residual_vector(w)
            if np.linalg.norm(Rw) < norm0 or lam < 1e-8:
                break
            lam *= 0.5
        v, R = w, Rw
        res = float(np.max(np.abs(R), initial=0.0))
    if res <= tol:
        return _finish(system, *system.unpack(v)) + ({"iterations": max_iter, "residual": res, "method": "newton"},)
    raise NoConvergence(f"Newton did not reach residual {tol:g} in {max_iter} iterations (last {res:.3g})",
                        residual=res, iterations=max_iter)


def solve_linear(system: FBSystem):
    """One stacked solve for systems whose residual is affine in the unknowns.

    Jacobian columns are exact differences against the zero vector; one step
    of iterative refinement cleans up rounding.
    """
    Bs, Zts = system.zeros_B()
    As = system.forward(Bs, Zts)
    v0 = np.zeros_like(system.pack(As, Bs, Zts))
    R0 = system.residual_vector(v0)
    J = np.empty((len(R0), len(v0)))
    for k in range(len(v0)):
        e = v0.copy()
        e[k] = 1.0
        J[:, k] = system.residual_vector(e) - R0
    v = _solve(J, -R0)
    v = v - _solve(J, system.residual_vector(v))
    res = float(np.max(np.abs(system.residual_vector(v)), initial=0.0))
    return _finish(system, *system.unpack(v)) + ({"iterations": 1, "residual": res, "method": "linear"},)


# ---------------------------------------------------------------------------
# state equations
# ---------------------------------------------------------------------------

def _state_system(problem: ControlProblem, control: AdaptedProcess) -> FBSystem:
    c, tree = problem.coeffs, problem.tree

    def args(t, X, Y, Zt):
        return np.arange(len(X)), X, Y, Zt, control[t]

    def drift(t, X, Y, Zt):
        return c.b(t, *args(t, X, Y, Zt))

    def diffusion(t, X, Y, Zt):
        return c.sigma(t, *args(t, X, Y, Zt))

    def generator(t, X, Y, Zt):
        return c.f(t, *args(t, X, Y, Zt))

    return FBSystem(tree, c.m, c.n, problem.x0, problem.yT, drift, diffusion, generator,
                    coupled=c.coupling == "full")


def _triple(tree, As, Bs, Zs, diagnostics) -> SolutionTriple:
    T = tree.T
    return SolutionTriple(AdaptedProcess(tree, 0, T, tuple(As)),
                          AdaptedProcess(tree, 0, T, tuple(Bs)),
                          AdaptedProcess(tree, 0, T - 1, tuple(Zs)), diagnostics)


def solve_forward(problem: ControlProblem, control: AdaptedProcess, yz_input=None) -> AdaptedProcess:
    """Explicit forward recursion for X; ``yz_input`` = (Y, Z) under full coupling."""
    problem.check_control(control)
    system = _state_system(problem, control)
    if problem.coupling == "full":
        if yz_input is None:
            raise MissingYZ("full coupling needs (Y, Z) to run the forward equation")
        Y, Z = yz_input
        I = itilde(problem.tree.d)
        Bs = [Y[t] for t in range(problem.tree.T + 1)]
        Zts = [Z[t] @ I for t in range(problem.tree.T)]
    else:
        Bs, Zts = system.zeros_B()
    As = system.forward(Bs, Zts)
    return AdaptedProcess(problem.tree, 0, problem.tree.T, tuple(As))


def solve_partially_coupled(problem: ControlProblem, control: AdaptedProcess) -> SolutionTriple:
    if problem.coupling != "partial":
        raise ValueError("solve_partially_coupled needs partial coupling")
    problem.check_control(control)
    system = _state_system(problem, control)
    As = system.forward(*system.zeros_B())
    Bs, Zts, Zs = system.backward(As)
    fw, bw = system.residuals(As, Bs, Zts)
    res = float(max(np.max(np.abs(fw)), np.max(np.abs(bw))))
    return _triple(problem.tree, As, Bs, Zs, {"iterations": 1, "residual": res, "method": "sweep"})


def solve_fully_coupled(problem: ControlProblem, control: AdaptedProcess, method: str = "picard",
                        theta: float = 0.5, tol: float = RESIDUAL_TOL, max_iter: int = 500) -> SolutionTriple:
    """Solve the state system with (Y, Z) feeding back into b and sigma.

    ``method`` is "picard", "newton", or "auto" (Picard, then Newton if
    Picard stalls). Works for partial coupling too, where Picard stops after
    one sweep.
    """
    problem.check_control(control)
    system = _state_system(problem, control)
    if method == "picard":
        out = solve_picard(system, theta=theta, tol=tol, max_iter=max_iter)
    elif method == "newton":
        out = solve_newton(system, tol=tol, max_iter=min(max_iter, 100))
    elif method == "auto":
        try:
            out = solve_picard(system, theta=theta, tol=tol, max_iter=max_iter)
        except NoConvergence:
            out = solve_newton(system, tol=tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _triple(problem.tree, *out)


def solve_state(problem: ControlProblem, control: AdaptedProcess, method: str = "picard",
                theta: float = 0.5, tol: float = RESIDUAL_TOL, max_iter: int = 500) -> SolutionTriple:
    """Dispatch on the coupling kind."""
    if problem.coupling == "partial":
        return solve_partially_coupled(problem, control)
    return solve_fully_coupled(problem, control, method=method, theta=theta, tol=tol, max_iter=max_iter)


def state_residuals(problem: ControlProblem, control: AdaptedProcess, sol: SolutionTriple) -> tuple[float, float]:
    """Independent node-by-node residual walker: (max forward, max backward).

    Walks every node and outcome with scalar coefficient calls; shares no
    code with the solvers beyond the coefficient set itself.
    """
    tree, c = problem.tree, problem.coeffs
    d = tree.d
    I = itilde(d)
    full = c.coupling == "full"
    fmax = bmax = 0.0
    for t in range(tree.T):
        for j in range(tree.n_nodes(t)):
            node = tree.node(t, j)
            x = sol.X[t][j][None]
            y = sol.Y[t][j][None]
            Z = sol.Z[t][j]
            zt = (Z @ I)[None]
            u = control[t][j][None]
            yy = y if full else np.zeros_like(y)
            zz = zt if full else np.zeros_like(zt)
            b = c.b(t, [j], x, yy, zz, u)[0]
            sig = c.sigma(t, [j], x, yy, zz, u)[0]
            P = tree.kernels[t][j]
            for i in range(d):
                child = node + (i,)
                _, jc = tree.index(child)
                Mi = np.eye(d)[i] - P
                x1 = sol.X[t + 1][jc]
                fmax = max(fmax, float(np.max(np.abs(x1 - x[0] - b - sig @ Mi))))
                y1 = sol.Y[t + 1][jc]
                zt1 = np.zeros((1,) + zt.shape[1:]) if t + 1 == tree.T else (sol.Z[t + 1][jc] @ I)[None]
                f1 = c.f(t + 1, [jc], x1[None], y1[None], zt1, control[t + 1][jc][None])[0]
                bmax = max(bmax, float(np.max(np.abs(y1 - y[0] + f1 - Z @ Mi))))
    return fmax, bmax


# ---------------------------------------------------------------------------
# monotone condition
# ---------------------------------------------------------------------------

@dataclass
class MonotoneReport:
    alpha: float
    alpha_estimate: float
    interior_margin: float
    terminal_margin: float
    initial_margin: float
    matrix_margins: dict | None
    passed: bool
    method: str
    witnesses: list = field(default_factory=list)

    @property
    def pass_(self) -> bool:
        return self.passed


def _monotone_blocks(problem: ControlProblem, control: AdaptedProcess | None):
    """Symmetrized -S blocks whose smallest eigenvalue is the alpha slack.

    Variables are v = (dx, dy, dzt) with dz = dzt Itilde^+. Returns lists of
    (t, node position, matrix) for interior, initial and terminal times.
    """
    tree, c = problem.tree, problem.coeffs
    d, T = tree.d, tree.T
    Ip = itilde_pinv(d)
    u_of = (lambda t: control[t]) if control is not None else (lambda t: problem.constant_control()[t])
    blocks = {"interior": [], "initial": [], "terminal": []}
    for t in range(T + 1):
        N = tree.n_nodes(t)
        idx = np.arange(N)
        x = np.zeros((N, 1))
        y = np.zeros((N, 1))
        zt = np.zeros((N, 1, d - 1))
        u = u_of(t)
        if t == T:
            fx = c.jacobian("f", "x", t, idx, x, y, zt, u).reshape(N)
            for j in range(N):
                blocks["terminal"].append((t, j, np.array([[fx[j]]])))
            continue
        J = {(nm, w): c.jacobian(nm, w, t, idx, x, y, zt, u) for nm in ("b", "sigma", "f") for w in ("x", "y", "zt")}
        C = tree.cov(t)
        for j in range(N):
            rows_f = np.concatenate([J["f", "x"][j].reshape(1), J["f", "y"][j].reshape(1),
                                     J["f", "zt"][j].reshape(d - 1)])
            rows_b = np.concatenate([J["b", "x"][j].reshape(1), J["b", "y"][j].reshape(1),
                                     J["b", "zt"][j].reshape(d - 1)])
            sig = np.concatenate([J["sigma", "x"][j].reshape(d, 1), J["sigma", "y"][j].reshape(d, 1),
                                  J["sigma", "zt"][j].reshape(d, d - 1)], axis=1)
            rows_z = Ip @ C[j] @ sig
            S = np.vstack([-rows_f[None], rows_b[None], rows_z])
            if t == 0:
                S = S[1:, 1:]
            Ssym = 0.5 * (S + S.T)
            blocks["initial" if t == 0 else "interior"].append((t, j, -Ssym))
    return blocks


def check_monotone(problem: ControlProblem, control: AdaptedProcess | None = None, alpha: float = 0.5,
                   samples: int = 10_000, seed: int = 0, scale: float = 1.0,
                   method: str | None = None) -> MonotoneReport:
    """Check the monotone condition with constant ``alpha``.

    Margins are reported as slack: margin = -<A1 - A2, l1 - l2> - alpha |l1 - l2|^2
    (normalized by |l1 - l2|^2 for the sampled form), so pass means every
    margin is >= 0. LQ coefficients are checked exactly through eigenvalues
    of the linear blocks; other coefficients are sampled. The control is
    used as the u argument; without one, u is sampled from the box (sampled
    method) or set to the box midpoint (matrix method, where u drops out).
    """
    if problem.coupling != "full":
        raise ValueError("the monotone condition concerns the fully coupled problem")
    if method is None:
        method = "matrix" if isinstance(problem.coeffs, LQCoefficients) else "sampled"
    if method == "matrix":
        return _check_matrix(problem, control, alpha)
    if method == "sampled":
        return _check_sampled(problem, control, alpha, samples, seed, scale)
    raise ValueError(f"unknown method {method!r}")


def _check_matrix(problem, control, alpha) -> MonotoneReport:
    blocks = _monotone_blocks(problem, control)
    slack = {}
    witnesses = []
    for kind, items in blocks.items():
        worst = np.inf
        for t, j, Mneg in items:
            w, V = np.linalg.eigh(Mneg)
            if w[0] < worst:
                worst = float(w[0])
            if w[0] - alpha < 0:
                witnesses.append({"t": t, "node": problem.tree.node(t, j), "kind": kind,
                                  "slack": float(w[0] - alpha), "direction": V[:, 0].tolist()})
        slack[kind] = worst
    est = min(slack.values())
    margins = {k: v - alpha for k, v in slack.items()}
    passed = all(v >= 0 for v in margins.values())
    witnesses.sort(key=lambda w: w["slack"])
    return MonotoneReport(alpha, est, margins["interior"] if blocks["interior"] else np.inf,
                          margins["terminal"], margins["initial"], margins, passed, "matrix", witnesses[:10])


def _check_sampled(problem, control, alpha, samples, seed, scale) -> MonotoneReport:
    tree, c = problem.tree, problem.coeffs
    d, T = tree.d, tree.T
    Ip = itilde_pinv(d)
    rng = np.random.default_rng(seed)
    times = rng.integers(0, T + 1, size=samples)
    worst = {"interior": np.inf, "initial": np.inf, "terminal": np.inf}
    ratio_min = np.inf
    witnesses = []
    for t in range(T + 1):
        K = int(np.sum(times == t))
        if K == 0:
            continue
        idx = rng.integers(0, tree.n_nodes(t), size=K)
        if control is not None:
            u = control[t][idx]
        else:
            u = problem.lo[t] + (problem.hi[t] - problem.lo[t]) * rng.random((K, problem.r))
        x1, x2 = scale * rng.standard_normal((2, K, 1))
        y1, y2 = scale * rng.standard_normal((2, K, 1))
        z1, z2 = scale * rng.standard_normal((2, K, 1, d - 1))
        if t == 0:
            x2 = x1
        if t == T:
            y2, z2 = y1, z1
            z1 = z2 = np.zeros_like(z1)
        dx, dy, dz = x1 - x2, y1 - y2, z1 - z2
        df = c.f(t, idx, x1, y1, z1, u) - c.f(t, idx, x2, y2, z2, u)
        inner = -(df * dx).sum(axis=1)
        norm2 = (dx**2).sum(axis=1)
        if t < T:
            db = c.b(t, idx, x1, y1, z1, u) - c.b(t, idx, x2, y2, z2, u)
            ds = c.sigma(t, idx, x1, y1, z1, u) - c.sigma(t, idx, x2, y2, z2, u)
            C = tree.cov(t)[idx]
            dZ = dz @ Ip
            inner = inner + (db * dy).sum(axis=1) + np.einsum("nia,nab,nib->n", ds, C, dZ)
            norm2 = norm2 + (dy**2).sum(axis=1) + (dz**2).sum(axis=(1, 2))
        ratio = -inner / np.maximum(norm2, 1e-300)
        kind = "initial" if t == 0 else "terminal" if t == T else "interior"
        worst[kind] = min(worst[kind], float(np.min(ratio - alpha)))
        ratio_min = min(ratio_min, float(np.min(ratio)))
        for k in np.nonzero(ratio - alpha < 0)[0][:10]:
            witnesses.append({"t": t, "node": tree.node(t, int(idx[k])), "kind": kind,
                              "slack": float(ratio[k] - alpha),
                              "lambda1": (float(x1[k, 0]), float(y1[k, 0]), z1[k, 0].tolist()),
                              "lambda2": (float(x2[k, 0]), float(y2[k, 0]), z2[k, 0].tolist()),
                              "u": u[k].tolist()})
    witnesses.sort(key=lambda w: w["slack"])
    passed = all(v >= 0 for v in worst.values())
    return MonotoneReport(alpha, ratio_min, worst["interior"], worst["terminal"], worst["initial"],
                          None, passed, "sampled", witnesses[:10])
