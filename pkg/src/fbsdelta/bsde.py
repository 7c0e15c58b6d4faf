"""Backward stochastic difference equations driven by the martingale difference M.

Solves

    Y_{t+1} - Y_t = -f(t+1, Y_{t+1}, Z_{t+1} Itilde) + Z_t M_{t+1},   Y_T = eta,

node by node. The generator is explicit in the time-(t+1) values, so the
backward recursion needs no iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, LeafNode, NotCentered, ShapeMismatch
from .lattice import AdaptedProcess, ScenarioTree, centering, itilde

CENTER_TOL = 1e-12
EQUIV_TOL = 1e-11

# f(t, idx, y, zt) -> (N, n); idx are depth-t node positions, y is (N, n),
# zt is (N, n, d-1). Called for t = 1..T with zt == 0 at t = T.
Generator = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BsdeSolution:
    Y: AdaptedProcess
    Z: AdaptedProcess

    @property
    def Z_tilde(self) -> AdaptedProcess:
        I = itilde(self.Y.tree.d)
        return AdaptedProcess(self.Z.tree, self.Z.t_lo, self.Z.t_hi,
                              tuple(z @ I for z in self.Z.values))


def canonicalize(Z: np.ndarray) -> np.ndarray:
    """Representative of the ~_M class of Z with rows orthogonal to 1_d."""
    Z = np.asarray(Z, dtype=float)
    return Z @ centering(Z.shape[-1])


def _mrep_batch(P: np.ndarray, Pinv: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Z = E[V M^T | F_t] (E[M M^T | F_t])^+ for a stack of nodes.

    ``V`` is (N, d, n): centered values on the d children of each node.
    """
    d = P.shape[-1]
    M = np.eye(d)[None] - P[:, None, :]
    cross = np.einsum("ni,nik,nid->nkd", P, V, M)
    return canonicalize(cross @ Pinv)


def mrep(tree: ScenarioTree, node, centered) -> np.ndarray:
    """Martingale representation at one node.

    ``centered`` gives the value on each of the d children (sequence in
    outcome order, shape (d, n) or (d,)) and must have zero conditional mean.
    Returns the canonical Z (n x d) with Z M_{t+1}(i) = centered[i].
    """
    node = tuple(node)
    t, j = tree.index(node)
    if t >= tree.T:
        raise LeafNode(f"node {node} is a leaf")
    V = np.asarray(centered, dtype=float)
    if V.shape[0] != tree.d:
        raise DimensionMismatch(f"expected {tree.d} outcomes, got {V.shape[0]}")
    scalar = V.ndim == 1
    V = V.reshape(tree.d, -1)
    P = tree.kernels[t][j]
    mean = P @ V
    if np.max(np.abs(mean)) > CENTER_TOL * max(1.0, np.max(np.abs(V))):
        raise NotCentered(f"conditional mean {mean} is not zero")
    Z = _mrep_batch(P[None], tree.cov_pinv(t)[j][None], V[None])[0]
    return Z[0] if scalar else Z


def _terminal_array(tree: ScenarioTree, terminal, n: int | None) -> np.ndarray:
    NT = tree.n_nodes(tree.T)
    if isinstance(terminal, AdaptedProcess):
        arr = terminal[tree.T]
    elif callable(terminal):
        arr = np.array([np.atleast_1d(np.asarray(terminal(nd), dtype=float))
                        for nd in tree.nodes(tree.T)])
    elif isinstance(terminal, dict):
        arr = np.array([np.atleast_1d(np.asarray(terminal[nd], dtype=float))
                        for nd in tree.nodes(tree.T)])
    else:
        arr = np.asarray(terminal, dtype=float)
        if arr.ndim <= 1 and arr.shape != (NT,):
            arr = np.broadcast_to(np.atleast_1d(arr), (NT, arr.size)).copy()
        elif arr.ndim == 1:
            arr = arr.reshape(NT, 1)
    if arr.ndim != 2 or arr.shape[0] != NT:
        raise DimensionMismatch(f"terminal condition has shape {arr.shape}, expected ({NT}, n)")
    if n is not None and arr.shape[1] != n:
        raise DimensionMismatch(f"terminal dimension {arr.shape[1]} != n = {n}")
    return arr


def backward_sweep(tree: ScenarioTree, generator: Generator, terminal: np.ndarray):
    """Backward recursion on raw per-depth arrays; returns (Y list, Z list)."""
    d, T = tree.d, tree.T
    n = terminal.shape[1]
    I = itilde(d)
    Ys: list[np.ndarray] = [None] * (T + 1)  # type: ignore[list-item]
    Zs: list[np.ndarray] = [None] * T  # type: ignore[list-item]
    Ys[T] = terminal
    zt_next = np.zeros((tree.n_nodes(T), n, d - 1))
    for t in range(T - 1, -1, -1):
        N1 = tree.n_nodes(t + 1)
        F = np.asarray(generator(t + 1, np.arange(N1), Ys[t + 1], zt_next), dtype=float)
        if F.shape != (N1, n):
            raise DimensionMismatch(f"generator returned shape {F.shape} at t={t + 1}, expected {(N1, n)}")
        V = (Ys[t + 1] + F).reshape(-1, d, n)
        P = tree.kernels[t]
        Y = np.einsum("ni,nik->nk", P, V)
        Z = _mrep_batch(P, tree.cov_pinv(t), V - Y[:, None, :])
        Ys[t] = Y
        Zs[t] = Z
        zt_next = Z @ I
    return Ys, Zs


def solve_bsde(tree: ScenarioTree, generator: Generator, terminal, n: int | None = None) -> BsdeSolution:
    """Solve the BSΔE with the given generator and terminal condition.

    ``terminal`` may be an array of shape (d**T, n), a single vector used at
    every leaf, a mapping leaf -> vector, or a callable leaf -> vector.
    """
    eta = _terminal_array(tree, terminal, n)
    Ys, Zs = backward_sweep(tree, generator, eta)
    return BsdeSolution(AdaptedProcess(tree, 0, tree.T, tuple(Ys)),
                        AdaptedProcess(tree, 0, tree.T - 1, tuple(Zs)))


def equiv_m(Z1: AdaptedProcess, Z2: AdaptedProcess, tol: float = EQUIV_TOL) -> bool:
    """Z1 ~_M Z2: Z1_t M_{t+1} == Z2_t M_{t+1} on every node and outcome."""
    if Z1.tree is not Z2.tree or Z1.value_shape != Z2.value_shape \
            or Z1.t_lo != Z2.t_lo or Z1.t_hi != Z2.t_hi:
        raise ShapeMismatch("processes live on different trees, times or shapes")
    tree = Z1.tree
    I = itilde(tree.d)
    for t in Z1.times():
        D = Z1[t] - Z2[t]
        M = tree.increments(t)
        on_paths = np.einsum("nkd,nid->nik", D, M)
        if np.max(np.abs(on_paths), initial=0.0) > tol:
            return False
        if np.max(np.abs(D @ I), initial=0.0) > tol:
            return False
    return True


def z_seminorm(tree: ScenarioTree, node, Z) -> float:
    """(E[|Z M_{t+1}|^2 | F_t])^(1/2) at ``node``."""
    node = tuple(node)
    t, j = tree.index(node)
    if t >= tree.T:
        raise LeafNode(f"node {node} is a leaf")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    P = tree.kernels[t][j]
    M = np.eye(tree.d) - P[None, :]
    vals = M @ Z.T
    return float(np.sqrt(P @ np.sum(vals**2, axis=1)))
