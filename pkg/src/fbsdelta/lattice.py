"""Finite-state filtered probability space on a non-recombining scenario tree.

The driving process W takes values in the standard basis of R^d. A node at
depth t is the history (w_1, ..., w_t) of outcome indices, stored 0-based.
Nodes of one depth are kept in lexicographic order, which is also the
depth-first order with ascending child index; the node with history
(w_1, ..., w_t) sits at position sum_k w_k d^(t-k), and its children occupy
positions j*d .. j*d + d - 1 at depth t+1. Every per-depth array in the
package uses this layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BadSimplex,
    IndexOutOfRange,
    LeafNode,
    MissingChild,
    NonPositiveKernel,
    ShapeMismatch,
    TimeOutOfRange,
    TreeTooLarge,
)

SIMPLEX_TOL = 1e-12
PINV_RTOL = 1e-12
DEFAULT_MAX_LEAVES = 4**8

Node = tuple


def itilde(d: int) -> np.ndarray:
    """The d x (d-1) matrix with I_{d-1} on top and a row of -1 below."""
    if d < 2:
        raise ValueError("d must be at least 2")
    return np.vstack([np.eye(d - 1), -np.ones((1, d - 1))])


def itilde_pinv(d: int) -> np.ndarray:
    """Left inverse of itilde(d) whose rows are orthogonal to 1_d.

    ``zt @ itilde_pinv(d)`` is the canonical Z (rows orthogonal to 1_d) with
    ``Z @ itilde(d) == zt``.
    """
    I = itilde(d)
    return np.linalg.solve(I.T @ I, I.T)


def centering(d: int) -> np.ndarray:
    return np.eye(d) - np.full((d, d), 1.0 / d)


def cov_matrices(P: np.ndarray) -> np.ndarray:
    """diag(P) - P P^T for a stack of kernel vectors, shape (..., d, d)."""
    P = np.asarray(P, dtype=float)
    eye = np.eye(P.shape[-1])
    return P[..., :, None] * eye - P[..., :, None] * P[..., None, :]


def pinv_psd(C: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose inverse of a stack of symmetric PSD matrices.

    Spectral decomposition; eigenvalues below ``rtol * max eigenvalue`` are
    treated as zero.
    """
    w, V = np.linalg.eigh(C)
    cut = rtol * np.max(w, axis=-1, keepdims=True)
    inv = np.where(w > cut, 1.0 / np.where(w > cut, w, 1.0), 0.0)
    return np.einsum("...ij,...j,...kj->...ik", V, inv, V)


@dataclass(frozen=True)
class CondCov:
    """Conditional covariance E[M_{t+1} M_{t+1}^T | F_t] at one node."""

    node: Node
    matrix: np.ndarray
    pinv: np.ndarray

    @property
    def rank(self) -> int:
        w = np.linalg.eigvalsh(self.matrix)
        return int(np.sum(w > PINV_RTOL * w.max()))


class ScenarioTree:
    """Immutable scenario tree with strictly positive one-step kernels.

    ``kernels[t]`` has shape (d**t, d): row j is the conditional law of
    W_{t+1} at the j-th node of depth t. ``probs[t]`` holds unconditional
    path probabilities of the depth-t nodes.
    """

    def __init__(self, d: int, T: int, kernels: Sequence[np.ndarray]):
        self.d = int(d)
        self.T = int(T)
        ks = []
        for t, k in enumerate(kernels):
            k = np.array(k, dtype=float)
            k.setflags(write=False)
            ks.append(k)
        self.kernels: tuple[np.ndarray, ...] = tuple(ks)
        probs = [np.ones(1)]
        for t in range(self.T):
            probs.append((probs[-1][:, None] * self.kernels[t]).reshape(-1))
        for p in probs:
            p.setflags(write=False)
        self.probs: tuple[np.ndarray, ...] = tuple(probs)

    def __repr__(self) -> str:
        return f"ScenarioTree(d={self.d}, T={self.T})"

    # node bookkeeping -------------------------------------------------
    def n_nodes(self, t: int) -> int:
        return self.d**t

    def index(self, node: Iterable[int]) -> tuple[int, int]:
        """(depth, position) of a node given as a history of outcome indices."""
        node = tuple(node)
        t = len(node)
        if t > self.T:
            raise TimeOutOfRange(f"node {node} deeper than horizon {self.T}")
        j = 0
        for w in node:
            if not 0 <= w < self.d:
                raise IndexOutOfRange(f"outcome {w} outside 0..{self.d - 1} in node {node}")
            j = j * self.d + int(w)
        return t, j

    def node(self, t: int, j: int) -> Node:
        out = []
        j = int(j)
        for _ in range(t):
            j, w = divmod(j, self.d)
            out.append(w)
        return tuple(reversed(out))

    def nodes(self, t: int) -> list[Node]:
        """Depth-t nodes in depth-first order."""
        return [self.node(t, j) for j in range(self.n_nodes(t))]

    def children(self, node: Node) -> list[Node]:
        node = tuple(node)
        return [node + (i,) for i in range(self.d)]

    def kernel(self, node: Node) -> np.ndarray:
        t, j = self.index(node)
        if t == self.T:
            raise LeafNode(f"node {node} is a leaf")
        return self.kernels[t][j]

    def path_prob(self, node: Node) -> float:
        t, j = self.index(node)
        return float(self.probs[t][j])

    # per-depth matrices ------------------------------------------------
    def increments(self, t: int) -> np.ndarray:
        """M_{t+1} for every depth-t node and outcome, shape (d**t, d, d).

        Entry [j, i] is e_i - P(node j).
        """
        P = self.kernels[t]
        return np.eye(self.d)[None, :, :] - P[:, None, :]

    @cached_property
    def _cov(self) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        out = []
        for t in range(self.T):
            C = cov_matrices(self.kernels[t])
            Cp = pinv_psd(C)
            C.setflags(write=False)
            Cp.setflags(write=False)
            out.append((C, Cp))
        return tuple(out)

    def cov(self, t: int) -> np.ndarray:
        if not 0 <= t < self.T:
            raise LeafNode(f"no conditional covariance at depth {t}")
        return self._cov[t][0]

    def cov_pinv(self, t: int) -> np.ndarray:
        if not 0 <= t < self.T:
            raise LeafNode(f"no conditional covariance at depth {t}")
        return self._cov[t][1]


def _as_kernel_vector(v: Any, d: int, where: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (d,):
        raise ShapeMismatch(f"kernel at {where} has shape {v.shape}, expected ({d},)")
    return v


def _validate_kernel(k: np.ndarray, where: str, eps_min: float) -> None:
    k = np.atleast_2d(k)
    if np.any(~np.isfinite(k)) or np.any(k <= eps_min):
        raise NonPositiveKernel(f"kernel at {where} is not strictly positive")
    s = k.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > SIMPLEX_TOL):
        raise BadSimplex(f"kernel at {where} sums to {s.tolist()}, not 1")


def build_tree(
    d: int,
    T: int,
    kernel_spec: Any,
    *,
    eps_min: float = 0.0,
    max_leaves: int = DEFAULT_MAX_LEAVES,
) -> ScenarioTree:
    """Build and validate a scenario tree.

    ``kernel_spec`` may be a single probability vector (homogeneous kernel),
    a length-T sequence of vectors (one per time), a sequence of T arrays of
    shape (d**t, d), a mapping from node tuples to vectors, or a callable
    ``node -> vector``.
    """
    d, T = int(d), int(T)
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if d**T > max_leaves:
        raise TreeTooLarge(f"{d}**{T} leaves exceeds the cap of {max_leaves}")

    probe = ScenarioTree(d, 0, [])
    kernels: list[np.ndarray] = []
    if callable(kernel_spec) or isinstance(kernel_spec, Mapping):
        get: Callable[[Node], Any]
        if isinstance(kernel_spec, Mapping):
            def get(node):
                try:
                    return kernel_spec[node]
                except KeyError:
                    raise MissingChild(f"no kernel supplied for node {node}") from None
        else:
            get = kernel_spec
        for t in range(T):
            rows = [_as_kernel_vector(get(probe.node(t, j)), d, str(probe.node(t, j)))
                    for j in range(d**t)]
            kernels.append(np.array(rows))
    else:
        spec = np.asarray(kernel_spec, dtype=float) if not _is_ragged(kernel_spec) else None
        if spec is not None and spec.shape == (d,):
            kernels = [np.tile(spec, (d**t, 1)) for t in range(T)]
        elif spec is not None and spec.shape == (T, d):
            kernels = [np.tile(spec[t], (d**t, 1)) for t in range(T)]
        else:
            seq = list(kernel_spec)
            if len(seq) != T:
                raise ShapeMismatch(f"expected {T} per-time kernels, got {len(seq)}")
            for t, k in enumerate(seq):
                k = np.asarray(k, dtype=float)
                if k.shape == (d,):
                    k = np.tile(k, (d**t, 1))
                if k.shape != (d**t, d):
                    raise ShapeMismatch(f"kernel at time {t} has shape {k.shape}")
                kernels.append(k)
    for t, k in enumerate(kernels):
        _validate_kernel(k, f"time {t}", eps_min)
    return ScenarioTree(d, T, kernels)


def _is_ragged(spec: Any) -> bool:
    try:
        np.asarray(spec, dtype=float)
        return False
    except ValueError:
        return True


@dataclass(frozen=True)
class AdaptedProcess:
    """Node-indexed values on depths t_lo..t_hi with a uniform value shape.

    ``values[t - t_lo]`` has shape (d**t,) + value_shape.
    """

    tree: ScenarioTree
    t_lo: int
    t_hi: int
    values: tuple

    def __post_init__(self):
        vals = tuple(np.asarray(v, dtype=float) for v in self.values)
        if len(vals) != self.t_hi - self.t_lo + 1:
            raise ShapeMismatch("one value array per depth is required")
        shape = vals[0].shape[1:]
        for k, v in enumerate(vals):
            t = self.t_lo + k
            if v.shape != (self.tree.n_nodes(t),) + shape:
                raise ShapeMismatch(f"depth {t} values have shape {v.shape}")
        object.__setattr__(self, "values", vals)

    @property
    def value_shape(self) -> tuple:
        return self.values[0].shape[1:]

    def __getitem__(self, t: int) -> np.ndarray:
        if not self.t_lo <= t <= self.t_hi:
            raise TimeOutOfRange(f"time {t} outside [{self.t_lo}, {self.t_hi}]")
        return self.values[t - self.t_lo]

    def at(self, node: Node) -> np.ndarray:
        t, j = self.tree.index(node)
        return self[t][j]

    def times(self) -> range:
        return range(self.t_lo, self.t_hi + 1)

    def norm(self) -> float:
        """(E sum_s |X_s|^2)^(1/2) over the process' time range."""
        total = 0.0
        for t in self.times():
            sq = self[t].reshape(self.tree.n_nodes(t), -1) ** 2
            total += float(self.tree.probs[t] @ sq.sum(axis=1))
        return float(np.sqrt(total))

    @classmethod
    def constant(cls, tree: ScenarioTree, t_lo: int, t_hi: int, value) -> "AdaptedProcess":
        value = np.asarray(value, dtype=float)
        vals = [np.broadcast_to(value, (tree.n_nodes(t),) + value.shape).copy()
                for t in range(t_lo, t_hi + 1)]
        return cls(tree, t_lo, t_hi, tuple(vals))

    @classmethod
    def from_function(cls, tree: ScenarioTree, t_lo: int, t_hi: int,
                      fn: Callable[[Node], Any]) -> "AdaptedProcess":
        vals = [np.array([np.asarray(fn(nd), dtype=float) for nd in tree.nodes(t)])
                for t in range(t_lo, t_hi + 1)]
        return cls(tree, t_lo, t_hi, tuple(vals))

    def replace(self, t: int, values) -> "AdaptedProcess":
        vals = list(self.values)
        vals[t - self.t_lo] = np.asarray(values, dtype=float)
        return AdaptedProcess(self.tree, self.t_lo, self.t_hi, tuple(vals))


def cond_expect(tree: ScenarioTree, proc_values, node: Node) -> np.ndarray:
    """E[V_{t+1} | F_t] at ``node`` from the values at its d children.

    ``proc_values`` is a mapping child-node -> value, a mapping outcome index
    -> value, or a sequence of d values in outcome order.
    """
    node = tuple(node)
    P = tree.kernel(node)
    if isinstance(proc_values, Mapping):
        vals = []
        for i, child in enumerate(tree.children(node)):
            if child in proc_values:
                vals.append(proc_values[child])
            elif i in proc_values:
                vals.append(proc_values[i])
            else:
                raise MissingChild(f"no value for child {child} of node {node}")
    else:
        vals = list(proc_values)
        if len(vals) != tree.d:
            raise MissingChild(f"expected {tree.d} child values, got {len(vals)}")
    V = np.array([np.asarray(v, dtype=float) for v in vals])
    return np.tensordot(P, V, axes=(0, 0))


def martingale_increment(tree: ScenarioTree, node: Node, i: int) -> np.ndarray:
    """M_{t+1} on outcome ``i`` (0-based): e_i - P(node)."""
    if not 0 <= i < tree.d:
        raise IndexOutOfRange(f"outcome {i} outside 0..{tree.d - 1}")
    P = tree.kernel(node)
    return np.eye(tree.d)[i] - P


def cond_cov(tree: ScenarioTree, node: Node) -> CondCov:
    node = tuple(node)
    t, j = tree.index(node)
    if t >= tree.T:
        raise LeafNode(f"node {node} is a leaf")
    return CondCov(node, tree.cov(t)[j].copy(), tree.cov_pinv(t)[j].copy())


def expectation(proc: AdaptedProcess, t: int) -> np.ndarray | float:
    """E[X_t], reduced over depth-t nodes in depth-first order."""
    vals = proc[t]
    flat = vals.reshape(vals.shape[0], -1)
    out = proc.tree.probs[t] @ flat
    if proc.value_shape == ():
        return float(out[0])
    return out.reshape(proc.value_shape)


def norm_equivalence_constants(tree: ScenarioTree, node: Node) -> tuple[float, float]:
    """Extreme ratios of E[|Z M_{t+1}|^2 | F_t] to |Z Itilde|_F^2 at ``node``.

    Both forms vanish on Z = c 1^T, so they are compared on canonical
    representatives Z = W Itilde^+, where the ratio is a Rayleigh quotient of
    Itilde^+ C Itilde^+^T.
    """
    C = cond_cov(tree, node).matrix
    Ip = itilde_pinv(tree.d)
    R = Ip @ C @ Ip.T
    w = np.linalg.eigvalsh(0.5 * (R + R.T))
    return float(w[0]), float(w[-1])
