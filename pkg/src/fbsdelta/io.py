"""CSV persistence of trajectories and controls.

Numbers are written with 17 significant digits, which round-trips every
double exactly. Node paths are dot-separated 1-based outcome indices
("1.3.2"); the root is the empty string.
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import NodeMismatch, ParseError
from .lattice import AdaptedProcess, ScenarioTree


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def node_path(node) -> str:
    return ".".join(str(w + 1) for w in node)


def parse_node_path(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(w) - 1 for w in text.split("."))
    except ValueError:
        raise NodeMismatch(f"malformed node path {text!r}") from None


def trajectory_columns(m: int, n: int, r: int, d: int) -> list[str]:
    cols = ["t", "node_path", "prob"]
    cols += [f"X{i + 1}" for i in range(m)]
    cols += [f"Y{i + 1}" for i in range(n)]
    cols += [f"Ztilde{i + 1}_{j + 1}" for i in range(n) for j in range(d - 1)]
    cols += [f"u{i + 1}" for i in range(r)]
    cols += [f"p{i + 1}" for i in range(m)]
    cols += [f"q_tilde{i + 1}_{j + 1}" for i in range(m) for j in range(d - 1)]
    cols += [f"k{i + 1}" for i in range(n)]
    return cols


def write_trajectories(path, problem, control: AdaptedProcess, traj, adj) -> None:
    """One row per node, ordered by time then depth-first position.

    Z-tilde and q-tilde are undefined at the horizon and left blank there.
    """
    tree: ScenarioTree = problem.tree
    d = tree.d
    Zt = traj.Z_tilde
    qt = adj.q_tilde
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_columns(problem.m, problem.n, problem.r, d))
        for t in range(tree.T + 1):
            for j in range(tree.n_nodes(t)):
                row = [str(t), node_path(tree.node(t, j)), fmt(tree.probs[t][j])]
                row += [fmt(v) for v in traj.X[t][j]]
                row += [fmt(v) for v in traj.Y[t][j]]
                row += [fmt(v) for v in Zt[t][j].ravel()] if t < tree.T else [""] * (problem.n * (d - 1))
                row += [fmt(v) for v in control[t][j]]
                row += [fmt(v) for v in adj.p[t][j]]
                row += [fmt(v) for v in qt[t][j].ravel()] if t < tree.T else [""] * (problem.m * (d - 1))
                row += [fmt(v) for v in adj.k[t][j]]
                w.writerow(row)


def export_control(path, control: AdaptedProcess) -> None:
    tree = control.tree
    r = control.value_shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "node_path"] + [f"u{i + 1}" for i in range(r)])
        for t in control.times():
            for j in range(tree.n_nodes(t)):
                w.writerow([str(t), node_path(tree.node(t, j))] + [fmt(v) for v in control[t][j]])


def import_control(path, tree: ScenarioTree, r: int) -> AdaptedProcess:
    """Read a control file written by ``export_control`` for ``tree``.

    Every node of depths 0..T must appear exactly once; anything else raises
    NodeMismatch naming the offending path.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(1, "empty control file")
    header = rows[0]
    want = ["t", "node_path"] + [f"u{i + 1}" for i in range(r)]
    if header != want:
        raise NodeMismatch(f"control header {header} does not match {want}")
    vals = [np.full((tree.n_nodes(t), r), np.nan) for t in range(tree.T + 1)]
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(want):
            raise ParseError(lineno, f"expected {len(want)} fields, got {len(row)}")
        node = parse_node_path(row[1])
        try:
            t_field = int(row[0])
        except ValueError:
            raise ParseError(lineno, f"bad time {row[0]!r}") from None
        if t_field != len(node) or len(node) > tree.T or any(not 0 <= w < tree.d for w in node):
            raise NodeMismatch(f"node path {row[1]!r} (t={row[0]}) is not a node of the d={tree.d}, T={tree.T} tree")
        if node in seen:
            raise NodeMismatch(f"duplicate row for node path {row[1]!r}")
        seen.add(node)
        t, j = tree.index(node)
        try:
            vals[t][j] = [float(v) for v in row[2:]]
        except ValueError:
            raise ParseError(lineno, f"non-numeric control value in {row[2:]}") from None
    for t in range(tree.T + 1):
        missing = np.isnan(vals[t]).any(axis=1)
        if np.any(missing):
            j = int(np.argmax(missing))
            raise NodeMismatch(f"missing row for node path {node_path(tree.node(t, j))!r} (t={t})")
    return AdaptedProcess(tree, 0, tree.T, tuple(vals))
