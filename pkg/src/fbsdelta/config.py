"""Problem configuration files for the command line front end.

Configs are YAML documents (schema_version 1)::

    schema_version: 1
    seed: 0
    tree: {d: 2, T: 2, kernel: [0.5, 0.5]}        # or one vector per time
    problem: {kind: partial, m: 1, n: 1, r: 1, x0: [1.0], yT: [0.0]}
    coefficients:
      b: {A: [[0.1]], B: [[1.0]]}
      sigma: {Sx: [[[0.2], [-0.2]]]}
      f: {Fx: [[1.0]]}
      l: {Q: [[1.0]], R: [[1.0]]}
      h: {H: [[1.0]]}
    control_domain: {lo: [-1.0], hi: [1.0]}       # or one vector per time
    solver: {method: picard, theta: 0.5, tol: 1.0e-10, max_iter: 500, tol_mp: 1.0e-8}
    optimizer: {step0: 1.0, shrink: 0.5, c1: 1.0e-4, max_outer_iters: 500, grid: 5, restarts: 0}

Coefficient arrays use the LQ family's shapes (see ``LQCoefficients``); any
array may carry a leading time axis of length T+1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .coefficients import LQCoefficients, _LQ_COST
from .errors import ConfigInvalid, ParseError, ValidationError
from .fbsde import ControlProblem
from .lattice import DEFAULT_MAX_LEAVES, SIMPLEX_TOL, build_tree
from .optimize import OptimizerConfig

SCHEMA_VERSION = 1
BLOCKS = {
    "b": ("A", "Ay", "Az", "B", "a"),
    "sigma": ("Sx", "Sy", "Sz", "Su", "s0"),
    "f": ("Fx", "Fy", "Fz", "Fu", "c"),
    "l": _LQ_COST,
    "h": ("H", "g"),
}
FULL_ONLY = ("Ay", "Az", "Sy", "Sz")
SYMMETRIC = ("Q", "Qy", "Qz", "R", "H")
SOLVER_DEFAULTS = {"method": "picard", "theta": 0.5, "tol": 1e-10, "max_iter": 500, "tol_mp": 1e-8}
OPTIMIZER_DEFAULTS = {"step0": 1.0, "shrink": 0.5, "c1": 1e-4, "max_outer_iters": 500, "grid": 5, "restarts": 0}


@dataclass
class SolverConfig:
    method: str = "picard"
    theta: float = 0.5
    tol: float = 1e-10
    max_iter: int = 500
    tol_mp: float = 1e-8

    def kwargs(self) -> dict:
        return {"method": self.method, "theta": self.theta, "tol": self.tol, "max_iter": self.max_iter}


@dataclass
class ProblemConfig:
    schema_version: int
    seed: int
    d: int
    T: int
    kernel: Any
    kind: str
    m: int
    n: int
    r: int
    x0: np.ndarray
    yT: np.ndarray
    coefficients: dict
    lo: np.ndarray
    hi: np.ndarray
    solver: SolverConfig
    optimizer: dict = field(default_factory=dict)
    digest: str = ""

    def build_problem(self) -> ControlProblem:
        tree = build_tree(self.d, self.T, self.kernel)
        arrays = {}
        H = g = None
        for block, entries in self.coefficients.items():
            for key, value in entries.items():
                if key == "H":
                    H = value
                elif key == "g":
                    g = value
                else:
                    arrays[key] = value
        coeffs = LQCoefficients(self.m, self.n, self.r, self.d, self.T, coupling=self.kind, H=H, g=g, **arrays)
        return ControlProblem(tree, coeffs, self.x0, self.yT, self.lo, self.hi)

    def optimizer_config(self, tol_mp: float | None = None) -> OptimizerConfig:
        o = self.optimizer
        return OptimizerConfig(step0=o["step0"], shrink=o["shrink"], c1=o["c1"],
                               tol_mp=self.solver.tol_mp if tol_mp is None else tol_mp,
                               max_outer_iters=o["max_outer_iters"], seed=self.seed)


def load_yaml(text: str) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else None
        raise ParseError(line, str(exc.problem or exc)) from None
    except yaml.YAMLError as exc:
        raise ParseError(None, str(exc)) from None
    if not isinstance(data, dict):
        raise ParseError(1, "top level must be a mapping of sections")
    return data


class _Collector:
    def __init__(self):
        self.errors: list[ValidationError] = []

    def add(self, field_name: str, reason: str):
        self.errors.append(ValidationError(field_name, reason))

    def number(self, value, field_name, *, integer=False, default=None):
        if value is None:
            if default is not None:
                return default
            self.add(field_name, "missing")
            return None
        if isinstance(value, bool):
            self.add(field_name, "must be a number")
            return None
        try:
            x = float(value)
        except (TypeError, ValueError):
            self.add(field_name, f"not a number: {value!r}")
            return None
        if integer:
            if x != int(x):
                self.add(field_name, f"must be an integer, got {value!r}")
                return None
            return int(x)
        if not np.isfinite(x):
            self.add(field_name, "must be finite")
            return None
        return x

    def array(self, value, field_name):
        try:
            a = np.asarray(_floats(value), dtype=float)
        except (TypeError, ValueError):
            self.add(field_name, "not a numeric array")
            return None
        if not np.all(np.isfinite(a)):
            self.add(field_name, "must be finite")
            return None
        return a


def _floats(value):
    if isinstance(value, (list, tuple)):
        return [_floats(v) for v in value]
    if isinstance(value, bool):
        raise TypeError("boolean in numeric array")
    return float(value)


def _section(data, name, col, required=True) -> dict:
    sec = data.get(name)
    if sec is None:
        if required:
            col.add(name, "missing section")
        return {}
    if not isinstance(sec, dict):
        col.add(name, "must be a mapping")
        return {}
    return sec


def _per_time_vectors(a, length, count, field_name, col):
    """A length-``length`` vector or a (count, length) array -> (count, length)."""
    if a is None:
        return None
    if a.shape == (length,):
        return np.broadcast_to(a, (count, length)).copy()
    if a.shape == (count, length):
        return a
    col.add(field_name, f"shape {a.shape}; expected ({length},) or ({count}, {length})")
    return None


def validate(data: dict, digest: str = "") -> ProblemConfig:
    col = _Collector()
    known = {"schema_version", "seed", "tree", "problem", "coefficients", "control_domain", "solver", "optimizer"}
    for key in data:
        if key not in known:
            col.add(str(key), "unknown section")

    version = col.number(data.get("schema_version"), "schema_version", integer=True)
    if version is not None and version != SCHEMA_VERSION:
        col.add("schema_version", f"unsupported version {version}; expected {SCHEMA_VERSION}")
    seed = col.number(data.get("seed", 0), "seed", integer=True)

    tree = _section(data, "tree", col)
    d = col.number(tree.get("d"), "tree.d", integer=True)
    T = col.number(tree.get("T"), "tree.T", integer=True)
    if d is not None and d < 2:
        col.add("tree.d", "must be >= 2")
        d = None
    if T is not None and T < 1:
        col.add("tree.T", "must be >= 1")
        T = None
    if d is not None and T is not None and d**T > DEFAULT_MAX_LEAVES:
        col.add("tree", f"{d}**{T} leaves exceeds the cap of {DEFAULT_MAX_LEAVES}")
    kernel = None
    if "kernel" not in tree:
        col.add("tree.kernel", "missing")
    elif d is not None and T is not None:
        k = col.array(tree["kernel"], "tree.kernel")
        if k is not None:
            kernel = _per_time_vectors(k, d, T, "tree.kernel", col)
            if kernel is not None:
                if np.any(kernel <= 0):
                    col.add("tree.kernel", "positive")
                elif np.any(np.abs(kernel.sum(axis=1) - 1.0) > SIMPLEX_TOL):
                    col.add("tree.kernel", "sum")

    prob = _section(data, "problem", col)
    kind = prob.get("kind", "partial")
    if kind not in ("partial", "full"):
        col.add("problem.kind", f"must be 'partial' or 'full', got {kind!r}")
        kind = None
    m = col.number(prob.get("m", 1), "problem.m", integer=True)
    n = col.number(prob.get("n", 1), "problem.n", integer=True)
    r = col.number(prob.get("r", 1), "problem.r", integer=True)
    for name, v in (("m", m), ("n", n), ("r", r)):
        if v is not None and v < 1:
            col.add(f"problem.{name}", "must be >= 1")
    if kind == "full" and (m != 1 or n != 1):
        col.add("problem.kind", "full coupling requires m = n = 1")
    x0 = yT = None
    if m is not None:
        x0 = col.array(prob.get("x0", [0.0] * m), "problem.x0")
        if x0 is not None and x0.size != m:
            col.add("problem.x0", f"length {x0.size}, expected m = {m}")
    if n is not None:
        yT = col.array(prob.get("yT", [0.0] * n), "problem.yT")
        if yT is not None and yT.size != n:
            col.add("problem.yT", f"length {yT.size}, expected n = {n}")

    coeffs = _validate_coefficients(_section(data, "coefficients", col, required=False), col,
                                    kind, m, n, r, d, T)

    dom = _section(data, "control_domain", col)
    lo = hi = None
    if r is not None and T is not None:
        for name in ("lo", "hi"):
            if name not in dom:
                col.add(f"control_domain.{name}", "missing")
        if "lo" in dom:
            lo = _per_time_vectors(col.array(dom["lo"], "control_domain.lo"), r, T + 1, "control_domain.lo", col)
        if "hi" in dom:
            hi = _per_time_vectors(col.array(dom["hi"], "control_domain.hi"), r, T + 1, "control_domain.hi", col)
        if lo is not None and hi is not None and np.any(lo > hi):
            t = int(np.argwhere(lo > hi)[0][0])
            col.add("control_domain", f"lo > hi at t={t}")

    sol = _section(data, "solver", col, required=False)
    for key in sol:
        if key not in SOLVER_DEFAULTS:
            col.add(f"solver.{key}", "unknown setting")
    method = sol.get("method", SOLVER_DEFAULTS["method"])
    if method not in ("picard", "newton", "auto"):
        col.add("solver.method", f"must be picard, newton or auto, got {method!r}")
    theta = col.number(sol.get("theta"), "solver.theta", default=SOLVER_DEFAULTS["theta"])
    if theta is not None and not 0 < theta <= 1:
        col.add("solver.theta", "must lie in (0, 1]")
    tol = col.number(sol.get("tol"), "solver.tol", default=SOLVER_DEFAULTS["tol"])
    if tol is not None and tol <= 0:
        col.add("solver.tol", "must be positive")
    max_iter = col.number(sol.get("max_iter"), "solver.max_iter", integer=True, default=SOLVER_DEFAULTS["max_iter"])
    if max_iter is not None and max_iter < 1:
        col.add("solver.max_iter", "must be >= 1")
    tol_mp = col.number(sol.get("tol_mp"), "solver.tol_mp", default=SOLVER_DEFAULTS["tol_mp"])
    if tol_mp is not None and tol_mp <= 0:
        col.add("solver.tol_mp", "must be positive")

    opt = _section(data, "optimizer", col, required=False)
    optimizer = {}
    for key, default in OPTIMIZER_DEFAULTS.items():
        optimizer[key] = col.number(opt.get(key), f"optimizer.{key}", integer=isinstance(default, int),
                                    default=default)
    for key in opt:
        if key not in OPTIMIZER_DEFAULTS:
            col.add(f"optimizer.{key}", "unknown setting")
    if optimizer["shrink"] is not None and not 0 < optimizer["shrink"] < 1:
        col.add("optimizer.shrink", "must lie in (0, 1)")
    for key in ("step0", "c1"):
        if optimizer[key] is not None and optimizer[key] <= 0:
            col.add(f"optimizer.{key}", "must be positive")
    if optimizer["max_outer_iters"] is not None and optimizer["max_outer_iters"] < 1:
        col.add("optimizer.max_outer_iters", "must be >= 1")
    if optimizer["grid"] is not None and optimizer["grid"] < 1:
        col.add("optimizer.grid", "must be >= 1")
    if optimizer["restarts"] is not None and optimizer["restarts"] < 0:
        col.add("optimizer.restarts", "must be >= 0")

    if col.errors:
        if len(col.errors) == 1:
            raise col.errors[0]
        raise ConfigInvalid(col.errors)
    return ProblemConfig(version, seed, d, T, kernel, kind, m, n, r, x0.reshape(m), yT.reshape(n), coeffs,
                         lo, hi, SolverConfig(method, theta, tol, max_iter, tol_mp), optimizer, digest)


def _validate_coefficients(sec, col, kind, m, n, r, d, T) -> dict:
    out: dict[str, dict[str, np.ndarray]] = {}
    if None in (m, n, r, d, T):
        return out
    probe = LQCoefficients(m, n, r, d, T, coupling="full" if m == 1 and n == 1 else "partial")
    for block, entries in sec.items():
        if block not in BLOCKS:
            col.add(f"coefficients.{block}", "unknown coefficient block")
            continue
        if not isinstance(entries, dict):
            col.add(f"coefficients.{block}", "must be a mapping")
            continue
        out[block] = {}
        for key, value in entries.items():
            name = f"coefficients.{block}.{key}"
            if key not in BLOCKS[block]:
                col.add(name, "unknown entry")
                continue
            a = col.array(value, name)
            if a is None:
                continue
            base = (m, m) if key == "H" else (m,) if key == "g" else probe._base_shape(key)
            timed = key not in ("H", "g")
            if a.shape != base and not (timed and a.shape == (T + 1,) + base):
                expect = f"{base}" + (f" or {(T + 1,) + base}" if timed else "")
                col.add(name, f"shape {a.shape}; expected {expect}")
                continue
            if key in FULL_ONLY and kind == "partial" and np.any(a != 0):
                col.add(name, "must vanish under partial coupling")
                continue
            if key in SYMMETRIC:
                if not np.allclose(a, np.swapaxes(a, -1, -2), rtol=0, atol=1e-12):
                    col.add(name, "symmetric")
                    continue
                w = np.linalg.eigvalsh(a)
                if np.any(w < -1e-12):
                    col.add(name, "positive semidefinite")
                    continue
            out[block][key] = a
    return out


def parse_config(path) -> ProblemConfig:
    """Read, parse and validate a config file; raises ParseError or ValidationError."""
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(None, f"not UTF-8: {exc}") from None
    digest = hashlib.sha256(raw).hexdigest()
    return validate(load_yaml(text), digest)
