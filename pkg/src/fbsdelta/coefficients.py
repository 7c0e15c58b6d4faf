"""Coefficient sets (b, sigma, f, l, h) for controlled FBSΔE systems.

All coefficient callables are vectorized over nodes of one depth:
``fn(t, idx, x, y, zt, u)`` where ``idx`` holds depth-t node positions and
x, y, zt, u have shapes (N, m), (N, n), (N, n, d-1), (N, r). Outputs are
b: (N, m), sigma: (N, m, d) (row i is sigma_i), f: (N, n), l: (N,), and
``h(idx, x)``: (N,).

Jacobians are returned with layout (N,) + output shape + input shape, so
``jacobian("sigma", "x", ...)[k, i, a, j]`` is d sigma_{i,a} / d x_j.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

COEFFS = ("b", "sigma", "f", "l")
VARS = ("x", "y", "zt", "u")
FD_STEP = 1e-6


class CoefficientSet:
    """Base class; subclasses implement the raw ``_b/_sigma/_f/_l/_h`` hooks.

    The public methods apply the boundary conventions b(T) = sigma(T) =
    l(T) = 0, f(0) = 0 and f(T) independent of zt, and hide (y, zt) from b
    and sigma under partial coupling.
    """

    def __init__(self, m: int, n: int, r: int, d: int, T: int,
                 coupling: str = "partial", fd_step: float = FD_STEP):
        if coupling not in ("partial", "full"):
            raise ValueError(f"coupling must be 'partial' or 'full', got {coupling!r}")
        if coupling == "full" and (m != 1 or n != 1):
            raise ValueError("full coupling is one-dimensional: m = n = 1")
        self.m, self.n, self.r, self.d, self.T = int(m), int(n), int(r), int(d), int(T)
        self.coupling = coupling
        self.fd_step = fd_step

    # shapes ---------------------------------------------------------------
    def out_shape(self, name: str) -> tuple:
        return {"b": (self.m,), "sigma": (self.m, self.d), "f": (self.n,), "l": ()}[name]

    def in_shape(self, var: str) -> tuple:
        return {"x": (self.m,), "y": (self.n,), "zt": (self.n, self.d - 1), "u": (self.r,)}[var]

    # raw hooks --------------------------------------------------------------
    def _b(self, t, idx, x, y, zt, u):
        return np.zeros((len(idx), self.m))

    def _sigma(self, t, idx, x, y, zt, u):
        return np.zeros((len(idx), self.m, self.d))

    def _f(self, t, idx, x, y, zt, u):
        return np.zeros((len(idx), self.n))

    def _l(self, t, idx, x, y, zt, u):
        return np.zeros(len(idx))

    def _h(self, idx, x):
        return np.zeros(len(idx))

    def _jacobian(self, name, wrt, t, idx, x, y, zt, u):
        """Analytic Jacobian hook; None means fall back to finite differences."""
        return None

    def _h_x(self, idx, x):
        return None

    # public evaluation -------------------------------------------------------
    def _args(self, name, t, x, y, zt):
        if name in ("b", "sigma") and self.coupling == "partial":
            y = np.zeros_like(y)
            zt = np.zeros_like(zt)
        if name == "f" and t == self.T:
            zt = np.zeros_like(zt)
        return y, zt

    def _inactive(self, name: str, t: int) -> bool:
        return (name in ("b", "sigma", "l") and t >= self.T) or (name == "f" and t <= 0)

    def evaluate(self, name: str, t, idx, x, y, zt, u) -> np.ndarray:
        idx = np.asarray(idx)
        if self._inactive(name, t):
            return np.zeros((len(idx),) + self.out_shape(name))
        y, zt = self._args(name, t, x, y, zt)
        raw = getattr(self, "_" + name)(t, idx, x, y, zt, u)
        return np.asarray(raw, dtype=float).reshape((len(idx),) + self.out_shape(name))

    def b(self, t, idx, x, y, zt, u):
        return self.evaluate("b", t, idx, x, y, zt, u)

    def sigma(self, t, idx, x, y, zt, u):
        return self.evaluate("sigma", t, idx, x, y, zt, u)

    def f(self, t, idx, x, y, zt, u):
        return self.evaluate("f", t, idx, x, y, zt, u)

    def l(self, t, idx, x, y, zt, u):
        return self.evaluate("l", t, idx, x, y, zt, u)

    def h(self, idx, x):
        idx = np.asarray(idx)
        return np.asarray(self._h(idx, x), dtype=float).reshape(len(idx))

    def jacobian(self, name: str, wrt: str, t, idx, x, y, zt, u) -> np.ndarray:
        idx = np.asarray(idx)
        N = len(idx)
        shape = (N,) + self.out_shape(name) + self.in_shape(wrt)
        if self._inactive(name, t):
            return np.zeros(shape)
        if wrt in ("y", "zt") and name in ("b", "sigma") and self.coupling == "partial":
            return np.zeros(shape)
        if wrt == "zt" and name == "f" and t == self.T:
            return np.zeros(shape)
        y, zt = self._args(name, t, x, y, zt)
        J = self._jacobian(name, wrt, t, idx, x, y, zt, u)
        if J is None:
            J = self._fd_jacobian(name, wrt, t, idx, x, y, zt, u)
        return np.asarray(J, dtype=float).reshape(shape)

    def _fd_jacobian(self, name, wrt, t, idx, x, y, zt, u):
        args = {"x": x, "y": y, "zt": zt, "u": u}
        base = np.asarray(args[wrt], dtype=float)
        N = len(idx)
        flat = base.reshape(N, -1)
        fn = getattr(self, "_" + name)
        cols = []
        for k in range(flat.shape[1]):
            hstep = self.fd_step * np.maximum(1.0, np.abs(flat[:, k]))
            plus, minus = flat.copy(), flat.copy()
            plus[:, k] += hstep
            minus[:, k] -= hstep
            a_p = dict(args, **{wrt: plus.reshape(base.shape)})
            a_m = dict(args, **{wrt: minus.reshape(base.shape)})
            fp = np.asarray(fn(t, idx, a_p["x"], a_p["y"], a_p["zt"], a_p["u"]), dtype=float).reshape(N, -1)
            fm = np.asarray(fn(t, idx, a_m["x"], a_m["y"], a_m["zt"], a_m["u"]), dtype=float).reshape(N, -1)
            cols.append((fp - fm) / (2.0 * hstep[:, None]))
        J = np.stack(cols, axis=-1) if cols else np.zeros((N, 0, 0))
        return J.reshape((N,) + self.out_shape(name) + self.in_shape(wrt))

    def h_x(self, idx, x) -> np.ndarray:
        idx = np.asarray(idx)
        x = np.asarray(x, dtype=float)
        g = self._h_x(idx, x)
        if g is not None:
            return np.asarray(g, dtype=float).reshape(len(idx), self.m)
        cols = []
        for k in range(self.m):
            hstep = self.fd_step * np.maximum(1.0, np.abs(x[:, k]))
            plus, minus = x.copy(), x.copy()
            plus[:, k] += hstep
            minus[:, k] -= hstep
            cols.append((self._h(idx, plus) - self._h(idx, minus)) / (2.0 * hstep))
        return np.stack(cols, axis=-1)


class FunctionCoefficients(CoefficientSet):
    """Coefficients from user callables; missing ones are identically zero.

    ``derivatives`` maps (name, wrt) to an analytic Jacobian callable with
    the same signature as the coefficient, and "h_x" to ``fn(idx, x)``.
    Anything not supplied is differentiated by central differences, whose
    error is O(step^2) for smooth coefficients and can dominate when
    derivatives vary on scales below the step.
    """

    def __init__(self, m, n, r, d, T, *, b=None, sigma=None, f=None, l=None, h=None,
                 coupling="partial", derivatives: Mapping | None = None, fd_step=FD_STEP):
        super().__init__(m, n, r, d, T, coupling=coupling, fd_step=fd_step)
        self._fns = {"b": b, "sigma": sigma, "f": f, "l": l}
        self._hfn = h
        self._derivs = dict(derivatives or {})

    def _call(self, name, t, idx, x, y, zt, u):
        fn = self._fns[name]
        if fn is None:
            return np.zeros((len(idx),) + self.out_shape(name))
        return fn(t, idx, x, y, zt, u)

    def _b(self, t, idx, x, y, zt, u):
        return self._call("b", t, idx, x, y, zt, u)

    def _sigma(self, t, idx, x, y, zt, u):
        return self._call("sigma", t, idx, x, y, zt, u)

    def _f(self, t, idx, x, y, zt, u):
        return self._call("f", t, idx, x, y, zt, u)

    def _l(self, t, idx, x, y, zt, u):
        return self._call("l", t, idx, x, y, zt, u)

    def _h(self, idx, x):
        if self._hfn is None:
            return np.zeros(len(idx))
        return self._hfn(idx, x)

    def _jacobian(self, name, wrt, t, idx, x, y, zt, u):
        if self._fns[name] is None:
            return np.zeros((len(idx),) + self.out_shape(name) + self.in_shape(wrt))
        fn = self._derivs.get((name, wrt))
        return None if fn is None else fn(t, idx, x, y, zt, u)

    def _h_x(self, idx, x):
        if self._hfn is None:
            return np.zeros((len(idx), self.m))
        fn = self._derivs.get("h_x")
        return None if fn is None else fn(idx, x)


# name -> (owner coefficient, input variable or None for the constant term)
_LQ_TERMS = {
    "A": ("b", "x"), "Ay": ("b", "y"), "Az": ("b", "zt"), "B": ("b", "u"), "a": ("b", None),
    "Sx": ("sigma", "x"), "Sy": ("sigma", "y"), "Sz": ("sigma", "zt"), "Su": ("sigma", "u"),
    "s0": ("sigma", None),
    "Fx": ("f", "x"), "Fy": ("f", "y"), "Fz": ("f", "zt"), "Fu": ("f", "u"), "c": ("f", None),
}
_LQ_COST = ("Q", "Qy", "Qz", "R", "qx", "qy", "qz", "ru")


class LQCoefficients(CoefficientSet):
    """Linear dynamics with quadratic running and terminal costs.

    b = A x + Ay y + Az[zt] + B u + a, sigma = Sx x + Sy y + Sz[zt] + Su u + s0,
    f = Fx x + Fy y + Fz[zt] + Fu u + c, and

        l = x'Qx/2 + y'Qy y/2 + vec(zt)'Qz vec(zt)/2 + u'Ru/2 + qx.x + qy.y + qz:zt + ru.u,
        h = x'Hx/2 + g.x.

    Every time-dependent array may be given once (homogeneous) or with a
    leading axis of length T+1. Missing arrays are zero. Coefficients are
    deterministic, so derivatives are constant and exact.
    """

    def __init__(self, m, n, r, d, T, coupling="partial", H=None, g=None, **arrays):
        super().__init__(m, n, r, d, T, coupling=coupling)
        unknown = set(arrays) - set(_LQ_TERMS) - set(_LQ_COST)
        if unknown:
            raise TypeError(f"unknown LQ coefficient(s): {sorted(unknown)}")
        self.arrays: dict[str, np.ndarray] = {}
        for key in list(_LQ_TERMS) + list(_LQ_COST):
            base = self._base_shape(key)
            self.arrays[key] = self._per_time(key, arrays.get(key), base)
        for key in ("Q", "Qy", "Qz", "R"):
            M = self.arrays[key]
            self.arrays[key] = 0.5 * (M + np.swapaxes(M, -1, -2))
        self.H = np.zeros((m, m)) if H is None else np.asarray(H, dtype=float).reshape(m, m)
        self.H = 0.5 * (self.H + self.H.T)
        self.g = np.zeros(m) if g is None else np.asarray(g, dtype=float).reshape(m)
        if coupling == "partial":
            for key in ("Ay", "Az", "Sy", "Sz"):
                if np.any(self.arrays[key] != 0):
                    raise ValueError(f"{key} must vanish under partial coupling")

    def _base_shape(self, key: str) -> tuple:
        if key in _LQ_TERMS:
            owner, var = _LQ_TERMS[key]
            return self.out_shape(owner) + (self.in_shape(var) if var else ())
        nz = self.n * (self.d - 1)
        return {"Q": (self.m, self.m), "Qy": (self.n, self.n), "Qz": (nz, nz),
                "R": (self.r, self.r), "qx": (self.m,), "qy": (self.n,),
                "qz": (self.n, self.d - 1), "ru": (self.r,)}[key]

    def _per_time(self, key, value, base) -> np.ndarray:
        T1 = self.T + 1
        if value is None:
            return np.zeros((T1,) + base)
        v = np.asarray(value, dtype=float)
        if v.shape == base:
            return np.broadcast_to(v, (T1,) + base).copy()
        if v.shape == (T1,) + base:
            return v.copy()
        if v.size == int(np.prod(base)):
            return np.broadcast_to(v.reshape(base), (T1,) + base).copy()
        raise ValueError(f"{key} has shape {v.shape}; expected {base} or {(T1,) + base}")

    def _linear(self, owner, t, x, y, zt, u):
        N = len(x)
        shape = self.out_shape(owner)
        size = int(np.prod(shape))
        out = np.zeros((N, size))
        for key, (o, var) in _LQ_TERMS.items():
            if o != owner:
                continue
            M = self.arrays[key][t]
            if var is None:
                out += M.reshape(size)
            else:
                v = {"x": x, "y": y, "zt": zt, "u": u}[var]
                out += v.reshape(N, -1) @ M.reshape(size, -1).T
        return out.reshape((N,) + shape)

    def _b(self, t, idx, x, y, zt, u):
        return self._linear("b", t, x, y, zt, u)

    def _sigma(self, t, idx, x, y, zt, u):
        return self._linear("sigma", t, x, y, zt, u)

    def _f(self, t, idx, x, y, zt, u):
        return self._linear("f", t, x, y, zt, u)

    def _l(self, t, idx, x, y, zt, u):
        A = self.arrays
        zf = zt.reshape(len(zt), -1)
        quad = (np.einsum("ni,ij,nj->n", x, A["Q"][t], x)
                + np.einsum("ni,ij,nj->n", y, A["Qy"][t], y)
                + np.einsum("ni,ij,nj->n", zf, A["Qz"][t], zf)
                + np.einsum("ni,ij,nj->n", u, A["R"][t], u))
        lin = x @ A["qx"][t] + y @ A["qy"][t] + zf @ A["qz"][t].reshape(-1) + u @ A["ru"][t]
        return 0.5 * quad + lin

    def _h(self, idx, x):
        return 0.5 * np.einsum("ni,ij,nj->n", x, self.H, x) + x @ self.g

    def _h_x(self, idx, x):
        return x @ self.H + self.g

    def _jacobian(self, name, wrt, t, idx, x, y, zt, u):
        N = len(idx)
        if name == "l":
            A = self.arrays
            if wrt == "x":
                return x @ A["Q"][t] + A["qx"][t]
            if wrt == "y":
                return y @ A["Qy"][t] + A["qy"][t]
            if wrt == "u":
                return u @ A["R"][t] + A["ru"][t]
            zf = zt.reshape(N, -1)
            return (zf @ A["Qz"][t] + A["qz"][t].reshape(-1)).reshape(N, self.n, self.d - 1)
        key = next(k for k, (o, v) in _LQ_TERMS.items() if o == name and v == wrt)
        M = self.arrays[key][t]
        return np.broadcast_to(M, (N,) + M.shape)

    def matrices(self, t: int) -> dict[str, np.ndarray]:
        return {k: v[t] for k, v in self.arrays.items()}
