"""Instance builders and independent oracles shared by the test modules.

The oracles here deliberately avoid the package's solver code: they assemble
node equations one by one from the LQ matrices and solve them with dense
linear algebra.
"""

from __future__ import annotations

import numpy as np

from fbsdelta import AdaptedProcess, ControlProblem, LQCoefficients, build_tree, itilde


def random_kernel(rng, d, floor=0.1):
    p = rng.dirichlet(np.ones(d))
    p = floor / d + (1 - floor) * p
    return p / p.sum()


def random_tree(rng, d, T, node_dependent=True):
    if node_dependent:
        kernels = [np.array([random_kernel(rng, d) for _ in range(d**t)]) for t in range(T)]
        return build_tree(d, T, kernels)
    return build_tree(d, T, random_kernel(rng, d))


def _psd(rng, k, scale):
    A = rng.normal(size=(k, k))
    return scale * (A @ A.T) / k


def random_lq(rng, d=2, T=3, m=2, n=2, r=2, kind="partial", scale=0.3, costs=True, tree=None):
    """LQ instance with random time-dependent coefficients of size ``scale``."""
    if kind == "full":
        m = n = 1
    T1 = T + 1
    g = lambda *shape: scale * rng.normal(size=(T1,) + shape)  # noqa: E731
    arr = dict(A=g(m, m), B=g(m, r), a=g(m), Sx=g(m, d, m), Su=g(m, d, r), s0=g(m, d),
               Fx=g(n, m), Fy=g(n, n), Fz=g(n, n, d - 1), Fu=g(n, r), c=g(n))
    if kind == "full":
        arr.update(Ay=g(m, n), Az=g(m, n, d - 1), Sy=g(m, d, n), Sz=g(m, d, n, d - 1))
    H = g_ = None
    if costs:
        nz = n * (d - 1)
        arr.update(Q=np.array([_psd(rng, m, 1.0) for _ in range(T1)]),
                   Qy=np.array([_psd(rng, n, 0.5) for _ in range(T1)]),
                   Qz=np.array([_psd(rng, nz, 0.5) for _ in range(T1)]),
                   R=np.array([np.eye(r) + _psd(rng, r, 0.5) for _ in range(T1)]),
                   qx=g(m), qy=g(n), qz=g(n, d - 1), ru=g(r))
        H = _psd(rng, m, 1.0)
        g_ = scale * rng.normal(size=m)
    coeffs = LQCoefficients(m, n, r, d, T, coupling=kind, H=H, g=g_, **arr)
    tree = tree or random_tree(rng, d, T)
    yT = rng.normal(size=(d**T, n))
    return ControlProblem(tree, coeffs, rng.normal(size=m), yT, -np.ones(r), np.ones(r))


def random_control(rng, problem):
    tree = problem.tree
    vals = [problem.lo[t] + (problem.hi[t] - problem.lo[t]) * rng.random((tree.n_nodes(t), problem.r))
            for t in range(tree.T + 1)]
    return AdaptedProcess(tree, 0, tree.T, tuple(vals))


def monotone_full_instance(T=3):
    """Fully coupled LQ instance, monotone with alpha = 0.5, on which damped Picard contracts."""
    tree = build_tree(2, T, [0.4, 0.6])
    c = LQCoefficients(1, 1, 1, 2, T, coupling="full",
                       A=[[-0.5]], Ay=[[-0.6]], Sz=np.array([-2.2, 0.0]).reshape(1, 2, 1, 1),
                       Fx=[[0.6]], Fy=[[-0.5]], B=[[1.0]], Su=np.array([0.3, -0.2]).reshape(1, 2, 1),
                       Fu=[[0.2]], Q=[[1.0]], R=[[1.0]], H=[[1.0]], a=[0.1])
    return ControlProblem(tree, c, [1.0], [0.5], [-1.0], [1.0])


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def monolithic_state_solve(problem, control):
    """Solve the LQ state system as one dense linear system, node by node.

    Unknowns: X at depths 1..T, Y at depths 0..T-1, and the full n x d matrix
    Z at depths 0..T-1 with the normalization Z 1 = 0 appended as extra
    equations. Returns lists (X, Y, Z) per depth.
    """
    tree, c = problem.tree, problem.coeffs
    d, T, m, n = tree.d, tree.T, c.m, c.n
    mats = c.arrays
    I = np.vstack([np.eye(d - 1), -np.ones((1, d - 1))])
    full = c.coupling == "full"
    # index maps
    idx = {}
    pos = 0
    for t in range(1, T + 1):
        for j in range(d**t):
            idx["X", t, j] = pos
            pos += m
    for t in range(T):
        for j in range(d**t):
            idx["Y", t, j] = pos
            pos += n
    for t in range(T):
        for j in range(d**t):
            idx["Z", t, j] = pos
            pos += n * d
    nunk = pos
    rows, rhs = [], []

    def X_coef(t, j):  # returns (matrix over unknowns m x nunk, constant m)
        Mx = np.zeros((m, nunk))
        if t == 0:
            return Mx, problem.x0.copy()
        Mx[:, idx["X", t, j]:idx["X", t, j] + m] = np.eye(m)
        return Mx, np.zeros(m)

    def Y_coef(t, j):
        My = np.zeros((n, nunk))
        if t == T:
            return My, problem.yT[j].copy()
        My[:, idx["Y", t, j]:idx["Y", t, j] + n] = np.eye(n)
        return My, np.zeros(n)

    def Zt_coef(t, j):  # Z Itilde as (n*(d-1)) x nunk, row-major over (row, col)
        Mz = np.zeros((n * (d - 1), nunk))
        if t == T:
            return Mz, np.zeros(n * (d - 1))
        base = idx["Z", t, j]
        for a in range(n):
            for e in range(d - 1):
                for k in range(d):
                    Mz[a * (d - 1) + e, base + a * d + k] = I[k, e]
        return Mz, np.zeros(n * (d - 1))

    def linear_value(name, t, j):
        """Coefficient (matrix over unknowns, constant) of b, sigma (flattened) or f at node."""
        Mx, cx = X_coef(t, j)
        My, cy = Y_coef(t, j)
        Mz, cz = Zt_coef(t, j)
        u = control[t][j]
        keys = {"b": ("A", "Ay", "Az", "B", "a"), "sigma": ("Sx", "Sy", "Sz", "Su", "s0"),
                "f": ("Fx", "Fy", "Fz", "Fu", "c")}[name]
        kx, ky, kz, ku, k0 = keys
        out_size = {"b": m, "sigma": m * d, "f": n}[name]
        if (name in ("b", "sigma") and t == T) or (name == "f" and t == 0):
            return np.zeros((out_size, nunk)), np.zeros(out_size)
        Ax = mats[kx][t].reshape(out_size, m)
        Ay = mats[ky][t].reshape(out_size, n) if (full or name == "f") else np.zeros((out_size, n))
        Az = mats[kz][t].reshape(out_size, n * (d - 1)) if (full or name == "f") else np.zeros((out_size, n * (d - 1)))
        if name == "f" and t == T:
            Az = np.zeros_like(Az)
        Mat = Ax @ Mx + Ay @ My + Az @ Mz
        const = Ax @ cx + Ay @ cy + Az @ cz + mats[ku][t].reshape(out_size, -1) @ u + mats[k0][t].reshape(out_size)
        return Mat, const

    for t in range(T):
        for j in range(d**t):
            P = tree.kernels[t][j]
            Mb, cb = linear_value("b", t, j)
            Ms, cs = linear_value("sigma", t, j)
            Mx, cx = X_coef(t, j)
            My, cy = Y_coef(t, j)
            for i in range(d):
                jc = j * d + i
                Mi = np.eye(d)[i] - P
                # forward: X_child - X - b - sigma M = 0
                Mxc, cxc = X_coef(t + 1, jc)
                S = np.zeros((m, m * d))
                for a in range(m):
                    S[a, a * d:(a + 1) * d] = Mi
                rows.append(Mxc - Mx - Mb - S @ Ms)
                rhs.append(-(cxc - cx - cb - S @ cs))
                # backward: Y_child - Y + f(child) - Z M = 0
                Myc, cyc = Y_coef(t + 1, jc)
                Mf, cf = linear_value("f", t + 1, jc)
                Zm = np.zeros((n, nunk))
                base = idx["Z", t, j]
                for a in range(n):
                    Zm[a, base + a * d:base + (a + 1) * d] = Mi
                rows.append(Myc - My + Mf - Zm)
                rhs.append(-(cyc - cy + cf))
            # normalization Z 1 = 0
            Zn = np.zeros((n, nunk))
            base = idx["Z", t, j]
            for a in range(n):
                Zn[a, base + a * d:base + (a + 1) * d] = 1.0
            rows.append(Zn)
            rhs.append(np.zeros(n))
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    X = [problem.x0.reshape(1, m)] + [np.array([sol[idx["X", t, j]:idx["X", t, j] + m] for j in range(d**t)])
                                       for t in range(1, T + 1)]
    Y = [np.array([sol[idx["Y", t, j]:idx["Y", t, j] + n] for j in range(d**t)]) for t in range(T)] + [problem.yT]
    Z = [np.array([sol[idx["Z", t, j]:idx["Z", t, j] + n * d].reshape(n, d) for j in range(d**t)])
         for t in range(T)]
    return X, Y, Z


def leaf_paths(tree):
    """For every leaf: list of (t, position) along its path and its probability."""
    out = []
    for jT in range(tree.n_nodes(tree.T)):
        node = tree.node(tree.T, jT)
        path = [(t, tree.index(node[:t])[1]) for t in range(tree.T + 1)]
        prob = 1.0
        for t in range(tree.T):
            prob *= tree.kernels[t][path[t][1]][node[t]]
        out.append((path, prob))
    return out


def lq_running_cost(c, t, x, y, zt, u):
    A = c.arrays
    zf = np.ravel(zt)
    return (0.5 * x @ A["Q"][t] @ x + 0.5 * y @ A["Qy"][t] @ y + 0.5 * zf @ A["Qz"][t] @ zf
            + 0.5 * u @ A["R"][t] @ u + A["qx"][t] @ x + A["qy"][t] @ y + A["qz"][t].ravel() @ zf
            + A["ru"][t] @ u)


def path_enumeration_cost(problem, control, X, Y, Z):
    """J by averaging the pathwise cost over all d**T leaves."""
    tree, c = problem.tree, problem.coeffs
    d = tree.d
    I = np.vstack([np.eye(d - 1), -np.ones((1, d - 1))])
    J = 0.0
    for path, prob in leaf_paths(tree):
        total = 0.0
        for t, j in path[:-1]:
            total += lq_running_cost(c, t, X[t][j], Y[t][j], Z[t][j] @ I, control[t][j])
        tT, jT = path[-1]
        x = X[tT][jT]
        total += 0.5 * x @ c.H @ x + c.g @ x
        J += prob * total
    return J


def monolithic_bsde(tree, a, bz, c, eta):
    """Solve Y_{t+1} - Y_t + f(t+1) - Z_t M_{t+1} = 0 for all nodes at once.

    Scalar n = 1 with f(t, j, y, zt) = a[t][j] y + bz[t][j] . zt + c[t][j]
    (zt = 0 at T). Z is carried as d free entries with Z 1 = 0 imposed.
    """
    d, T = tree.d, tree.T
    I = itilde(d)
    yidx, zidx, pos = {}, {}, 0
    for t in range(T):
        for j in range(d**t):
            yidx[t, j] = pos
            pos += 1
    for t in range(T):
        for j in range(d**t):
            zidx[t, j] = pos
            pos += d
    rows, rhs = [], []
    for t in range(T):
        for j in range(d**t):
            P = tree.kernels[t][j]
            for i in range(d):
                jc = j * d + i
                row = np.zeros(pos)
                const = 0.0
                row[yidx[t, j]] -= 1.0
                row[zidx[t, j]:zidx[t, j] + d] -= np.eye(d)[i] - P
                at, bt, ct = a[t + 1][jc], bz[t + 1][jc], c[t + 1][jc]
                if t + 1 == T:
                    const += eta[jc] + at * eta[jc] + ct
                else:
                    row[yidx[t + 1, jc]] += 1.0 + at
                    row[zidx[t + 1, jc]:zidx[t + 1, jc] + d] += I @ bt
                    const += ct
                rows.append(row)
                rhs.append(-const)
            row = np.zeros(pos)
            row[zidx[t, j]:zidx[t, j] + d] = 1.0
            rows.append(row)
            rhs.append(0.0)
    sol = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    Y = [np.array([sol[yidx[t, j]] for j in range(d**t)]) for t in range(T)]
    Z = [np.array([sol[zidx[t, j]:zidx[t, j] + d] for j in range(d**t)]) for t in range(T)]
    return Y, Z


def linear_generator(a, bz, c):
    def gen(t, idx, y, zt):
        return a[t][idx][:, None] * y + np.einsum("ne,ne->n", bz[t][idx], zt[:, 0, :])[:, None] + c[t][idx][:, None]
    return gen
