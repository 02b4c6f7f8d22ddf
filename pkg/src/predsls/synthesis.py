"""Column-wise synthesis of localized closed-loop maps.

Index convention shared by every module: both time ``t`` and column ``k``
run over ``0..T``.  Column ``k`` multiplies the disturbance ``w_{k-1}``
(the one that first shows up in ``x_k``), with ``w_{-1} = x_0`` and
``w_hat_{-1} = 0``.  Action maps carry a row for ``t = T`` that is always
zero, which keeps all four kernel families the same shape.

For a source node ``i`` and column ``k`` the localized problem splits into

* a causal impulse response started from ``e_i`` at time ``k``, and
* a non-causal response to a unit impulse at time ``k`` that is known in
  advance, so actions before ``k`` may anticipate it.

The causal part is the response to the unpredicted share of the
disturbance; the non-causal part is the full response to an exactly
predicted one.  Both come from the same locality-constrained Riccati gains.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lqr import AffineGains, LocalizabilityError, constrained_lqr, locality_constrained_gains
from .model import NetworkedSystem

log = logging.getLogger(__name__)

__all__ = [
    "ColumnMaps",
    "ClosedLoopMaps",
    "KKTError",
    "solve_causal_column",
    "solve_noncausal_column",
    "stitch_column",
    "synthesize",
    "synthesize_node",
    "reduce_support",
    "ReducedSystem",
    "reduced_gains",
    "kkt_oracle",
    "column_objective",
    "column_residual",
    "dynamics_residual",
    "KINDS",
]

KINDS = ("x", "xhat", "u", "uhat")


class KKTError(np.linalg.LinAlgError):
    """The oracle's KKT matrix is singular."""


# -- per-column solves ----------------------------------------------------------


def _impulse(system: NetworkedSystem, i: int) -> np.ndarray:
    """n x n_i matrix whose columns are the unit vectors of node i's state block."""
    return np.eye(system.n)[:, system.state_slice(i)]


LEAK_TOLERANCE = 1e-8


def _step(system: NetworkedSystem, x, u, gains: AffineGains, where):
    """One step of the column dynamics, kept on the state support.

    Entries outside the support are zero in exact arithmetic; they are
    checked and then dropped so that roundoff is not amplified by unstable
    modes that the column never excites.
    """
    nxt = system.A @ x + system.B @ u
    if gains.state_support is None:
        return nxt
    off = np.ones(system.n, dtype=bool)
    off[gains.state_support] = False
    leak = np.abs(nxt[off]).max(initial=0.0)
    if leak > LEAK_TOLERANCE * max(1.0, np.abs(nxt).max()):
        raise LocalizabilityError(f"{where} leaves its support (|x| = {leak:.3e} outside)", node=gains.node)
    nxt[off] = 0.0
    return nxt


def solve_causal_column(system: NetworkedSystem, i: int, k: int, gains: AffineGains):
    """Causal impulse response for column (i, k).

    Returns ``(psi_x, psi_u)`` of shapes (T-k+1, n, n_i) and (T-k+1, m, n_i);
    the last action row is zero since no input acts after the horizon.
    Gains are read with a time shift of ``k``.
    """
    T = system.T
    steps = T - k
    E = _impulse(system, i)
    psi_x = np.zeros((steps + 1, system.n, E.shape[1]))
    psi_u = np.zeros((steps + 1, system.m, E.shape[1]))
    psi_x[0] = E
    for s in range(steps):
        psi_u[s] = gains.kbar[s + k] @ psi_x[s]
        psi_x[s + 1] = _step(system, psi_x[s], psi_u[s], gains, f"causal column ({i + 1}, {k})")
    return psi_x, psi_u


def solve_noncausal_column(system: NetworkedSystem, i: int, k: int, gains: AffineGains):
    """Response to a unit impulse at node i that arrives at time k and is known in advance.

    Returns ``(psi_x, psi_u)`` of shapes (T+1, n, n_i) and (T+1, m, n_i).
    """
    T = system.T
    E = _impulse(system, i)
    psi_x = np.zeros((T + 1, system.n, E.shape[1]))
    psi_u = np.zeros((T + 1, system.m, E.shape[1]))
    if k == 0:
        psi_x[0] = E
    for t in range(T):
        psi_u[t] = gains.kbar[t] @ psi_x[t] + gains.preview(t, k - t - 1) @ E
        psi_x[t + 1] = _step(system, psi_x[t], psi_u[t], gains, f"non-causal column ({i + 1}, {k})")
        if t + 1 == k:
            psi_x[t + 1] += E
    return psi_x, psi_u


def stitch_column(causal, noncausal, k: int):
    """Combine the two responses into the four kernels of column k.

    Before ``k`` the causal kernels vanish and the predictive ones carry the
    whole anticipatory response; from ``k`` on the causal kernels are the
    shifted causal response and the predictive ones the remainder.
    """
    psi_x, psi_u = causal
    hat_x, hat_u = noncausal
    phi_x = np.zeros_like(hat_x)
    phi_u = np.zeros_like(hat_u)
    phi_x[k:] = psi_x
    phi_u[k:] = psi_u
    return phi_x, hat_x - phi_x, phi_u, hat_u - phi_u


# -- storage --------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnMaps:
    """Kernels of source node `node`, stored only on its locality support.

    Arrays are indexed ``[t, k, row, c]`` where ``row`` enumerates
    `state_support` (resp. `action_support`) and ``c`` the coordinates of
    the source node's state block.
    """

    node: int
    state_support: np.ndarray
    action_support: np.ndarray
    x: np.ndarray = field(repr=False)
    xhat: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)
    uhat: np.ndarray = field(repr=False)

    def kernel(self, kind: str) -> np.ndarray:
        return getattr(self, kind)

    def support(self, kind: str) -> np.ndarray:
        return self.state_support if kind in ("x", "xhat") else self.action_support

    def dense(self, kind: str, n_rows: int) -> np.ndarray:
        """Full-height kernel array (T+1, T+1, n_rows, n_i)."""
        K = self.kernel(kind)
        out = np.zeros(K.shape[:2] + (n_rows, K.shape[3]))
        out[:, :, self.support(kind)] = K
        return out


@dataclass(frozen=True)
class ClosedLoopMaps:
    system: NetworkedSystem = field(repr=False)
    kappa: int
    columns: tuple = field(repr=False)

    @property
    def T(self) -> int:
        return self.system.T

    def assemble(self, kind: str) -> np.ndarray:
        """Dense kernel family of shape (T+1, T+1, rows, n)."""
        if kind not in KINDS:
            raise ValueError(f"unknown kernel kind {kind!r}")
        rows = self.system.n if kind in ("x", "xhat") else self.system.m
        T = self.T
        out = np.zeros((T + 1, T + 1, rows, self.system.n))
        for col in self.columns:
            cs = self.system.state_slice(col.node)
            out[:, :, col.support(kind), cs] = col.kernel(kind)
        return out

    def block_norms(self, kind: str) -> np.ndarray:
        """(T+1, T+1) grid of spectral norms of the assembled kernel blocks."""
        return np.linalg.norm(self.assemble(kind), ord=2, axis=(2, 3))


# -- reduced support path -------------------------------------------------------


@dataclass(frozen=True)
class ReducedSystem:
    """Sub-problem restricted to the support of one source column.

    ``A_nn``/``B_nn`` act inside the support; ``A_bn``/``B_bn`` are the
    boundary rows that must stay zero.  Because A and B couple only 1-hop
    neighbours, the boundary consists of the two state shells right outside
    the kappa-neighbourhood: shell kappa+1 is reached by A and B, shell
    kappa+2 only by the actions on the outermost action shell.
    """

    node: int
    state_support: np.ndarray
    action_support: np.ndarray
    boundary: np.ndarray
    A_nn: np.ndarray = field(repr=False)
    B_nn: np.ndarray = field(repr=False)
    A_bn: np.ndarray = field(repr=False)
    B_bn: np.ndarray = field(repr=False)
    Q: np.ndarray = field(repr=False)
    R: np.ndarray = field(repr=False)
    Q_T: np.ndarray = field(repr=False)


def reduce_support(system: NetworkedSystem, i: int, kappa: int) -> ReducedSystem:
    dist = system.topology.dist[i]
    sx = system.state_index(np.flatnonzero(dist <= kappa))
    su = system.action_index(np.flatnonzero(dist <= kappa + 1))
    shells = np.flatnonzero((dist == kappa + 1) | (dist == kappa + 2))
    sb = system.state_index(shells)
    A, B = system.A, system.B
    return ReducedSystem(
        node=i, state_support=sx, action_support=su, boundary=sb,
        A_nn=A[np.ix_(sx, sx)], B_nn=B[np.ix_(sx, su)],
        A_bn=A[np.ix_(sb, sx)], B_bn=B[np.ix_(sb, su)],
        Q=system.Q[np.ix_(sx, sx)], R=system.R[np.ix_(su, su)], Q_T=system.Q_T[np.ix_(sx, sx)],
    )


def reduced_gains(system: NetworkedSystem, i: int, kappa: int) -> AffineGains:
    """Same gains as `locality_constrained_gains`, computed on the reduced sub-problem.

    The result is embedded back into full width; columns of ``kbar`` outside
    the state support are zero, which is harmless since trajectories never
    leave the support.
    """
    red = reduce_support(system, i, kappa)
    kq, mq, P = constrained_lqr(red.A_nn, red.B_nn, red.Q, red.R, red.Q_T, system.T,
                                red.A_bn, red.B_bn, node=i)
    T = system.T
    sx, su = red.state_support, red.action_support
    kbar = np.zeros((T, system.m, system.n))
    mbar = np.zeros((T, T, system.m, system.n))
    kbar[np.ix_(np.arange(T), su, sx)] = kq
    mbar[np.ix_(np.arange(T), np.arange(T), su, sx)] = mq
    Pfull = np.zeros((T + 1, system.n, system.n))
    Pfull[np.ix_(np.arange(T + 1), sx, sx)] = P
    return AffineGains(kbar=kbar, mbar=mbar, node=i, state_support=sx, action_support=su, P=Pfull)


# -- assembly -------------------------------------------------------------------


def synthesize_node(system: NetworkedSystem, i: int, kappa: int, reduced: bool = False) -> ColumnMaps:
    """All T+1 columns of source node i."""
    gains = reduced_gains(system, i, kappa) if reduced else locality_constrained_gains(system, i, kappa)
    sx, su = gains.state_support, gains.action_support
    T, ni = system.T, int(system.state_dims[i])
    out = {kind: np.zeros((T + 1, T + 1, len(sx if kind in ("x", "xhat") else su), ni)) for kind in KINDS}
    for k in range(T + 1):
        causal = solve_causal_column(system, i, k, gains)
        noncausal = solve_noncausal_column(system, i, k, gains)
        phi_x, hat_x, phi_u, hat_u = stitch_column(causal, noncausal, k)
        out["x"][:, k] = phi_x[:, sx]
        out["xhat"][:, k] = hat_x[:, sx]
        out["u"][:, k] = phi_u[:, su]
        out["uhat"][:, k] = hat_u[:, su]
    return ColumnMaps(node=i, state_support=sx, action_support=su, **out)


def _node_task(args):
    system, i, kappa, reduced = args
    return synthesize_node(system, i, kappa, reduced)


def synthesize(system: NetworkedSystem, kappa: int, reduced: bool = False, jobs: int = 1) -> ClosedLoopMaps:
    """Synthesize the kappa-localized maps of every source node.

    Nodes are independent; with ``jobs > 1`` they are solved in a process
    pool and merged in node order, so the result does not depend on `jobs`.
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    tasks = [(system, i, kappa, reduced) for i in range(system.N)]
    if jobs > 1 and system.N > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            columns = tuple(pool.map(_node_task, tasks))
    else:
        columns = tuple(_node_task(t) for t in tasks)
    return ClosedLoopMaps(system=system, kappa=int(kappa), columns=columns)


# -- diagnostics ----------------------------------------------------------------


def column_residual(system: NetworkedSystem, col: ColumnMaps) -> dict:
    """Largest violation of each structural constraint within one source column.

    Keys: ``identity`` (causal kernel equals I at t = k), ``causal``
    (causal recursion for t >= k, zero before k), ``noncausal`` (predictive
    recursion from zero initial condition), ``terminal`` (no action at T).
    """
    X, Xh = col.dense("x", system.n), col.dense("xhat", system.n)
    U, Uh = col.dense("u", system.m), col.dense("uhat", system.m)
    T = system.T
    A, B = system.A, system.B
    res = {"identity": 0.0, "causal": 0.0, "noncausal": 0.0, "terminal": 0.0}
    eye = np.zeros((system.n, X.shape[3]))
    eye[system.state_slice(col.node)] = np.eye(X.shape[3])
    for k in range(T + 1):
        res["identity"] = max(res["identity"], np.abs(X[k, k] - eye).max())
        res["causal"] = max(res["causal"], np.abs(X[:k, k]).max(initial=0.0), np.abs(U[:k, k]).max(initial=0.0))
        res["noncausal"] = max(res["noncausal"], np.abs(Xh[0, k]).max())
        for t in range(T):
            if t >= k:
                r = X[t + 1, k] - A @ X[t, k] - B @ U[t, k]
                res["causal"] = max(res["causal"], np.abs(r).max())
            r = Xh[t + 1, k] - A @ Xh[t, k] - B @ Uh[t, k]
            res["noncausal"] = max(res["noncausal"], np.abs(r).max())
    res["terminal"] = max(np.abs(U[T]).max(), np.abs(Uh[T]).max())
    return {key: float(v) for key, v in res.items()}


def dynamics_residual(maps: ClosedLoopMaps) -> dict:
    """Per-key maximum of `column_residual` over all columns."""
    per_col = [column_residual(maps.system, col) for col in maps.columns]
    return {key: max(r[key] for r in per_col) for key in per_col[0]}


def column_objective(system: NetworkedSystem, col: ColumnMaps, k: int) -> float:
    """Cost of the combined column ``phi + phi_hat`` for one k (summed over the node's coordinates)."""
    sx, su = col.state_support, col.action_support
    Q, R, QT = system.Q[np.ix_(sx, sx)], system.R[np.ix_(su, su)], system.Q_T[np.ix_(sx, sx)]
    s_x = col.x[:, k] + col.xhat[:, k]
    s_u = col.u[:, k] + col.uhat[:, k]
    T = system.T
    total = 0.0
    for t in range(T):
        total += np.trace(s_x[t].T @ Q @ s_x[t]) + np.trace(s_u[t].T @ R @ s_u[t])
    total += np.trace(s_x[T].T @ QT @ s_x[T])
    return float(total)


def kkt_oracle(system: NetworkedSystem, i: int, k: int, kappa: int, coord: int = 0) -> dict:
    """Solve one column problem as a dense equality-constrained QP.

    Decision variables are the four kernels of column (i, k) over the full
    state and action spaces, for the ``coord``-th coordinate of node i.
    Constraints, written out row by row: identity at t = k, causal recursion
    for t >= k, zero causal kernels before k (eliminated, not variables),
    zero predictive state at t = 0, predictive recursion for all t, and zero
    rows outside the locality support.  The constrained minimizer is found
    from the first-order (KKT) conditions by a direct solve.

    The cost is ``J(phi + phi_hat) + J(phi)`` where ``J`` is the stage cost
    with the terminal weight.  The first term alone does not pin down how
    the combined response is split between the causal and predictive
    kernels; the second term selects the split whose causal part is the
    cheapest causal response, which is the split the closed form produces.

    Returns a dict of full-height arrays ``x, xhat`` (T+1, n) and
    ``u, uhat`` (T+1, m).
    """
    n, m, T = system.n, system.m, system.T
    A, B, Q, R, QT = system.A, system.B, system.Q, system.R, system.Q_T
    dist = system.topology.dist[i]
    sx = system.state_index(np.flatnonzero(dist <= kappa))
    su = system.action_index(np.flatnonzero(dist <= kappa + 1))
    out_x = np.setdiff1d(np.arange(n), sx)
    out_u = np.setdiff1d(np.arange(m), su)

    # variable layout
    offsets = {}
    size = 0

    def alloc(name, t, dim):
        nonlocal size
        offsets[(name, t)] = slice(size, size + dim)
        size += dim

    for t in range(k, T + 1):
        alloc("x", t, n)
    for t in range(k, T):
        alloc("u", t, m)
    for t in range(T + 1):
        alloc("xhat", t, n)
    for t in range(T):
        alloc("uhat", t, m)

    H = np.zeros((size, size))

    def add_quad(pairs, W):
        # adds (sum of listed variables)' W (sum of listed variables)
        for a in pairs:
            for b in pairs:
                H[offsets[a], offsets[b]] += W

    for t in range(T + 1):
        Wx = QT if t == T else Q
        xs = [("xhat", t)] + ([("x", t)] if t >= k else [])
        add_quad(xs, Wx)
        if t >= k:
            add_quad([("x", t)], Wx)
        if t < T:
            us = [("uhat", t)] + ([("u", t)] if t >= k else [])
            add_quad(us, R)
            if t >= k:
                add_quad([("u", t)], R)

    rows, rhs = [], []

    def constraint(terms, b):
        row = np.zeros((len(b), size))
        for (name, t), M in terms:
            row[:, offsets[(name, t)]] += M
        rows.append(row)
        rhs.append(b)

    e = np.zeros(n)
    e[system.state_slice(i).start + coord] = 1.0
    In, Im = np.eye(n), np.eye(m)
    constraint([(("x", k), In)], e)
    for t in range(k, T):
        constraint([(("x", t + 1), In), (("x", t), -A), (("u", t), -B)], np.zeros(n))
        if t + 1 > k and out_x.size:
            constraint([(("x", t + 1), In[out_x])], np.zeros(out_x.size))
        if out_u.size:
            constraint([(("u", t), Im[out_u])], np.zeros(out_u.size))
    constraint([(("xhat", 0), In)], np.zeros(n))
    for t in range(T):
        constraint([(("xhat", t + 1), In), (("xhat", t), -A), (("uhat", t), -B)], np.zeros(n))
        if out_x.size:
            constraint([(("xhat", t + 1), In[out_x])], np.zeros(out_x.size))
        if out_u.size:
            constraint([(("uhat", t), Im[out_u])], np.zeros(out_u.size))

    C = np.vstack(rows)
    d = np.concatenate(rhs)
    # Mask rows on far-away coordinates are often implied by the others, so
    # C may be row-rank deficient; such redundancy is harmless as long as the
    # rows stay consistent.  The problem is solved in null-space form, which
    # also avoids the squared conditioning of the saddle-point system.
    U, sv, Vt = np.linalg.svd(C, full_matrices=True)
    rank = int((sv > max(C.shape) * np.finfo(float).eps * sv.max()).sum())
    z0 = Vt[:rank].T @ ((U[:, :rank].T @ d) / sv[:rank])
    gap = float(np.abs(C @ z0 - d).max())
    if gap > 1e-9 * max(1.0, float(np.abs(d).max())):
        raise KKTError(f"infeasible constraints for column ({i + 1}, {k}) at kappa={kappa}: "
                       f"residual {gap:.3e}")
    Z = Vt[rank:].T
    y = np.linalg.solve(Z.T @ H @ Z, -(Z.T @ (H @ z0))) if Z.shape[1] else np.zeros(0)
    z = z0 + Z @ y

    sol = {"x": np.zeros((T + 1, n)), "xhat": np.zeros((T + 1, n)),
           "u": np.zeros((T + 1, m)), "uhat": np.zeros((T + 1, m))}
    for (name, t), sl in offsets.items():
        sol[name][t] = z[sl]
    return sol
