"""Riccati engines.

Sign convention: every gain in this module is "negative-definite", i.e. the
control law *adds* it::

    u_t = K x_t + sum_tau L_tau w_{t+tau}

with ``K = -(R + B'PB)^{-1} B'PA``.  ``L_tau`` / ``M_{t,tau}`` always multiply
the disturbance ``w_{t+tau}``, the one entering ``x_{t+tau+1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .model import NetworkedSystem

__all__ = [
    "RiccatiError",
    "LocalizabilityError",
    "RiccatiSolution",
    "AffineGains",
    "solve_dare",
    "dare_residual",
    "preview_gains",
    "finite_horizon_gains",
    "locality_constrained_gains",
    "constrained_lqr",
    "rank_tolerance",
]

OVERFLOW_GUARD = 1e12


class RiccatiError(ArithmeticError):
    """A Riccati iteration failed to converge or blew up."""


class LocalizabilityError(RiccatiError):
    """The locality constraint cannot be met by any admissible action."""

    def __init__(self, message: str, node: Optional[int] = None):
        super().__init__(message)
        self.node = node


@dataclass(frozen=True)
class RiccatiSolution:
    P: np.ndarray
    K: np.ndarray
    L: np.ndarray = field(repr=False)  # (T, m, n); empty when no horizon given
    iterations: int = 0
    residual: float = 0.0


@dataclass(frozen=True)
class AffineGains:
    """Time-varying gains of a locality-constrained finite-horizon LQR.

    ``kbar[t]`` is the feedback gain and ``mbar[t, tau]`` the gain on the
    disturbance ``w_{t+tau}``; entries with ``tau > T - t - 1`` are zero.
    """

    kbar: np.ndarray  # (T, m, n)
    mbar: np.ndarray = field(repr=False)  # (T, T, m, n)
    node: int = -1
    state_support: np.ndarray = field(default=None, repr=False)
    action_support: np.ndarray = field(default=None, repr=False)
    P: np.ndarray = field(default=None, repr=False)  # (T+1, n, n) cost-to-go

    @property
    def horizon(self) -> int:
        return self.kbar.shape[0]

    def preview(self, t: int, tau: int) -> np.ndarray:
        """M_{t,tau}, or zeros when tau is outside [0, T - t - 1]."""
        if tau < 0 or tau > self.horizon - t - 1:
            return np.zeros(self.kbar.shape[1:])
        return self.mbar[t, tau]


def _sym(P):
    return 0.5 * (P + P.T)


def _riccati_map(A, B, Q, R, P):
    BtP = B.T @ P
    G = R + BtP @ B
    K = -np.linalg.solve(G, BtP @ A)
    return _sym(Q + A.T @ P @ A + A.T @ P @ B @ K), K


def dare_residual(A, B, Q, R, P) -> float:
    nxt, _ = _riccati_map(A, B, Q, R, P)
    return float(np.linalg.norm(P - nxt))


def preview_gains(A, B, R, P, K, horizon: int) -> np.ndarray:
    """L_tau = -(R + B'PB)^{-1} B' [(A + BK)']^tau P for tau = 0..horizon-1."""
    n, m = B.shape
    L = np.zeros((horizon, m, n))
    G = R + B.T @ P @ B
    F_T = (A + B @ K).T
    power = P.copy()
    for tau in range(horizon):
        L[tau] = -np.linalg.solve(G, B.T @ power)
        power = F_T @ power
    return L


def solve_dare(A, B, Q, R, tolerance: float = 1e-12, max_iters: int = 10_000,
               horizon: Optional[int] = None) -> RiccatiSolution:
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    The backward Riccati map is applied from ``P = Q`` until successive
    iterates agree to ``tolerance`` (relative to ``max(1, ||P||)``).  When
    `horizon` is given the preview gains ``L_0..L_{horizon-1}`` are returned
    too.

    Raises
    ------
    RiccatiError
        If the iteration has not converged after `max_iters` steps or the
        iterate overflows, which signals a non-stabilizable pair (A, B).
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    P = _sym(Q.copy())
    for it in range(1, max_iters + 1):
        P_next, K = _riccati_map(A, B, Q, R, P)
        if not np.all(np.isfinite(P_next)) or np.abs(P_next).max() > OVERFLOW_GUARD:
            raise RiccatiError(f"Riccati iterate overflowed after {it} iterations")
        step = float(np.linalg.norm(P_next - P))
        P = P_next
        if step < tolerance * max(1.0, float(np.linalg.norm(P))):
            break
    else:
        raise RiccatiError(f"DARE iteration did not converge in {max_iters} iterations")
    _, K = _riccati_map(A, B, Q, R, P)
    L = preview_gains(A, B, R, P, K, horizon) if horizon else np.zeros((0,) + K.shape)
    return RiccatiSolution(P=P, K=K, L=L, iterations=it, residual=dare_residual(A, B, Q, R, P))


def finite_horizon_gains(A, B, Q, R, Q_T, horizon: int):
    """Backward Riccati recursion with terminal weight `Q_T`.

    Returns ``(K, P)`` with ``K`` of shape (T, m, n) and ``P`` of shape
    (T+1, n, n), ``P[T] = Q_T``.
    """
    n, m = B.shape
    K = np.zeros((horizon, m, n))
    P = np.zeros((horizon + 1, n, n))
    P[horizon] = _sym(np.asarray(Q_T, dtype=float))
    for t in range(horizon - 1, -1, -1):
        G = R + B.T @ P[t + 1] @ B
        if np.linalg.cond(G) > 1 / np.finfo(float).eps:
            raise RiccatiError(f"R + B'P_{t + 1}B is singular")
        P[t], K[t] = _riccati_map(A, B, Q, R, P[t + 1])
    return K, P


def rank_tolerance(s: np.ndarray, shape) -> float:
    if s.size == 0:
        return 0.0
    return max(shape) * np.finfo(float).eps * float(s.max())


def _pinv_and_null(Y: np.ndarray):
    """SVD pseudo-inverse and orthonormal null-space basis of Y."""
    rows, cols = Y.shape
    if rows == 0:
        return np.zeros((cols, 0)), np.eye(cols)
    U, s, Vt = np.linalg.svd(Y, full_matrices=True)
    rank = int((s > rank_tolerance(s, Y.shape)).sum())
    pinv = (Vt[:rank].T / s[:rank]) @ U[:, :rank].T
    return pinv, Vt[rank:].T.copy()


def constrained_lqr(A, Bq, Q, Rq, Q_T, horizon: int, C_x, C_q, *, node=None, support=None):
    """Finite-horizon LQR with a per-step linear constraint ``C_x x + C_q q = 0``.

    The constraint is eliminated by ``q = -C_q^+ C_x x + N r`` with ``N`` an
    orthonormal basis of null(C_q); the remaining free input ``r`` drives an
    LQR with a state/input cross term, solved backward in time.

    Only states supported on `support` (all coordinates by default) have to
    satisfy the constraint; leakage from other coordinates is irrelevant
    because trajectories never reach them.

    Returns ``(kq, mq, P)``: feedback gains (T, q, n), preview gains
    (T, T, q, n) expressed on the constrained input ``q``, and the
    cost-to-go matrices (T+1, n, n).
    """
    n = A.shape[0]
    nq = Bq.shape[1]
    C_x = np.asarray(C_x, dtype=float).reshape(-1, n)
    C_q = np.asarray(C_q, dtype=float).reshape(-1, nq)
    Y_pinv, N = _pinv_and_null(C_q)

    # every state the constraint can meet must be reachable through C_q
    leak = C_x - C_q @ (Y_pinv @ C_x)
    if support is not None:
        leak = leak[:, support]
    scale = max(1.0, float(np.abs(C_x).max(initial=0.0)))
    if leak.size and np.abs(leak).max() > 1e-9 * scale:
        raise LocalizabilityError(
            "boundary input block cannot cancel the state leakage "
            f"(residual {np.abs(leak).max():.3e})",
            node=node,
        )

    G0 = -Y_pinv @ C_x  # q = G0 x + N r
    A_t = A + Bq @ G0
    B_t = Bq @ N
    Q_t = Q + G0.T @ Rq @ G0
    R_t = N.T @ Rq @ N
    Z_t = N.T @ Rq @ G0
    nr = N.shape[1]

    P = np.zeros((horizon + 1, n, n))
    K_t = np.zeros((horizon, nr, n))
    Ginv_Bt = np.zeros((horizon, nr, n))  # G_t^{-1} B_t'
    F = np.zeros((horizon, n, n))
    P[horizon] = _sym(np.asarray(Q_T, dtype=float))
    for t in range(horizon - 1, -1, -1):
        Pn = P[t + 1]
        if nr:
            G = R_t + B_t.T @ Pn @ B_t
            K_t[t] = -np.linalg.solve(G, B_t.T @ Pn @ A_t + Z_t)
            Ginv_Bt[t] = np.linalg.solve(G, B_t.T)
        F[t] = A_t + B_t @ K_t[t]
        P[t] = _sym(Q_t + A_t.T @ Pn @ A_t + (A_t.T @ Pn @ B_t + Z_t.T) @ K_t[t])
        if not np.all(np.isfinite(P[t])) or np.abs(P[t]).max() > OVERFLOW_GUARD:
            raise RiccatiError(f"constrained Riccati recursion overflowed at t={t}")

    # M_{t,tau} = -G_t^{-1} B_t' F_{t+1}' ... F_{t+tau}' P_{t+tau+1}
    M_t = np.zeros((horizon, horizon, nr, n))
    if nr:
        for t in range(horizon):
            chain = np.eye(n)
            for tau in range(horizon - t):
                if tau:
                    chain = chain @ F[t + tau].T
                M_t[t, tau] = -Ginv_Bt[t] @ chain @ P[t + tau + 1]

    kq = N @ K_t + G0  # broadcast over t
    mq = np.einsum("qr,abrn->abqn", N, M_t)
    return kq, mq, P


def locality_constrained_gains(system: "NetworkedSystem", node: int, kappa: int) -> AffineGains:
    """Affine gains (K̄_t, M̄_{t,tau}) of the kappa-localized column-`node` problem.

    Works on the full n-dimensional state (with A restricted to the support
    columns): ``M_x`` selects state coordinates
    outside the kappa-hop neighbourhood of `node`, ``M_u`` the action
    coordinates inside the (kappa+1)-hop neighbourhood, ``Y = M_x B M_u``.
    With kappa >= diameter there is no active constraint and the result is
    the unconstrained finite-horizon Riccati solution with terminal ``Q_T``.
    """
    topo = system.topology
    dist = topo.dist[node]
    state_nodes = np.flatnonzero(dist <= kappa)
    action_nodes = np.flatnonzero(dist <= kappa + 1)
    sx = system.state_index(state_nodes)
    su = system.action_index(action_nodes)
    forbidden = np.setdiff1d(np.arange(system.n), sx)

    # Columns of A outside the support never meet a trajectory of this
    # column problem; zeroing them keeps unstable modes there out of P.
    A = np.zeros_like(system.A)
    A[:, sx] = system.A[:, sx]
    B = system.B
    M_u = np.eye(system.m)[:, su]
    Bq = B @ M_u
    Rq = M_u.T @ system.R @ M_u
    C_x = A[forbidden]
    C_q = Bq[forbidden]
    kq, mq, P = constrained_lqr(A, Bq, system.Q, Rq, system.Q_T, system.T, C_x, C_q,
                                node=node, support=sx)
    kbar = np.einsum("uq,tqn->tun", M_u, kq)
    mbar = np.einsum("uq,abqn->abun", M_u, mq)
    return AffineGains(kbar=kbar, mbar=mbar, node=node, state_support=sx, action_support=su, P=P)
