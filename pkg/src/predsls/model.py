"""Networked linear systems, disturbance generation and assumption checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .lqr import RiccatiError, solve_dare
from .topology import Topology, block_mask, chain

__all__ = [
    "ModelError",
    "NetworkedSystem",
    "ValidationReport",
    "DisturbanceSpec",
    "validate",
    "build_graph_system",
    "build_chain_example",
    "error_schedule",
    "generate_disturbances",
    "prediction_error",
    "CHAIN_BUMPS",
]

# deterministic offsets added to every node's disturbance in the chain experiment
CHAIN_BUMPS = {2: 0.08, 4: 0.18}


class ModelError(ValueError):
    """Inconsistent or invalid system data."""


def _as_dims(dims, count) -> np.ndarray:
    if dims is None:
        return np.ones(count, dtype=int)
    dims = np.asarray(dims, dtype=int).reshape(-1)
    if len(dims) != count or np.any(dims < 0):
        raise ModelError(f"expected {count} non-negative block sizes, got {list(dims)}")
    return dims


@dataclass(frozen=True)
class NetworkedSystem:
    """Block-partitioned LTI system ``x_{t+1} = A x_t + B u_t + w_t``.

    ``Q_T`` defaults to the stabilizing DARE solution, which makes the
    finite-horizon problem agree with the infinite-horizon one.
    """

    topology: Topology
    A: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)
    Q: np.ndarray = field(repr=False)
    R: np.ndarray = field(repr=False)
    T: int
    Q_T: Optional[np.ndarray] = field(default=None, repr=False)
    state_dims: Optional[np.ndarray] = field(default=None, repr=False)
    action_dims: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        N = self.topology.node_count
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("state_dims", _as_dims(self.state_dims, N))
        set_("action_dims", _as_dims(self.action_dims, N))
        n, m = int(self.state_dims.sum()), int(self.action_dims.sum())
        for name, shape in (("A", (n, n)), ("B", (n, m)), ("Q", (n, n)), ("R", (m, m))):
            M = np.array(getattr(self, name), dtype=float, ndmin=2)
            if M.shape != shape:
                raise ModelError(f"{name} has shape {M.shape}, expected {shape}")
            M.setflags(write=False)
            set_(name, M)
        for name in ("Q", "R"):
            M = getattr(self, name)
            if not np.allclose(M, M.T, atol=1e-12, rtol=0):
                raise ModelError(f"{name} is not symmetric")
        if int(self.T) < 1:
            raise ModelError("horizon T must be positive")
        set_("T", int(self.T))
        if self.Q_T is None:
            try:
                P = solve_dare(self.A, self.B, self.Q, self.R).P
            except RiccatiError as exc:
                raise ModelError(f"cannot default Q_T to the DARE solution: {exc}") from exc
            QT = P
        else:
            QT = np.array(self.Q_T, dtype=float, ndmin=2)
            if QT.shape != (n, n):
                raise ModelError(f"Q_T has shape {QT.shape}, expected {(n, n)}")
            if not np.allclose(QT, QT.T, atol=1e-10, rtol=0):
                raise ModelError("Q_T is not symmetric")
        QT.setflags(write=False)
        set_("Q_T", QT)
        offsets = np.concatenate([[0], np.cumsum(self.state_dims)])
        a_offsets = np.concatenate([[0], np.cumsum(self.action_dims)])
        set_("_x_off", offsets)
        set_("_u_off", a_offsets)

    @property
    def N(self) -> int:
        return self.topology.node_count

    @property
    def n(self) -> int:
        return int(self.state_dims.sum())

    @property
    def m(self) -> int:
        return int(self.action_dims.sum())

    def state_slice(self, i: int) -> slice:
        return slice(int(self._x_off[i]), int(self._x_off[i + 1]))

    def action_slice(self, i: int) -> slice:
        return slice(int(self._u_off[i]), int(self._u_off[i + 1]))

    def state_index(self, nodes) -> np.ndarray:
        """Coordinate indices of the state blocks of `nodes`, in node order."""
        nodes = np.sort(np.asarray(nodes, dtype=int).reshape(-1))
        parts = [np.arange(self._x_off[j], self._x_off[j + 1]) for j in nodes]
        return np.concatenate(parts).astype(int) if parts else np.zeros(0, dtype=int)

    def action_index(self, nodes) -> np.ndarray:
        nodes = np.sort(np.asarray(nodes, dtype=int).reshape(-1))
        parts = [np.arange(self._u_off[j], self._u_off[j + 1]) for j in nodes]
        return np.concatenate(parts).astype(int) if parts else np.zeros(0, dtype=int)

    def state_owner(self) -> np.ndarray:
        """Node index owning each state coordinate."""
        return np.repeat(np.arange(self.N), self.state_dims)

    def action_owner(self) -> np.ndarray:
        return np.repeat(np.arange(self.N), self.action_dims)

    def with_horizon(self, T: int) -> "NetworkedSystem":
        return NetworkedSystem(self.topology, self.A, self.B, self.Q, self.R, T, self.Q_T,
                               self.state_dims, self.action_dims)


@dataclass(frozen=True)
class ValidationReport:
    structural_ok: bool
    structural_violations: tuple
    weights_ok: bool
    stabilizable: bool
    open_loop_radius: float
    closed_loop_radius: float

    @property
    def ok(self) -> bool:
        return self.structural_ok and self.weights_ok and self.stabilizable

    def summary(self) -> str:
        lines = [
            f"structural sparsity: {'pass' if self.structural_ok else 'FAIL'}",
            f"Q, R positive definite: {'pass' if self.weights_ok else 'FAIL'}",
            f"open-loop spectral radius: {self.open_loop_radius:.6f}",
            f"closed-loop spectral radius (DARE gain): {self.closed_loop_radius:.6f}",
            f"stabilizable: {'pass' if self.stabilizable else 'FAIL'}",
        ]
        lines += [f"  violation: {v}" for v in self.structural_violations]
        return "\n".join(lines)


def spectral_radius(M) -> float:
    M = np.atleast_2d(M)
    if M.size == 0:
        return 0.0
    return float(np.abs(np.linalg.eigvals(M)).max())


def validate(system: NetworkedSystem, tol: float = 1e-10) -> ValidationReport:
    """Check the 1-hop sparsity of (A, B), positivity of (Q, R) and stabilizability."""
    topo = system.topology
    one_hop = topo.dist <= 1
    violations = []
    for name, M, cols in (("A", system.A, system.state_dims), ("B", system.B, system.action_dims)):
        allowed = block_mask(one_hop, system.state_dims, cols)
        bad = np.argwhere((np.abs(M) > 0) & ~allowed)
        owner_r = system.state_owner()
        owner_c = system.state_owner() if name == "A" else system.action_owner()
        pairs = sorted({(int(owner_r[r]) + 1, int(owner_c[c]) + 1) for r, c in bad})
        violations += [f"{name} block ({a},{b}) is nonzero but nodes are {topo.dist[a - 1, b - 1]} hops apart"
                       for a, b in pairs]
    weights_ok = bool(np.linalg.eigvalsh(system.Q).min() > tol and np.linalg.eigvalsh(system.R).min() > tol)
    open_radius = spectral_radius(system.A)
    try:
        sol = solve_dare(system.A, system.B, system.Q, system.R)
        closed = spectral_radius(system.A + system.B @ sol.K)
        stabilizable = closed < 1.0
    except (RiccatiError, np.linalg.LinAlgError):
        closed, stabilizable = float("inf"), False
    return ValidationReport(
        structural_ok=not violations,
        structural_violations=tuple(violations),
        weights_ok=weights_ok,
        stabilizable=stabilizable,
        open_loop_radius=open_radius,
        closed_loop_radius=closed,
    )


def build_graph_system(topology: Topology, T: int = 40, self_weight: float = 1.0,
                       coupling: float = 0.5, Q_T=None) -> NetworkedSystem:
    """Scalar-subsystem system with ``A = B = self_weight*I + coupling*adjacency``, Q = R = I."""
    N = topology.node_count
    A = self_weight * np.eye(N) + coupling * (topology.dist == 1)
    return NetworkedSystem(topology, A, A.copy(), np.eye(N), np.eye(N), T, Q_T)


def build_chain_example(N: int = 16, T: int = 40) -> NetworkedSystem:
    """The 16-node chain experiment: tridiagonal A = B (1 on the diagonal, 0.5 off), Q = R = I."""
    return build_graph_system(chain(N), T=T)


# -- disturbances ---------------------------------------------------------------


@dataclass(frozen=True)
class DisturbanceSpec:
    """Recipe for a disturbance trajectory and its (imperfect) prediction.

    kind:
        ``"gaussian"``  i.i.d. N(0, variance) per coordinate plus `bumps`
        ``"bumps"``     deterministic `bumps` only
        ``"file"``      rows = t, cols = state coordinates, read from `path`
    errors:
        (T, N) array of scheduled prediction-error magnitudes e^i_t, or None.
    bound:
        the W of ``|w^i_t|_inf <= W``; default ``3*sigma + max bump``
        (for ``"file"`` the largest recorded magnitude).
    """

    kind: str = "gaussian"
    variance: float = 0.5
    bumps: Mapping[int, float] = field(default_factory=lambda: dict(CHAIN_BUMPS))
    errors: Optional[np.ndarray] = field(default=None, repr=False)
    bound: Optional[float] = None
    unclipped: bool = False
    path: Optional[str] = None

    @property
    def W(self) -> float:
        if self.bound is not None:
            return float(self.bound)
        bump = max((abs(v) for v in self.bumps.values()), default=0.0)
        sigma = np.sqrt(self.variance) if self.kind == "gaussian" else 0.0
        return float(3.0 * sigma + bump) or 1.0

    def with_errors(self, errors) -> "DisturbanceSpec":
        return DisturbanceSpec(self.kind, self.variance, dict(self.bumps), errors, self.bound,
                               self.unclipped, self.path)


def error_schedule(T: int, N: int, level: float, nodes: Sequence[int] = (0,)) -> np.ndarray:
    """Constant error magnitude `level` on `nodes` (0-based), zero elsewhere."""
    e = np.zeros((T, N))
    e[:, list(nodes)] = level
    return e


def _base_disturbance(system: NetworkedSystem, spec: DisturbanceSpec, rng) -> np.ndarray:
    T, n = system.T, system.n
    if spec.kind == "file":
        w = np.loadtxt(spec.path, delimiter=",", ndmin=2)
        if w.shape != (T, n):
            raise ModelError(f"disturbance file has shape {w.shape}, expected {(T, n)}")
        return w
    w = np.zeros((T, n))
    if spec.kind == "gaussian":
        w += rng.normal(0.0, np.sqrt(spec.variance), size=(T, n))
    elif spec.kind != "bumps":
        raise ModelError(f"unknown disturbance kind {spec.kind!r}")
    for t, v in spec.bumps.items():
        if 0 <= int(t) < T:
            w[int(t)] += v
    return w


def generate_disturbances(system: NetworkedSystem, spec: DisturbanceSpec, seed: int):
    """Draw ``(w, w_hat)``, both of shape (T, n).

    ``w_hat^i_t - w^i_t`` has Euclidean norm exactly ``spec.errors[t, i]`` with
    a random direction.  Unless `spec.unclipped`, ``w`` is clipped into the
    W-box and the error direction is chosen so that ``w_hat`` stays inside it.
    """
    rng = np.random.default_rng(seed)
    T, N = system.T, system.N
    w = _base_disturbance(system, spec, rng)
    # a recorded trajectory without an explicit bound defines its own box
    W = float(np.abs(w).max()) if spec.kind == "file" and spec.bound is None else spec.W
    if not spec.unclipped:
        w = np.clip(w, -W, W)
    w_hat = w.copy()
    if spec.errors is None:
        return w, w_hat
    errors = np.asarray(spec.errors, dtype=float)
    if errors.shape != (T, N):
        raise ModelError(f"error schedule has shape {errors.shape}, expected {(T, N)}")
    if np.any(errors < 0):
        raise ModelError("error magnitudes must be non-negative")
    if not spec.unclipped and np.any(errors > 2 * W):
        raise ModelError(f"error schedule exceeds 2W = {2 * W:g}; predictions cannot stay within the bound")
    for i in range(N):
        sl = system.state_slice(i)
        dim = sl.stop - sl.start
        for t in range(T):
            e = errors[t, i]
            if e == 0.0 or dim == 0:
                continue
            direction = rng.normal(size=dim)
            direction /= np.linalg.norm(direction)
            cand = w[t, sl] + e * direction
            if not spec.unclipped and np.abs(cand).max() > W:
                cand = w[t, sl] - e * direction
                if np.abs(cand).max() > W:
                    raise ModelError(
                        f"cannot place a prediction error of {e:g} at node {i + 1}, t={t} inside the W-box"
                    )
            w_hat[t, sl] = cand
    return w, w_hat


def prediction_error(system: NetworkedSystem, w, w_hat) -> np.ndarray:
    """Per-node cumulative squared error sum_t ||w^i_t - w_hat^i_t||^2."""
    diff = np.asarray(w) - np.asarray(w_hat)
    return np.array([float((diff[:, system.state_slice(i)] ** 2).sum()) for i in range(system.N)])


def load_matrix(path) -> np.ndarray:
    return np.loadtxt(Path(path), delimiter=",", ndmin=2)
