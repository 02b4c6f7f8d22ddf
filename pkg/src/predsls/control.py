"""Controller runtimes.

Every controller follows the same two-call protocol used by the simulator:
``start(w_hat, x0)`` hands over the prediction trajectory (shape (T, n))
before the episode, then ``act(t, x_t)`` returns ``u_t``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .lqr import solve_dare
from .model import NetworkedSystem
from .synthesis import ClosedLoopMaps, synthesize
from .topology import block_mask

__all__ = [
    "CommunicationError",
    "ControllerKind",
    "parse_controller",
    "Controller",
    "PredSLSController",
    "PerAgentPredSLSController",
    "CentralizedController",
    "TruncatedController",
    "make_controller",
]


class CommunicationError(RuntimeError):
    """An agent tried to read data it is not allowed to receive."""


@dataclass(frozen=True)
class ControllerKind:
    """Controller selector: tag in {predsls, cc, tc, ptc, opt} plus kappa where relevant."""

    tag: str
    kappa: Optional[int] = None
    per_agent: bool = False

    @property
    def label(self) -> str:
        if self.kappa is None:
            return self.tag.upper() if self.tag != "predsls" else "PredSLS"
        name = "PredSLS" if self.tag == "predsls" else self.tag.upper()
        return f"{name}(k={self.kappa})"

    @property
    def sees_true_disturbance(self) -> bool:
        return self.tag == "opt"


_KIND_RE = re.compile(r"^(predsls|cc|tc|ptc|opt)(?::(.*))?$")


def parse_controller(text: str) -> ControllerKind:
    """Parse ``predsls:k=2``, ``cc``, ``tc:k=2``, ``ptc:k=2``, ``opt``.

    ``predsls:k=2,agent`` selects the per-agent runtime.
    """
    m = _KIND_RE.match(text.strip().lower())
    if not m:
        raise ValueError(f"unknown controller {text!r}")
    tag, args = m.group(1), m.group(2)
    kappa, per_agent = None, False
    for part in filter(None, (args or "").split(",")):
        key, _, val = part.partition("=")
        key = key.strip()
        if key in ("k", "kappa"):
            kappa = int(val)
        elif key == "agent" and not val:
            per_agent = True
        else:
            raise ValueError(f"bad controller option {part!r} in {text!r}")
    if tag in ("predsls", "tc", "ptc") and kappa is None:
        raise ValueError(f"controller {tag!r} needs k=<kappa>")
    if tag in ("cc", "opt") and kappa is not None:
        raise ValueError(f"controller {tag!r} takes no kappa")
    if kappa is not None and kappa < 0:
        raise ValueError("kappa must be non-negative")
    if per_agent and tag != "predsls":
        raise ValueError("the per-agent runtime exists only for predsls")
    return ControllerKind(tag, kappa, per_agent)


class Controller:
    kind: ControllerKind

    def start(self, w_hat: np.ndarray, x0: np.ndarray) -> None:
        raise NotImplementedError

    def act(self, t: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _shifted_predictions(w_hat: np.ndarray, n: int) -> np.ndarray:
    """Stack ``w_hat_{k-1}`` for k = 0..T, with ``w_hat_{-1} = 0``."""
    return np.vstack([np.zeros((1, n)), w_hat])


def _check_predictions(system, w_hat):
    w_hat = np.asarray(w_hat, dtype=float)
    if w_hat.shape != (system.T, system.n):
        raise ValueError(f"predictions have shape {w_hat.shape}, expected {(system.T, system.n)}")
    return w_hat


class PredSLSController(Controller):
    """Realization of the synthesized maps with internal disturbance estimates.

    ``w_tilde`` is driven by the measured states and ``w_bar`` by the state
    trajectory the predictions alone would produce.  Their difference at
    step t equals the true disturbance ``w_{t-1}``, which feeds the causal
    action kernels.
    """

    def __init__(self, maps: ClosedLoopMaps):
        self.maps = maps
        self.system = maps.system
        self.kind = ControllerKind("predsls", maps.kappa)
        self.X = maps.assemble("x")
        self.Xh = maps.assemble("xhat")
        self.U = maps.assemble("u")
        self.Uh = maps.assemble("uhat")

    def start(self, w_hat, x0):
        sys_ = self.system
        w_hat = _check_predictions(sys_, w_hat)
        W = _shifted_predictions(w_hat, sys_.n)
        self.x_hat = np.einsum("tkab,kb->ta", self.Xh, W)
        self.u_hat = np.einsum("tkab,kb->ta", self.Uh, W)
        self.w_tilde = np.zeros((sys_.T + 1, sys_.n))
        self.w_bar = np.zeros((sys_.T + 1, sys_.n))

    def act(self, t, x):
        X = self.X[t, :t]
        self.w_tilde[t] = x - np.einsum("kab,kb->a", X, self.w_tilde[:t])
        self.w_bar[t] = self.x_hat[t] - np.einsum("kab,kb->a", X, self.w_bar[:t])
        diff = self.w_tilde[: t + 1] - self.w_bar[: t + 1]
        return np.einsum("kab,kb->a", self.U[t, : t + 1], diff) + self.u_hat[t]


class _Mailbox:
    """Per-step message store enforcing hop-distance limits on reads."""

    def __init__(self, system: NetworkedSystem, radius: int):
        self.dist = system.topology.dist
        self.radius = radius
        self.posts = {}

    def post(self, sender: int, key, value):
        self.posts[(sender, key)] = value

    def read(self, reader: int, sender: int, key, radius: Optional[int] = None):
        limit = self.radius if radius is None else radius
        if self.dist[reader, sender] > limit:
            raise CommunicationError(
                f"agent {reader + 1} may not read {key!r} from agent {sender + 1} "
                f"({self.dist[reader, sender]} hops > {limit})"
            )
        try:
            return self.posts[(sender, key)]
        except KeyError:
            raise CommunicationError(f"agent {reader + 1}: {key!r} from agent {sender + 1} not received") from None


class PerAgentPredSLSController(PredSLSController):
    """Same control law evaluated agent by agent from messages only.

    Agent i keeps its own ``w_tilde``/``w_bar`` and receives those of
    neighbours: within kappa hops for the state recursions, within kappa+1
    hops for the action sum, since action kernels reach one hop further.
    """

    def __init__(self, maps: ClosedLoopMaps):
        super().__init__(maps)
        self.kind = ControllerKind("predsls", maps.kappa, per_agent=True)
        sys_ = self.system
        dist = sys_.topology.dist
        kap = maps.kappa
        self.state_nb = [np.flatnonzero(dist[i] <= kap) for i in range(sys_.N)]
        self.action_nb = [np.flatnonzero(dist[i] <= kap + 1) for i in range(sys_.N)]
        self.xs = [sys_.state_slice(i) for i in range(sys_.N)]
        self.us = [sys_.action_slice(i) for i in range(sys_.N)]

    def start(self, w_hat, x0):
        sys_ = self.system
        w_hat = _check_predictions(sys_, w_hat)
        W = _shifted_predictions(w_hat, sys_.n)
        self.mail = _Mailbox(sys_, self.maps.kappa + 1)
        for j in range(sys_.N):
            self.mail.post(j, "w_hat", W[:, self.xs[j]])
        self.local_x_hat, self.local_u_hat = [], []
        for i in range(sys_.N):
            xh = sum(np.einsum("tkab,kb->ta", self.Xh[:, :, self.xs[i], self.xs[j]],
                               self.mail.read(i, j, "w_hat", self.maps.kappa))
                     for j in self.state_nb[i])
            uh = sum(np.einsum("tkab,kb->ta", self.Uh[:, :, self.us[i], self.xs[j]],
                               self.mail.read(i, j, "w_hat"))
                     for j in self.action_nb[i])
            self.local_x_hat.append(xh)
            self.local_u_hat.append(uh)
        self.w_tilde = np.zeros((sys_.T + 1, sys_.n))
        self.w_bar = np.zeros((sys_.T + 1, sys_.n))

    def act(self, t, x):
        sys_ = self.system
        kap = self.maps.kappa
        # phase 1: internal signals from neighbours' past messages
        for i in range(sys_.N):
            xi = x[self.xs[i]]
            wt, wb = xi.copy(), self.local_x_hat[i][t].copy()
            for j in self.state_nb[i]:
                if t == 0:
                    continue
                past_t = self.mail.read(i, j, ("w_tilde", t - 1), kap)
                past_b = self.mail.read(i, j, ("w_bar", t - 1), kap)
                Xij = self.X[t, :t][:, self.xs[i], self.xs[j]]
                wt -= np.einsum("kab,kb->a", Xij, past_t)
                wb -= np.einsum("kab,kb->a", Xij, past_b)
            self.w_tilde[t, self.xs[i]] = wt
            self.w_bar[t, self.xs[i]] = wb
        for i in range(sys_.N):
            self.mail.post(i, ("w_tilde", t), self.w_tilde[: t + 1, self.xs[i]].copy())
            self.mail.post(i, ("w_bar", t), self.w_bar[: t + 1, self.xs[i]].copy())
        # phase 2: actions
        u = np.zeros(sys_.m)
        for i in range(sys_.N):
            ui = self.local_u_hat[i][t].copy()
            for j in self.action_nb[i]:
                diff = self.mail.read(i, j, ("w_tilde", t)) - self.mail.read(i, j, ("w_bar", t))
                ui += np.einsum("kab,kb->a", self.U[t, : t + 1][:, self.us[i], self.xs[j]], diff)
            u[self.us[i]] = ui
        return u


class CentralizedController(Controller):
    """``u_t = K x_t + sum_tau L_tau w_hat_{t+tau}`` with infinite-horizon gains.

    With a `mask` (coordinate-level boolean, m x n) both K and every L_tau
    are truncated to it; `use_predictions=False` drops the preview sum.
    """

    def __init__(self, system: NetworkedSystem, kind: ControllerKind, mask=None, use_predictions=True):
        self.system = system
        self.kind = kind
        sol = solve_dare(system.A, system.B, system.Q, system.R, horizon=system.T)
        self.K = sol.K if mask is None else np.where(mask, sol.K, 0.0)
        self.L = sol.L if mask is None else np.where(mask, sol.L, 0.0)
        self.use_predictions = use_predictions

    def start(self, w_hat, x0):
        sys_ = self.system
        self.w_hat = _check_predictions(sys_, w_hat)
        T = sys_.T
        self.feedforward = np.zeros((T, sys_.m))
        if self.use_predictions:
            for t in range(T):
                self.feedforward[t] = np.einsum("tab,tb->a", self.L[: T - t], self.w_hat[t:])

    def act(self, t, x):
        return self.K @ x + self.feedforward[t]


class TruncatedController(CentralizedController):
    """Centralized gains truncated to kappa hops; TC ignores predictions, PTC keeps them."""

    def __init__(self, system: NetworkedSystem, kind: ControllerKind):
        node_mask = system.topology.dist <= kind.kappa
        mask = block_mask(node_mask, system.action_dims, system.state_dims)
        super().__init__(system, kind, mask=mask, use_predictions=kind.tag == "ptc")


def make_controller(system: NetworkedSystem, kind, maps: Optional[ClosedLoopMaps] = None,
                    jobs: int = 1) -> Controller:
    """Build a controller; `maps` is reused for PredSLS when its kappa matches."""
    if isinstance(kind, str):
        kind = parse_controller(kind)
    if kind.tag == "predsls":
        if maps is None or maps.kappa != kind.kappa:
            maps = synthesize(system, kind.kappa, jobs=jobs)
        return PerAgentPredSLSController(maps) if kind.per_agent else PredSLSController(maps)
    if kind.tag in ("cc", "opt"):
        return CentralizedController(system, kind)
    return TruncatedController(system, kind)
