"""Closed-loop rollouts, costs and Monte-Carlo regret estimates."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .control import Controller, ControllerKind, make_controller
from .model import DisturbanceSpec, NetworkedSystem, generate_disturbances

__all__ = [
    "SimulationError",
    "Trajectory",
    "RegretSample",
    "RegretReport",
    "rollout",
    "optimal_cost",
    "estimate_regret",
    "write_regret_csv",
    "REGRET_FIELDS",
]


class SimulationError(RuntimeError):
    def __init__(self, message: str, t: int):
        super().__init__(f"t={t}: {message}")
        self.t = t


@dataclass(frozen=True)
class Trajectory:
    x: np.ndarray  # (T+1, n)
    u: np.ndarray  # (T, m)
    w: np.ndarray  # (T, n)
    w_hat: np.ndarray  # (T, n)
    stage_costs: np.ndarray  # (T+1,), last entry is the terminal cost
    J: float

    def replay(self, system: NetworkedSystem) -> np.ndarray:
        """States re-simulated from x_0 with the recorded actions and disturbances."""
        x = np.zeros_like(self.x)
        x[0] = self.x[0]
        for t in range(system.T):
            x[t + 1] = system.A @ x[t] + system.B @ self.u[t] + self.w[t]
        return x

    def replay_residual(self, system: NetworkedSystem) -> float:
        return float(np.abs(self.replay(system) - self.x).max())

    def recompute_cost(self, system: NetworkedSystem) -> float:
        return trajectory_cost(system, self.x, self.u)[1]


def trajectory_cost(system: NetworkedSystem, x, u):
    stage = np.empty(system.T + 1)
    stage[:-1] = (np.einsum("ti,ij,tj->t", x[:-1], system.Q, x[:-1])
                  + np.einsum("ti,ij,tj->t", u, system.R, u))
    stage[-1] = x[-1] @ system.Q_T @ x[-1]
    return stage, float(stage.sum())


def rollout(system: NetworkedSystem, controller: Controller, w, w_hat, x0=None) -> Trajectory:
    """Run one episode of ``x_{t+1} = A x_t + B u_t + w_t``."""
    T, n = system.T, system.n
    w = np.asarray(w, dtype=float)
    w_hat = np.asarray(w_hat, dtype=float)
    if w.shape != (T, n) or w_hat.shape != (T, n):
        raise ValueError(f"disturbance arrays must have shape {(T, n)}")
    x = np.zeros((T + 1, n))
    if x0 is not None:
        x[0] = x0
    u = np.zeros((T, system.m))
    controller.start(w_hat, x[0].copy())
    for t in range(T):
        try:
            u[t] = controller.act(t, x[t].copy())
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            raise SimulationError(str(exc), t) from exc
        x[t + 1] = system.A @ x[t] + system.B @ u[t] + w[t]
    stage, J = trajectory_cost(system, x, u)
    return Trajectory(x=x, u=u, w=w, w_hat=w_hat, stage_costs=stage, J=J)


def optimal_cost(system: NetworkedSystem, w, x0=None, controller: Optional[Controller] = None) -> float:
    """Clairvoyant optimum: the centralized controller fed the true disturbances."""
    controller = controller or make_controller(system, "opt")
    return rollout(system, controller, w, w, x0).J


@dataclass(frozen=True)
class RegretSample:
    seed: int
    J: float
    J_star: float

    @property
    def gap(self) -> float:
        return self.J - self.J_star

    @property
    def normalized(self) -> float:
        return self.gap / self.J_star if self.J_star > 0 else float("nan")


@dataclass(frozen=True)
class RegretReport:
    """Empirical dynamic regret: the max over sampled episodes, not the true supremum."""

    controller: str
    kappa: Optional[int]
    error_level: float
    samples: tuple = field(repr=False)

    @property
    def gaps(self) -> np.ndarray:
        return np.array([s.gap for s in self.samples])

    @property
    def normalized(self) -> np.ndarray:
        return np.array([s.normalized for s in self.samples])

    @property
    def empirical_max_gap(self) -> float:
        return float(self.gaps.max())

    @property
    def mean_normalized(self) -> float:
        return float(self.normalized.mean())

    @property
    def std_normalized(self) -> float:
        return float(self.normalized.std())


def estimate_regret(system: NetworkedSystem, controller, spec: DisturbanceSpec, seeds: Sequence[int],
                    x0=None, error_level: float = 0.0, optimum: Optional[Controller] = None) -> RegretReport:
    """Per-seed cost gap against the clairvoyant optimum on the same disturbance draw."""
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    if isinstance(controller, (str, ControllerKind)):
        controller = make_controller(system, controller)
    optimum = optimum or make_controller(system, "opt")
    samples = []
    for seed in seeds:
        w, w_hat = generate_disturbances(system, spec, int(seed))
        feed = w if controller.kind.sees_true_disturbance else w_hat
        J = rollout(system, controller, w, feed, x0).J
        J_star = rollout(system, optimum, w, w, x0).J
        samples.append(RegretSample(int(seed), J, J_star))
    return RegretReport(controller.kind.label, controller.kind.kappa, float(error_level), tuple(samples))


REGRET_FIELDS = ("seed", "controller", "kappa", "error_level", "J", "J_star", "normalized_regret")


def write_regret_csv(path, reports: Iterable[RegretReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(REGRET_FIELDS)
        for rep in reports:
            for s in rep.samples:
                out.writerow([s.seed, rep.controller, "" if rep.kappa is None else rep.kappa,
                              f"{rep.error_level:.17g}", f"{s.J:.17g}", f"{s.J_star:.17g}",
                              f"{s.normalized:.17g}"])
