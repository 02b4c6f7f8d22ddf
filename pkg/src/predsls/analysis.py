"""Decay-rate fits, the three-term regret bound and communication-range co-design.

All constants reported here are fitted from synthesized maps or simulated
costs; none of them are the existence constants of the underlying proofs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .control import PredSLSController, make_controller, parse_controller
from .model import DisturbanceSpec, NetworkedSystem, error_schedule
from .sim import estimate_regret
from .synthesis import ClosedLoopMaps, synthesize
from .topology import expansion_bound

log = logging.getLogger(__name__)

__all__ = [
    "FitError",
    "DecayFit",
    "BoundCurve",
    "SweepResult",
    "fit_log_linear",
    "temporal_envelope",
    "fit_temporal_decay",
    "spatial_gaps",
    "fit_spatial_decay",
    "neighborhood_bound",
    "bound_constants",
    "evaluate_regret_bound",
    "cumulative_error_bound",
    "kappa_sweep",
    "empirical_kappa_star",
    "interior_minimum",
    "codesign",
    "FLOOR",
]

# values below this are treated as numerical zero and left out of log fits
FLOOR = 1e-14


class FitError(ValueError):
    """Not enough usable points for a log-linear fit, or a fitted rate outside (0, 1)."""


@dataclass(frozen=True)
class DecayFit:
    """``values[j] ~ constant * rate ** grid[j]`` fitted by least squares in log space."""

    grid: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    r2: float
    used: np.ndarray = field(repr=False)

    @property
    def rate(self) -> float:
        return float(np.exp(self.slope))

    @property
    def constant(self) -> float:
        return float(np.exp(self.intercept))

    @property
    def decaying(self) -> bool:
        return self.slope < 0 and 0 < self.rate < 1

    def summary(self, rate_name="rate", const_name="constant") -> dict:
        return {
            f"fitted_{rate_name}": self.rate,
            f"fitted_{const_name}": self.constant,
            "log_slope": self.slope,
            "r2": self.r2,
            "points_used": int(self.used.sum()),
        }


def fit_log_linear(grid, values, floor: float = FLOOR) -> DecayFit:
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    used = values > floor
    if used.sum() < 2:
        raise FitError(f"only {int(used.sum())} value(s) above {floor:g}; cannot fit a decay")
    x, y = grid[used], np.log(values[used])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(grid=grid, values=values, slope=float(slope), intercept=float(intercept), r2=r2, used=used)


def _stacked_blocks(maps: ClosedLoopMaps, col):
    """Per (t, k) the (rows x 2 n_i) block [[x, xhat], [u, uhat]] of one source column."""
    top = np.concatenate([col.x, col.xhat], axis=3)
    bottom = np.concatenate([col.u, col.uhat], axis=3)
    return np.concatenate([top, bottom], axis=2)


def temporal_envelope(maps: ClosedLoopMaps) -> np.ndarray:
    """E(l) = max over sources and |t - k| = l of the squared block spectral norm, l = 0..T."""
    T = maps.T
    env = np.zeros(T + 1)
    t_idx, k_idx = np.indices((T + 1, T + 1))
    lag = np.abs(t_idx - k_idx)
    for col in maps.columns:
        sq = np.linalg.norm(_stacked_blocks(maps, col), ord=2, axis=(2, 3)) ** 2
        np.maximum.at(env, lag.ravel(), sq.ravel())
    return env


def fit_temporal_decay(maps: ClosedLoopMaps) -> DecayFit:
    env = temporal_envelope(maps)
    if not np.any(env > FLOOR):
        raise FitError("all maps are zero")
    return fit_log_linear(np.arange(len(env)), env)


def _dense_block(system, col, j):
    """Node-j rows of the stacked block, zero where node j is outside the support."""
    xs_full = system.state_index([j])
    us_full = system.action_index([j])
    T1 = col.x.shape[0]
    ni = col.x.shape[3]
    out = np.zeros((T1, T1, len(xs_full) + len(us_full), 2 * ni))
    sx_pos = {c: p for p, c in enumerate(col.state_support)}
    su_pos = {c: p for p, c in enumerate(col.action_support)}
    for r, c in enumerate(xs_full):
        if c in sx_pos:
            out[:, :, r, :ni] = col.x[:, :, sx_pos[c]]
            out[:, :, r, ni:] = col.xhat[:, :, sx_pos[c]]
    for r, c in enumerate(us_full):
        if c in su_pos:
            out[:, :, len(xs_full) + r, :ni] = col.u[:, :, su_pos[c]]
            out[:, :, len(xs_full) + r, ni:] = col.uhat[:, :, su_pos[c]]
    return out


def spatial_gaps(system: NetworkedSystem, kappas: Sequence[int], reference: Optional[ClosedLoopMaps] = None,
                 maps_by_kappa: Optional[dict] = None, jobs: int = 1) -> np.ndarray:
    """G(kappa) = max over (i, j, k) of sum_t ||node-j block of (localized - centralized)||^2."""
    diam = system.topology.diameter
    reference = reference or synthesize(system, diam, jobs=jobs)
    maps_by_kappa = maps_by_kappa or {}
    gaps = np.zeros(len(kappas))
    for g, kappa in enumerate(kappas):
        maps = maps_by_kappa.get(kappa) or synthesize(system, kappa, jobs=jobs)
        worst = 0.0
        for loc, ref in zip(maps.columns, reference.columns):
            for j in range(system.N):
                diff = _dense_block(system, loc, j) - _dense_block(system, ref, j)
                if not diff.size:
                    continue
                per_tk = np.linalg.norm(diff, ord=2, axis=(2, 3)) ** 2
                worst = max(worst, float(per_tk.sum(axis=0).max()))
        gaps[g] = worst
    return gaps


def fit_spatial_decay(system: NetworkedSystem, kappas: Sequence[int], maps_by_kappa: Optional[dict] = None,
                      jobs: int = 1):
    """Fit ``G(kappa) ~ D * theta**kappa``; kappa >= diameter is left out (the gap is zero there).

    Returns ``(fit, gaps)`` with gaps aligned to `kappas`.
    """
    diam = system.topology.diameter
    maps_by_kappa = dict(maps_by_kappa or {})
    if diam not in maps_by_kappa:
        maps_by_kappa[diam] = synthesize(system, diam, jobs=jobs)
    gaps = spatial_gaps(system, kappas, maps_by_kappa[diam], maps_by_kappa, jobs=jobs)
    kept = np.array([k < diam for k in kappas])
    if kept.sum() < 2:
        raise FitError("need at least two kappa values below the diameter")
    fit = fit_log_linear(np.asarray(kappas)[kept], gaps[kept])
    return fit, gaps


# -- regret bound ---------------------------------------------------------------


def neighborhood_bound(system: NetworkedSystem) -> np.ndarray:
    """p(kappa) = (kappa + 1) * max_{1 <= d <= kappa} g(d) for kappa = 0..diam, with p(0) = 1."""
    g = expansion_bound(system.topology)
    diam = len(g) - 1
    p = np.ones(diam + 1)
    for kappa in range(1, diam + 1):
        p[kappa] = (kappa + 1) * g[1 : kappa + 1].max()
    return p


@dataclass(frozen=True)
class BoundConstants:
    C: float
    rho: float
    D: float
    theta: float

    def __post_init__(self):
        for name in ("rho", "theta"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise FitError(f"fitted {name} = {v:g} is not in (0, 1); the bound is undefined")

    @property
    def rho0(self) -> float:
        return max(np.sqrt(self.rho), np.sqrt(self.theta))

    @property
    def C1(self) -> float:
        return (self.C * (1 + self.rho) / (1 - self.rho)) ** 2

    @property
    def C2(self) -> float:
        q = max(self.rho ** 0.25, self.theta ** 0.25)
        return 2 * np.sqrt(self.C * self.D) * (1 + (1 + q) ** 2) / (1 - q) ** 2

    @property
    def C3(self) -> float:
        return (self.C * (2 + self.rho) / (1 - self.rho)) ** 2


def bound_constants(temporal: DecayFit, spatial: DecayFit) -> BoundConstants:
    return BoundConstants(C=temporal.constant, rho=temporal.rate, D=spatial.constant, theta=spatial.rate)


@dataclass(frozen=True)
class BoundCurve:
    kappas: np.ndarray
    values: np.ndarray
    terms: np.ndarray = field(repr=False)  # (3, len) error propagation, sub-optimality, communication
    p: np.ndarray = field(repr=False)
    eps_bar: float = 0.0
    W: float = 1.0
    constants: Optional[BoundConstants] = None

    @property
    def kappa_star(self) -> int:
        return int(self.kappas[int(np.argmin(self.values))])


def evaluate_regret_bound(constants: BoundConstants, p: np.ndarray, eps_bar: float, W: float) -> BoundCurve:
    """Three-term bound on every kappa in 0..diam (p has one entry per kappa)."""
    p = np.asarray(p, dtype=float)
    if np.any(np.diff(p) < 0):
        raise ValueError("p(kappa) must be non-decreasing")
    kappas = np.arange(len(p))
    c = constants
    propagation = p ** 2 * c.C1 * eps_bar
    suboptimality = p ** 2 * c.C2 * W ** 2 * c.rho0 ** kappas
    communication = c.C3 * (p[-1] - p) ** 2 * W ** 2
    terms = np.vstack([propagation, suboptimality, communication])
    return BoundCurve(kappas=kappas, values=terms.sum(axis=0), terms=terms, p=p,
                      eps_bar=float(eps_bar), W=float(W), constants=constants)


def cumulative_error_bound(level: float, T: int) -> float:
    """Worst per-node cumulative squared error for a constant per-step error `level`."""
    return float(T * level ** 2)


# -- sweeps and co-design -------------------------------------------------------


@dataclass(frozen=True)
class SweepResult:
    """Normalized regret per (error level, kappa, seed)."""

    kappas: np.ndarray
    levels: np.ndarray
    seeds: np.ndarray
    normalized: np.ndarray = field(repr=False)  # (levels, kappas, seeds)
    reports: tuple = field(repr=False, default=())

    @property
    def mean(self) -> np.ndarray:
        return self.normalized.mean(axis=2)

    @property
    def std(self) -> np.ndarray:
        return self.normalized.std(axis=2)


def kappa_sweep(system: NetworkedSystem, kappas: Sequence[int], levels: Sequence[float], seeds: Sequence[int],
                base: Optional[DisturbanceSpec] = None, error_nodes=(0,), controller: str = "predsls",
                x0=None, jobs: int = 1, maps_by_kappa: Optional[dict] = None) -> SweepResult:
    """Mean normalized regret of `controller` (predsls, tc or ptc) over a (level, kappa) grid.

    Prediction errors of constant magnitude `level` hit `error_nodes` only.
    The same seeds are used in every cell, so cells can be compared pairwise.
    """
    base = base or DisturbanceSpec()
    maps_by_kappa = dict(maps_by_kappa or {})
    optimum = make_controller(system, "opt")
    norm = np.zeros((len(levels), len(kappas), len(seeds)))
    reports = []
    for b, kappa in enumerate(kappas):
        if controller == "predsls":
            if kappa not in maps_by_kappa:
                maps_by_kappa[kappa] = synthesize(system, kappa, jobs=jobs)
            ctrl = PredSLSController(maps_by_kappa[kappa])
        else:
            ctrl = make_controller(system, parse_controller(f"{controller}:k={kappa}"))
        for a, level in enumerate(levels):
            spec = base.with_errors(error_schedule(system.T, system.N, level, error_nodes))
            rep = estimate_regret(system, ctrl, spec, list(seeds), x0=x0, error_level=level, optimum=optimum)
            norm[a, b] = rep.normalized
            reports.append(rep)
    return SweepResult(np.asarray(kappas), np.asarray(levels, dtype=float), np.asarray(seeds), norm, tuple(reports))


def empirical_kappa_star(kappas, means, rtol: float = 1e-9) -> int:
    """Smallest kappa whose mean regret is within `rtol` (relative) of the minimum."""
    means = np.asarray(means)
    best = means.min()
    ok = np.flatnonzero(means <= best + rtol * max(abs(best), 1e-300))
    return int(np.asarray(kappas)[ok[0]])


def interior_minimum(sweep: SweepResult, level_index: int) -> tuple[bool, int, float, float]:
    """Is the regret curve minimized strictly inside the kappa grid, significantly?

    Returns ``(interior, kappa_star, rise, stderr)``: the minimizer must lie
    strictly between the grid ends and the regret at the largest kappa must
    exceed it by more than one standard error of the paired per-seed
    difference, so that a flat plateau does not count as a minimum.
    """
    means = sweep.mean[level_index]
    kappas = sweep.kappas
    b = int(np.argmin(means))
    k_star = int(kappas[b])
    diff = sweep.normalized[level_index, -1] - sweep.normalized[level_index, b]
    rise = float(diff.mean())
    stderr = float(diff.std(ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0
    interior = 0 < b < len(kappas) - 1 and rise > stderr
    return interior, k_star, rise, stderr


def codesign(system: NetworkedSystem, sweep: SweepResult, constants: BoundConstants, W: float,
             tolerance: int = 2) -> list[dict]:
    """Compare the empirical and the bound-minimizing kappa for each swept error level."""
    p = neighborhood_bound(system)
    rows = []
    for a, level in enumerate(sweep.levels):
        curve = evaluate_regret_bound(constants, p, cumulative_error_bound(level, system.T), W)
        in_grid = np.isin(curve.kappas, sweep.kappas)
        bound_star = int(curve.kappas[in_grid][np.argmin(curve.values[in_grid])])
        emp_star = empirical_kappa_star(sweep.kappas, sweep.mean[a])
        rows.append({
            "error_level": float(level),
            "empirical_kappa_star": emp_star,
            "bound_kappa_star": bound_star,
            "agree": abs(bound_star - emp_star) <= tolerance,
            "curve": curve,
        })
    return rows
