"""Command-line front end.

One YAML config drives every subcommand; flags given on the command line
override the matching config keys.  Exit codes: 0 success, 2 bad
configuration or failed validation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import analysis, control, model, sim, synthesis, topology
from .lqr import LocalizabilityError, RiccatiError

log = logging.getLogger("predsls")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "system": {"preset": "chain16", "T": 40, "self_weight": 1.0, "coupling": 0.5},
    "kappa": 2,
    "kappas": [0, 1, 2, 3, 4, 5, 6],
    "controllers": ["predsls:k=2", "ptc:k=2", "tc:k=2", "cc"],
    "disturbance": {"kind": "gaussian", "variance": 0.5, "bumps": {2: 0.08, 4: 0.18},
                    "bound": None, "unclipped": False, "path": None},
    "error_levels": [0.0],
    "error_nodes": [1],
    "seeds": 100,
    "x0": None,
    "output": "out",
    "jobs": 1,
    "reduced": False,
    "dump_gains": False,
    "fir_horizon": None,
}


class ConfigError(ValueError):
    pass


# -- configuration --------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, data)
    _resolve_paths(cfg, path.parent)
    return cfg


def _resolve_paths(cfg: dict, base: Path) -> None:
    """Make file references relative to the config file's directory."""
    def fix(section, key):
        val = section.get(key)
        if isinstance(val, str) and not Path(val).is_absolute() and (base / val).exists():
            section[key] = str(base / val)

    for key in ("A", "B", "Q", "R", "Q_T", "topology", "preset"):
        fix(cfg["system"], key)
    fix(cfg["disturbance"], "path")


def apply_overrides(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    if args.preset is not None:
        cfg["system"]["preset"] = args.preset
    if args.T is not None:
        cfg["system"]["T"] = args.T
    if args.kappa is not None:
        cfg["kappa"] = args.kappa
    if args.kappas is not None:
        cfg["kappas"] = args.kappas
    if args.controller:
        cfg["controllers"] = args.controller
    if args.error_levels is not None:
        cfg["error_levels"] = args.error_levels
    if args.seeds is not None:
        cfg["seeds"] = args.seeds
    if args.output is not None:
        cfg["output"] = args.output
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    if args.unclipped:
        cfg["disturbance"]["unclipped"] = True
    if args.dump_gains:
        cfg["dump_gains"] = True
    if args.reduced:
        cfg["reduced"] = True
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the settings that determine results (output location and worker count excluded)."""
    relevant = {k: v for k, v in cfg.items() if k not in ("output", "jobs")}
    blob = json.dumps(relevant, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _read_matrix(path, what):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} file {p} does not exist")
    return model.load_matrix(p)


def build_system(cfg: dict) -> model.NetworkedSystem:
    sc = cfg["system"]
    T = int(sc.get("T", 40))
    if T < 1:
        raise ConfigError("T must be at least 1")
    if cfg.get("fir_horizon") not in (None, T):
        raise ConfigError("only the full FIR horizon (fir_horizon = T) is supported")
    preset = str(sc.get("preset") or "")
    if preset in ("chain16", "chain-16"):
        return model.build_chain_example(T=T)
    topo_spec = sc.get("topology") or preset
    if not topo_spec:
        raise ConfigError("system needs a preset or a topology")
    try:
        topo = topology.from_spec(topo_spec)
    except FileNotFoundError as exc:
        raise ConfigError(f"topology file not found: {exc.filename}") from exc
    if "A" in sc:
        mats = {k: _read_matrix(sc[k], k) for k in ("A", "B", "Q", "R") if k in sc}
        if set(mats) != {"A", "B", "Q", "R"}:
            raise ConfigError("matrix input needs A, B, Q and R files")
        QT = _read_matrix(sc["Q_T"], "Q_T") if sc.get("Q_T") else None
        return model.NetworkedSystem(topo, mats["A"], mats["B"], mats["Q"], mats["R"], T, QT,
                                     sc.get("state_dims"), sc.get("action_dims"))
    return model.build_graph_system(topo, T, sc.get("self_weight", 1.0), sc.get("coupling", 0.5))


def disturbance_spec(cfg: dict) -> model.DisturbanceSpec:
    d = cfg["disturbance"]
    if d.get("kind") == "file" and not (d.get("path") and Path(d["path"]).exists()):
        raise ConfigError("disturbance kind 'file' needs an existing path")
    return model.DisturbanceSpec(kind=d.get("kind", "gaussian"), variance=float(d.get("variance", 0.5)),
                                 bumps={int(k): float(v) for k, v in (d.get("bumps") or {}).items()},
                                 bound=d.get("bound"), unclipped=bool(d.get("unclipped")), path=d.get("path"))


def seed_list(cfg: dict) -> list[int]:
    s = cfg["seeds"]
    seeds = list(range(int(s))) if isinstance(s, int) else [int(v) for v in s]
    if not seeds:
        raise ConfigError("need at least one seed")
    return seeds


def clamp_kappa(system, kappa: int) -> int:
    if kappa < 0:
        raise ConfigError("kappa must be non-negative")
    diam = system.topology.diameter
    if kappa > diam:
        log.warning("kappa=%d exceeds the graph diameter; clamped to %d", kappa, diam)
        return diam
    return int(kappa)


def initial_state(cfg: dict, system) -> np.ndarray | None:
    x0 = cfg.get("x0")
    if x0 is None:
        return None
    if x0 == "uniform":
        return np.full(system.n, 1.0 / np.sqrt(system.n))
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.n,):
        raise ConfigError(f"x0 must have {system.n} entries")
    return x0


def error_nodes(cfg, system):
    nodes = [int(v) - 1 for v in cfg.get("error_nodes", [1])]
    if any(not 0 <= v < system.N for v in nodes):
        raise ConfigError("error_nodes out of range (labels are 1-based)")
    return nodes


# -- output helpers -------------------------------------------------------------


def prepare_output(cfg: dict) -> Path:
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    return out


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for row in rows:
            out.writerow([_fmt(v) for v in row])


def save_svg(fig, path: Path, cfg: dict) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    text = buf.getvalue()
    marker = f"<!-- config sha256 {config_hash(cfg)} -->\n"
    head, sep, rest = text.partition("?>\n")
    path.write_text(head + sep + marker + rest if sep else marker + text, encoding="utf-8")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "predsls"
    import matplotlib.pyplot as plt

    return plt


# -- commands -------------------------------------------------------------------


def cmd_synthesize(cfg: dict) -> int:
    system = build_system(cfg)
    kappa = clamp_kappa(system, int(cfg["kappa"]))
    out = prepare_output(cfg)
    t0 = time.perf_counter()
    maps = synthesis.synthesize(system, kappa, reduced=bool(cfg["reduced"]), jobs=int(cfg["jobs"]))
    elapsed = time.perf_counter() - t0
    rows = []
    for col in maps.columns:
        for kind in synthesis.KINDS:
            K = col.kernel(kind)
            support = col.support(kind)
            t_i, k_i, r_i, c_i = np.nonzero(K)
            src = system.state_slice(col.node).start
            for t, k, r, c in zip(t_i, k_i, r_i, c_i):
                rows.append((src + c + 1, support[r] + 1, t, k, kind, K[t, k, r, c]))
    write_csv(out / "clm.csv", ("i", "j", "t", "k", "kind", "value"), rows)
    res = synthesis.dynamics_residual(maps)
    lines = [f"kappa {kappa}", f"synthesis_seconds {elapsed:.3f}"]
    lines += [f"residual_{key} {val:.3e}" for key, val in res.items()]
    detail = []
    for col in maps.columns:
        r = synthesis.column_residual(system, col)
        detail.append(f"node {col.node + 1} " + " ".join(f"{key}={val:.3e}" for key, val in r.items()))
    (out / "synthesis.log").write_text("\n".join(lines + detail) + "\n")
    if cfg["dump_gains"]:
        dump_gains(system, kappa, out, bool(cfg["reduced"]))
    print("\n".join(lines))
    return EXIT_OK


def dump_gains(system, kappa: int, out: Path, reduced: bool) -> None:
    from .lqr import locality_constrained_gains

    for i in range(system.N):
        g = synthesis.reduced_gains(system, i, kappa) if reduced else locality_constrained_gains(system, i, kappa)
        rows = []
        for t in range(system.T):
            for r, c in zip(*np.nonzero(g.kbar[t])):
                rows.append(("K", t, "", r + 1, c + 1, g.kbar[t, r, c]))
            for tau in range(system.T - t):
                for r, c in zip(*np.nonzero(g.mbar[t, tau])):
                    rows.append(("M", t, tau, r + 1, c + 1, g.mbar[t, tau, r, c]))
        write_csv(out / f"gains_node{i + 1}.csv", ("gain", "t", "tau", "row", "col", "value"), rows)


def _controllers(cfg, system):
    kinds = []
    for text in cfg["controllers"] or []:
        kind = control.parse_controller(text)
        if kind.kappa is not None:
            kind = control.ControllerKind(kind.tag, clamp_kappa(system, kind.kappa), kind.per_agent)
        kinds.append(kind)
    if not kinds:
        raise ConfigError("the controller list is empty")
    return kinds


def cmd_simulate(cfg: dict) -> int:
    system = build_system(cfg)
    kinds = _controllers(cfg, system)
    out = prepare_output(cfg)
    seed = seed_list(cfg)[0]
    level = float(cfg["error_levels"][0])
    spec = disturbance_spec(cfg).with_errors(
        model.error_schedule(system.T, system.N, level, error_nodes(cfg, system)))
    w, w_hat = model.generate_disturbances(system, spec, seed)
    x0 = initial_state(cfg, system)
    for kind in kinds:
        ctrl = control.make_controller(system, kind, jobs=int(cfg["jobs"]))
        tr = sim.rollout(system, ctrl, w, w if kind.sees_true_disturbance else w_hat, x0)
        header = ["t"] + [f"x{j + 1}" for j in range(system.n)] + [f"u{j + 1}" for j in range(system.m)] + ["stage_cost"]
        rows = []
        for t in range(system.T + 1):
            u = tr.u[t] if t < system.T else np.full(system.m, np.nan)
            rows.append([t, *tr.x[t], *u, tr.stage_costs[t]])
        name = kind.label.replace("(", "_").replace(")", "").replace("=", "")
        write_csv(out / f"trajectory_{name}.csv", header, rows)
        print(f"{kind.label}: J = {tr.J:.6f}")
    return EXIT_OK


def cmd_compare(cfg: dict) -> int:
    system = build_system(cfg)
    kinds = _controllers(cfg, system)
    out = prepare_output(cfg)
    seeds = seed_list(cfg)
    x0 = initial_state(cfg, system)
    nodes = error_nodes(cfg, system)
    optimum = control.make_controller(system, "opt")
    reports = []
    for level in cfg["error_levels"]:
        spec = disturbance_spec(cfg).with_errors(model.error_schedule(system.T, system.N, float(level), nodes))
        for kind in kinds:
            ctrl = control.make_controller(system, kind, jobs=int(cfg["jobs"]))
            reports.append(sim.estimate_regret(system, ctrl, spec, seeds, x0, float(level), optimum))
    sim.write_regret_csv(out / "regret.csv", reports)
    summary = [(r.controller, "" if r.kappa is None else r.kappa, r.error_level, r.mean_normalized,
                r.std_normalized, r.empirical_max_gap) for r in reports]
    write_csv(out / "summary.csv", ("controller", "kappa", "error_level", "mean_normalized_regret",
                                     "std_normalized_regret", "empirical_max_gap"), summary)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"{r.controller}\ne={r.error_level:g}" for r in reports]
    ax.bar(range(len(reports)), [r.mean_normalized for r in reports],
           yerr=[r.std_normalized for r in reports], capsize=3)
    ax.set_xticks(range(len(reports)), labels, fontsize=7)
    ax.set_ylabel("normalized regret")
    fig.tight_layout()
    save_svg(fig, out / "compare.svg", cfg)
    plt.close(fig)
    for row in summary:
        print(f"{row[0]:>16s} e={row[2]:<5g} mean {row[3]:.6g} std {row[4]:.3g}")
    return EXIT_OK


def cmd_decay(cfg: dict) -> int:
    system = build_system(cfg)
    kappa = clamp_kappa(system, int(cfg["kappa"]))
    diam = system.topology.diameter
    out = prepare_output(cfg)
    jobs = int(cfg["jobs"])
    kappas = sorted({clamp_kappa(system, int(k)) for k in cfg["kappas"]})
    maps_by_kappa = {k: synthesis.synthesize(system, k, jobs=jobs) for k in set(kappas) | {kappa, diam}}
    maps = maps_by_kappa[kappa]
    plt = _pyplot()
    fig, axes = plt.subplots(2, 2, figsize=(8, 7))
    for ax, kind in zip(axes.ravel(), synthesis.KINDS):
        grid = maps.block_norms(kind)
        write_csv(out / f"heatmap_{kind}.csv", ["t\\k"] + list(range(system.T + 1)),
                  [[t, *grid[t]] for t in range(system.T + 1)])
        im = ax.imshow(grid, origin="upper", cmap="viridis")
        ax.set_title(kind)
        ax.set_xlabel("k")
        ax.set_ylabel("t")
        fig.colorbar(im, ax=ax)
    fig.tight_layout()
    save_svg(fig, out / "heatmaps.svg", cfg)
    plt.close(fig)

    temporal = analysis.fit_temporal_decay(maps)
    report = {"kappa": kappa, "temporal": temporal.summary("rho", "C"),
              "temporal_envelope": temporal.values.tolist()}
    below = [k for k in kappas if k < diam]
    if len(below) >= 2:
        spatial, gaps = analysis.fit_spatial_decay(system, below, maps_by_kappa, jobs)
        report["spatial"] = spatial.summary("theta", "D")
        report["spatial_gaps"] = dict(zip(map(int, below), gaps.tolist()))
        write_csv(out / "spatial_gaps.csv", ("kappa", "gap"), zip(below, gaps))
    (out / "decay_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in report.items() if k in ("temporal", "spatial")}, indent=2))
    return EXIT_OK


def _sweep(cfg, system):
    kappas = sorted({clamp_kappa(system, int(k)) for k in cfg["kappas"]})
    return analysis.kappa_sweep(system, kappas, [float(v) for v in cfg["error_levels"]], seed_list(cfg),
                                base=disturbance_spec(cfg), error_nodes=error_nodes(cfg, system),
                                x0=initial_state(cfg, system), jobs=int(cfg["jobs"]))


def _write_sweep(out, sweep):
    rows = []
    for a, level in enumerate(sweep.levels):
        for b, kappa in enumerate(sweep.kappas):
            rows.append((level, int(kappa), sweep.mean[a, b], sweep.std[a, b]))
    write_csv(out / "sweep.csv", ("error_level", "kappa", "mean_normalized_regret", "std_normalized_regret"), rows)
    sim.write_regret_csv(out / "regret.csv", sweep.reports)


def cmd_sweep(cfg: dict) -> int:
    system = build_system(cfg)
    out = prepare_output(cfg)
    sweep = _sweep(cfg, system)
    _write_sweep(out, sweep)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for a, level in enumerate(sweep.levels):
        ax.errorbar(sweep.kappas, sweep.mean[a], yerr=sweep.std[a], label=f"error {level:g}", capsize=2)
    ax.set_yscale("log")
    ax.set_xlabel("kappa")
    ax.set_ylabel("normalized regret")
    ax.legend()
    fig.tight_layout()
    save_svg(fig, out / "sweep.svg", cfg)
    plt.close(fig)
    for a, level in enumerate(sweep.levels):
        print(f"error {level:g}: empirical kappa* = {analysis.empirical_kappa_star(sweep.kappas, sweep.mean[a])}")
    return EXIT_OK


def cmd_codesign(cfg: dict) -> int:
    system = build_system(cfg)
    out = prepare_output(cfg)
    diam = system.topology.diameter
    jobs = int(cfg["jobs"])
    if diam == 0:
        write_csv(out / "codesign.csv", ("error_level", "empirical_kappa_star", "bound_kappa_star", "agree"),
                  [(float(level), 0, 0, True) for level in cfg["error_levels"]])
        print("single-node system: kappa* = 0")
        return EXIT_OK
    sweep = _sweep(cfg, system)
    _write_sweep(out, sweep)
    maps_by_kappa = {diam: synthesis.synthesize(system, diam, jobs=jobs)}
    temporal = analysis.fit_temporal_decay(maps_by_kappa[diam])
    below = sorted({int(k) for k in cfg["kappas"] if 0 <= int(k) < diam})
    if len(below) < 2:
        below = list(range(diam))
    spatial, _ = analysis.fit_spatial_decay(system, below, maps_by_kappa, jobs)
    constants = analysis.bound_constants(temporal, spatial)
    W = disturbance_spec(cfg).W
    rows = analysis.codesign(system, sweep, constants, W)
    write_csv(out / "codesign.csv", ("error_level", "empirical_kappa_star", "bound_kappa_star", "agree"),
              [(r["error_level"], r["empirical_kappa_star"], r["bound_kappa_star"], r["agree"]) for r in rows])
    curve_rows = []
    for r in rows:
        c = r["curve"]
        for kappa, val, terms in zip(c.kappas, c.values, c.terms.T):
            curve_rows.append((r["error_level"], int(kappa), val, *terms))
    write_csv(out / "bound_curves.csv", ("error_level", "kappa", "bound", "error_propagation",
                                          "suboptimality", "communication"), curve_rows)
    plt = _pyplot()
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    for a, r in enumerate(rows):
        ax0.plot(sweep.kappas, sweep.mean[a], marker="o", label=f"error {r['error_level']:g}")
        c = r["curve"]
        ax1.plot(c.kappas, c.values / c.values.max(), label=f"error {r['error_level']:g}")
        ax1.axvline(r["bound_kappa_star"], ls=":", color=ax1.lines[-1].get_color())
    ax0.set_yscale("log")
    ax0.set_xlabel("kappa")
    ax0.set_ylabel("normalized regret")
    ax1.set_xlabel("kappa")
    ax1.set_ylabel("bound (scaled to max 1)")
    ax0.legend()
    fig.tight_layout()
    save_svg(fig, out / "codesign.svg", cfg)
    plt.close(fig)
    for r in rows:
        print(f"error {r['error_level']:g}: empirical kappa* {r['empirical_kappa_star']}, "
              f"bound kappa* {r['bound_kappa_star']}, {'agree' if r['agree'] else 'DISAGREE'}")
    return EXIT_OK


COMMANDS = {
    "synthesize": cmd_synthesize,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "decay": cmd_decay,
    "codesign": cmd_codesign,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="predsls", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--preset", help="chain16, or a topology like cycle:8, tree:2,3, mesh:4,4, or an edge-list path")
        p.add_argument("--T", type=int)
        p.add_argument("--kappa", type=int)
        p.add_argument("--kappas", type=int, nargs="+")
        p.add_argument("--controller", action="append",
                       help="predsls:k=2 | cc | tc:k=2 | ptc:k=2 | opt (repeatable)")
        p.add_argument("--error-levels", dest="error_levels", type=float, nargs="+")
        p.add_argument("--seeds", type=int, help="number of seeds (0..N-1)")
        p.add_argument("--output", "-o")
        p.add_argument("--jobs", type=int)
        p.add_argument("--unclipped", action="store_true", help="do not clip disturbances to the W-box")
        p.add_argument("--dump-gains", dest="dump_gains", action="store_true")
        p.add_argument("--reduced", action="store_true", help="use the reduced-support synthesis path")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if cfg["controllers"] is not None and len(cfg["controllers"]) == 0:
            raise ConfigError("the controller list is empty")
        report = model.validate(build_system(cfg))
        if not report.ok:
            raise ConfigError("system validation failed:\n" + report.summary())
        return COMMANDS[args.command](cfg)
    except (ConfigError, model.ModelError, control.CommunicationError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (LocalizabilityError, RiccatiError, synthesis.KKTError, sim.SimulationError,
            analysis.FitError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
