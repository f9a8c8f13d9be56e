"""Command-line entry point.

Subcommands: identify, plan, pareto, simulate, report, forceset. Every run
writes into an output directory with a manifest (resolved configuration +
seed) sufficient to reproduce it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, sim, svg
from .currents import CurrentField
from .params import ModelParams
from .planner import (PlanScenario, ReferenceTrajectory, pareto_sweep,
                      save_pareto, solve_homotopy)


class CliError(RuntimeError):
    def __init__(self, msg: str, code: int = 1):
        super().__init__(msg)
        self.code = code


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: dict, seed) -> None:
    manifest = {
        "schema": "watertaxi-manifest-v1",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _load_scenario_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"scenario file not found: {p}", code=2)
    cfg = sim.load_config(p)
    if cfg.get("schema") == "watertaxi-manifest-v1":
        cfg = cfg["config"]
    return cfg


def _plan_scenario_from(cfg: dict) -> PlanScenario:
    scen = sim.Scenario.from_dict(cfg)
    if scen.plan is None:
        raise CliError("configuration has no 'plan' section", code=2)
    return scen.plan


def cmd_plan(args) -> int:
    cfg = _load_scenario_file(args.scenario)
    plan = _plan_scenario_from(cfg)
    out = _out_dir(args.out)
    _write_manifest(out, "plan", cfg, cfg.get("seed", 0))
    traj = solve_homotopy(plan)
    traj.save(out / "traj.csv")
    plot = svg.LinePlot("planned docking trajectory", "x [m]", "y [m]", equal_axes=True)
    plot.add(traj.poses[:, 0], traj.poses[:, 1], "reference")
    plot.save(out / "traj.svg")
    print(f"planned T*={traj.duration:.1f} s energy={traj.energy/1e3:.1f} kJ -> {out/'traj.csv'}")
    return 0


def cmd_pareto(args) -> int:
    cfg = _load_scenario_file(args.scenario)
    plan = _plan_scenario_from(cfg)
    try:
        a, step, b = (float(v) for v in args.betas.split(":"))
    except ValueError as exc:
        raise CliError(f"bad --betas spec {args.betas!r} (want a:step:b)", code=2) from exc
    betas = list(np.arange(a, b + 0.5 * step, step))
    out = _out_dir(args.out)
    _write_manifest(out, "pareto", cfg, cfg.get("seed", 0))
    points = pareto_sweep(plan, betas)
    save_pareto(points, out / "front.csv")
    plot = svg.LinePlot("duration / energy trade-off", "T* [s]", "energy [kJ]")
    ok = [p for p in points if np.isfinite(p.t_opt)]
    plot.add([p.t_opt for p in ok], [p.energy / 1e3 for p in ok], "front")
    plot.save(out / "front.svg")
    print(f"{len(ok)}/{len(points)} points -> {out/'front.csv'}")
    return 0


def cmd_identify(args) -> int:
    from . import sysid

    data_dir = Path(args.data)
    if not data_dir.exists():
        raise CliError(f"data directory not found: {data_dir}", code=2)
    sequences = sysid.load_sequences(data_dir)
    if not sequences:
        raise CliError(f"no sequence CSV files under {data_dir}", code=2)
    spec = sysid.IdentSpec.default()
    if args.spec:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise CliError(f"spec file not found: {spec_path}", code=2)
        spec = sysid.IdentSpec.from_dict(json.loads(spec_path.read_text()))
    out = _out_dir(args.out)
    _write_manifest(out, "identify", {"data": str(data_dir), "spec": spec.to_dict()}, 0)
    result = sysid.identify(sequences, spec)
    result.save(out)
    print(result.table())
    print(f"report -> {out}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_scenario_file(args.scenario)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.no_colav:
        cfg["colav_enabled"] = False
    if args.mode:
        cfg.setdefault("nmpc", {})["mode"] = args.mode
    if args.params:
        p = Path(args.params)
        if not p.exists():
            raise CliError(f"params file not found: {p}", code=2)
        cfg.setdefault("plan", {})["model_params"] = json.loads(p.read_text())
    scen = sim.Scenario.from_dict(cfg)
    if scen.plan is None:
        raise CliError("configuration has no 'plan' section", code=2)
    out = _out_dir(args.out)
    _write_manifest(out, "simulate", cfg, scen.seed)
    traj = solve_homotopy(scen.plan)
    traj.save(out / "traj.csv")
    log = sim.run_closed_loop(scen, ref=traj)
    log.save(out / "runlog.csv")
    metrics = sim.evaluate_metrics(log, traj, scen.plan.x_target[:2])
    sim.write_summary(out / "summary.csv", [[scen.name] + metrics.row()])
    _run_plots(out, log, traj)
    print(f"energy={metrics.energy/1e3:.1f} kJ accuracy={metrics.accuracy:.2f} m "
          f"duration={metrics.duration:.1f} s cpu={100*metrics.solve_fraction:.0f}% -> {out}")
    return 0


def _run_plots(out: Path, log: sim.RunLog, traj: ReferenceTrajectory) -> None:
    p = svg.LinePlot("trajectory", "x [m]", "y [m]", equal_axes=True)
    p.add(traj.poses[:, 0], traj.poses[:, 1], "reference")
    p.add(log.truth[:, 0], log.truth[:, 1], "actual")
    p.save(out / "trajectory.svg")

    p = svg.LinePlot("actuators", "t [s]", "state")
    p.add(log.times, log.truth[:, 6], "n_AT [1/s]")
    p.add(log.times, log.truth[:, 7], "alpha [rad]")
    p.add(log.times, log.truth[:, 8], "n_BT [1/s]")
    p.save(out / "actuators.svg")

    p = svg.LinePlot("virtual time", "t [s]", "zeta [s]")
    p.add(log.times, log.governor[:, 1], "zeta")
    p.add(log.times, log.times, "t")
    p.save(out / "zeta.svg")

    p = svg.LinePlot("obstacle clearance", "t [s]", "distance [m]")
    d = log.governor[:, 0].copy()
    d[~np.isfinite(d)] = np.nan
    p.add(log.times, d, "predicted min")
    ms = log.min_separation.copy()
    ms[~np.isfinite(ms)] = np.nan
    p.add(log.times, ms, "actual")
    p.save(out / "distance.svg")


def cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    if not runs_dir.exists():
        raise CliError(f"runs directory not found: {runs_dir}", code=2)
    rows = []
    for sub in sorted(runs_dir.iterdir()):
        summary = sub / "summary.csv"
        if not summary.is_file():
            continue
        lines = summary.read_text().splitlines()
        if not lines or lines[0].strip() != f"# {sim.SUMMARY_SCHEMA}":
            raise CliError(f"{summary}: schema mismatch (want {sim.SUMMARY_SCHEMA})", code=2)
        for rec in lines[2:]:
            if rec.strip():
                rows.append(rec.split(","))
    if not rows:
        raise CliError(f"no run summaries under {runs_dir}", code=2)
    print(f"{'run':<10}{'Energy':>12}{'Accuracy':>12}{'Time':>10}{'CPU':>8}")
    for r in rows:
        energy = float(r[1]) / 1e3
        print(f"{r[0]:<10}{energy:>10.1f} kJ{float(r[2]):>10.2f} m{float(r[3]):>9.1f} s"
              f"{100*float(r[4]):>7.0f}%")
    if args.out:
        out = _out_dir(args.out)
        with open(out / "report.csv", "w") as fh:
            fh.write(f"# {sim.SUMMARY_SCHEMA}\n")
            fh.write("run,energy_kj,accuracy_m,duration_s,cpu_frac\n")
            for r in rows:
                fh.write(f"{r[0]},{float(r[1])/1e3},{r[2]},{r[3]},{r[4]}\n")
    return 0


def cmd_forceset(args) -> int:
    from . import model

    params = ModelParams.load(args.params) if args.params else ModelParams()
    out = _out_dir(args.out)
    _write_manifest(out, "forceset", {"params": params.to_dict()}, 0)
    cloud = model.sample_force_set(params)
    with open(out / "forceset.csv", "w") as fh:
        fh.write("# watertaxi-forceset-v1\n")
        fh.write("n_AT,alpha,n_BT,X,Y,N\n")
        for row in cloud:
            fh.write(",".join(f"{v:.6g}" for v in row) + "\n")
    for (i, j, name, xl, yl) in ((3, 4, "XY", "X [N]", "Y [N]"),
                                 (3, 5, "XN", "X [N]", "N [Nm]"),
                                 (4, 5, "YN", "Y [N]", "N [Nm]")):
        p = svg.LinePlot(f"reachable force set ({name})", xl, yl)
        p.add(cloud[:, i], cloud[:, j], scatter=True)
        p.save(out / f"forceset_{name}.svg")
    print(f"{cloud.shape[0]} samples -> {out/'forceset.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="watertaxi",
                                 description="water-taxi planning/control stack")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("identify", help="output-error parameter identification")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("plan", help="plan a docking trajectory")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("pareto", help="duration/energy sweep over beta")
    p.add_argument("--scenario", required=True)
    p.add_argument("--betas", default="0:0.1:1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("simulate", help="closed-loop simulation")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-colav", action="store_true")
    p.add_argument("--mode", choices=["transit", "docking"], default=None)
    p.add_argument("--params", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="summary table over run directories")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("forceset", help="sample the reachable force set")
    p.add_argument("--out", required=True)
    p.add_argument("--params", default=None)
    p.set_defaults(func=cmd_forceset)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # surfaced as a one-line machine-parsable error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
