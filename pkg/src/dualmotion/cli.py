"""Command-line pipeline: optimize -> fit -> tune, plus simulate, baseline and report.

Artifacts go to ``<out>/{config,program,exec,report}/<run>/`` so every stage
can be rerun from the files the previous one wrote.

Exit codes: 0 success, 2 input error, 3 infeasible kinematics, 4 tolerance failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .config_opt import DEOptions, SearchSpace, baseline_seed, evolve, make_objective, single_arm_speed
from .curve import load_curve
from .exec_sim import SimOptions, SimulationError, average_runs, sigma_from_repeatability
from .fixtures import data_path
from .kinematics import ModelError, load_model
from .motion_program import FitError, FitOptions, ProgramFormatError, greedy_fit_dual, load_program, program_deviation, save_program, uniform_line_program
from .relative_ik import DualConfig, IKError, place, solve_path
from .speedbound import SpeedBoundError, max_uniform_speed
from .tuner import MetricsError, Tolerances, TuneOptions, baseline_search, compute_metrics, tune, write_history

log = logging.getLogger("dualmotion")

EXIT_OK, EXIT_INPUT, EXIT_KINEMATICS, EXIT_TOLERANCE = 0, 2, 3, 4
STAGES = ("config", "program", "exec", "report")


class InputError(Exception):
    pass


class KinematicsError(Exception):
    pass


class ToleranceFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# scenario


@dataclass
class ScenarioConfig:
    name: str
    robot1_model: Path
    robot2_model: Path
    curve: Path
    tolerances: Tolerances = field(default_factory=Tolerances)
    de: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    tune: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    seed_config: dict = field(default_factory=dict)
    output: Path = Path("runs")
    seed: int = 0

    def models(self):
        return load_model(self.robot1_model), load_model(self.robot2_model)

    def load_curve(self):
        return load_curve(self.curve)


DEFAULTS = {
    "robot1": "robot1.yaml",
    "robot2": "robot2.yaml",
    "curve": "curve1.csv",
    "seed_config": {"q0_2": [0.0] * 6, "base2": [2800.0, 0.0, float(np.pi)]},
    "de": {"population": 30, "F": 0.8, "CR": 0.9, "max_gens": 300, "step": 2.0, "joint_window": 1.0, "xy_window": 500.0, "yaw_window": 0.6},
    "fit": {"tol": 0.1, "normal_tol_deg": 1.0, "extension": 30.0},
    "sim": {"rate": 250.0, "internal_rate": 1000.0, "runs": 5, "repeatability": [1.06, 0.07], "noise": True},
    "tune": {"gamma": 0.7, "backoff": 0.9, "blend_start": 10.0, "max_iter": 20, "mu_floor": 1.0},
    "baseline": {"waypoints": 50, "iterations": 12},
}


def _resolve(value, base: Path):
    """File reference: relative to the scenario file, else a shipped data file."""
    p = Path(value)
    if p.is_absolute():
        cand = [p]
    else:
        cand = [base / p, Path.cwd() / p, data_path(str(p))]
    for c in cand:
        if c.exists():
            return c.resolve()
    raise InputError(f"file not found: {cand[0]}")


def load_scenario(path=None, out=None, seed=None) -> ScenarioConfig:
    raw = {}
    base = Path.cwd()
    name = "default"
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise InputError(f"scenario file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise InputError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise InputError(f"{path}: expected a mapping")
        base = path.parent
        name = path.stem

    def section(key):
        d = dict(DEFAULTS[key])
        d.update(raw.get(key) or {})
        return d

    try:
        tol = Tolerances(**(raw.get("tolerances") or {}))
    except (TypeError, ValueError) as exc:
        raise InputError(f"tolerances: {exc}") from exc
    sc = ScenarioConfig(
        name=str(raw.get("name", name)),
        robot1_model=_resolve(raw.get("robot1", DEFAULTS["robot1"]), base),
        robot2_model=_resolve(raw.get("robot2", DEFAULTS["robot2"]), base),
        curve=_resolve(raw.get("curve", DEFAULTS["curve"]), base),
        tolerances=tol,
        de=section("de"),
        fit=section("fit"),
        sim=section("sim"),
        tune=section("tune"),
        baseline=section("baseline"),
        seed_config=section("seed_config"),
        output=Path(out if out is not None else raw.get("output", "runs")),
        seed=int(seed if seed is not None else raw.get("seed", 0)),
    )
    return sc


def stage_dir(sc: ScenarioConfig, stage):
    d = sc.output / stage / sc.name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_yaml(path, data):
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def _read_config(path) -> DualConfig:
    path = Path(path)
    if not path.exists():
        raise InputError(f"configuration file not found: {path} (run 'optimize' first)")
    try:
        return DualConfig.from_dict(yaml.safe_load(path.read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _read_program(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"program file not found: {path} (run 'fit' first)")
    try:
        return load_program(path)
    except ProgramFormatError as exc:
        raise InputError(f"{path}: {exc}") from exc


def seed_configuration(sc: ScenarioConfig, models, curve) -> DualConfig:
    s = sc.seed_config
    q0_2 = np.asarray(s["q0_2"], dtype=float)
    base2 = np.asarray(s["base2"], dtype=float)
    if "q0_1" in s:
        return DualConfig(np.asarray(s["q0_1"], dtype=float), q0_2, base2)
    try:
        return baseline_seed(curve, models, q0_2, base2)
    except IKError as exc:
        raise KinematicsError(str(exc)) from exc


def sim_options(sc: ScenarioConfig, noise=True):
    s = sc.sim
    rp = s.get("repeatability", [1.06, 0.07])
    nz = tuple(sigma_from_repeatability(v) for v in rp) if (noise and s.get("noise", True)) else None
    return SimOptions(rate=float(s["rate"]), internal_rate=float(s["internal_rate"]), noise=nz, seed=sc.seed), int(s.get("runs", 5))


def tune_options(sc: ScenarioConfig):
    sim, runs = sim_options(sc)
    t = sc.tune
    return TuneOptions(
        gamma=float(t["gamma"]),
        runs=runs,
        noise=sim.noise,
        seed=sc.seed,
        backoff=float(t["backoff"]),
        blend_start=float(t["blend_start"]),
        max_iter=int(t["max_iter"]),
        mu_floor=float(t["mu_floor"]),
        sim=sim,
    )


def _metrics_dict(m, extra=None):
    d = {k: float(v) for k, v in m.summary().items()}
    if extra:
        d.update(extra)
    return d


def write_trace(path, m):
    """Per-sample metric traces (plot-ready)."""
    data = np.column_stack([m.t, m.gate.astype(float), m.lam, m.pos_err, np.rad2deg(m.norm_err), m.speed])
    np.savetxt(path, data, delimiter=",", header="t,gate,lam,pos_err,norm_err_deg,speed", comments="", fmt="%.10g")


# ---------------------------------------------------------------------------
# commands


def cmd_optimize(sc: ScenarioConfig):
    models = sc.models()
    curve = sc.load_curve()
    seed = seed_configuration(sc, models, curve)
    d = sc.de
    space = SearchSpace.around(seed, models, d["joint_window"], d["xy_window"], d["yaw_window"])
    opts = DEOptions(int(d["population"]), float(d["F"]), float(d["CR"]), int(d["max_gens"]), sc.seed, initial=[seed.as_vector()])
    f = make_objective(curve, models, float(d["step"]))
    mu_single = single_arm_speed(seed, curve, models)
    log.info("seed: single-arm mu %.1f mm/s", mu_single)
    rep = evolve(space, f, opts, callback=lambda g, b: log.info("generation %d: best mu %.1f", g, b) if g % 10 == 0 else None)
    if rep.best_mu[-1] <= 0:
        raise KinematicsError("no feasible configuration in the search space")
    out = stage_dir(sc, "config")
    best = rep.best_config
    mu_full = max_uniform_speed(solve_path(best, curve, models), models).mu
    _write_yaml(out / "seed.yaml", seed.to_dict())
    _write_yaml(out / "config.yaml", best.to_dict())
    rep.to_csv(out / "de_history.csv")
    _write_yaml(
        out / "summary.yaml",
        {"seed_mu_single_arm": float(mu_single), "best_mu_search": float(rep.best_mu[-1]), "best_mu": float(mu_full),
         "generations": len(rep.best_mu) - 1, "evaluations": rep.evaluations, "converged": bool(rep.converged)},
    )
    print(f"best mu {mu_full:.1f} mm/s (seed single-arm {mu_single:.1f}) -> {out / 'config.yaml'}")
    return EXIT_OK


def cmd_fit(sc: ScenarioConfig, config_path=None):
    models = sc.models()
    curve = sc.load_curve()
    cfg = _read_config(config_path or sc.output / "config" / sc.name / "config.yaml")
    placed = place(models, cfg)
    try:
        path = solve_path(cfg, curve, models)
    except IKError as exc:
        raise KinematicsError(f"relative IK failed at lambda={exc.lam:.3f} mm: {exc}") from exc
    prof = max_uniform_speed(path, models)
    f = sc.fit
    opts = FitOptions(tol=float(f["tol"]), normal_tol_deg=float(f["normal_tol_deg"]), extension=float(f["extension"]))
    try:
        prog = greedy_fit_dual(path, placed, curve, opts, mu=prof.mu)
    except FitError as exc:
        raise KinematicsError(str(exc)) from exc
    out = stage_dir(sc, "program")
    save_program(prog, out / "dual.prog")
    path.to_csv(out / "joint_path.csv")
    prof.to_csv(out / "speed_profile.csv")
    per = []
    dev = program_deviation(prog, placed, curve, per_step=per)
    ks = range(1, prog.steps - 1) if prog.lead else range(prog.steps)
    with open(out / "fit_report.csv", "w") as fh:
        fh.write("step,kind1,kind2,end_index,deviation_mm,deviation_deg\n")
        for (d_mm, d_rad), k in zip(per, ks):
            fh.write(f"{k},{prog.robot1[k].kind},{prog.robot2[k].kind},{prog.breakpoints[k]},{d_mm!r},{float(np.rad2deg(d_rad))!r}\n")
    print(f"K={prog.interior_count} robot1={prog.kinds(1)} robot2={prog.kinds(2)} max deviation {dev[0]:.4f} mm -> {out / 'dual.prog'}")
    return EXIT_OK


def _placed(sc, models, config_path=None):
    cfg = _read_config(config_path or sc.output / "config" / sc.name / "config.yaml")
    return cfg, place(models, cfg)


def cmd_simulate(sc: ScenarioConfig, program_path=None, config_path=None, noise=False):
    models = sc.models()
    curve = sc.load_curve()
    _, placed = _placed(sc, models, config_path)
    prog = _read_program(program_path or sc.output / "program" / sc.name / "dual.prog")
    opts, runs = sim_options(sc, noise)
    try:
        rec = average_runs(prog, placed, runs if noise else 1, opts)
    except SimulationError as exc:
        raise KinematicsError(str(exc)) from exc
    m = compute_metrics(rec, curve, placed)
    out = stage_dir(sc, "exec")
    stem = Path(program_path).stem if program_path else "dual"
    rec.to_csv(out / f"{stem}_record.csv")
    write_trace(out / f"{stem}_trace.csv", m)
    _write_yaml(out / f"{stem}_metrics.yaml", _metrics_dict(m, {"ok": bool(m.ok(sc.tolerances)), "duration": float(rec.t[-1])}))
    print(" ".join(f"{k}={v:.4g}" for k, v in m.summary().items()))
    return EXIT_OK


def cmd_tune(sc: ScenarioConfig, program_path=None, config_path=None):
    models = sc.models()
    curve = sc.load_curve()
    _, placed = _placed(sc, models, config_path)
    prog = _read_program(program_path or sc.output / "program" / sc.name / "dual.prog")
    opts = tune_options(sc)
    res = tune(prog, curve, placed, sc.tolerances, prog.mu, opts)
    pdir, edir, rdir = stage_dir(sc, "program"), stage_dir(sc, "exec"), stage_dir(sc, "report")
    save_program(res.program, pdir / "tuned.prog")
    write_history(res.history, rdir / "tune_history.csv")
    rec = average_runs(res.program, placed, opts.runs, SimOptions(**{**opts.sim.__dict__, "noise": opts.noise, "seed": opts.seed}))
    rec.to_csv(edir / "tuned_record.csv")
    m = compute_metrics(rec, curve, placed)
    write_trace(edir / "tuned_trace.csv", m)
    _write_yaml(
        rdir / "tune_metrics.yaml",
        _metrics_dict(res.metrics, {"success": bool(res.success), "mu_cmd": float(res.program.mu), "iterations": len(res.history),
                                    "message": res.message, "flagged_waypoints": [int(k) for k in res.flagged]}),
    )
    print(f"{'success' if res.success else 'FAILED'}: " + " ".join(f"{k}={v:.4g}" for k, v in res.metrics.summary().items()))
    if not res.success:
        raise ToleranceFailure(res.message)
    return EXIT_OK


def cmd_baseline(sc: ScenarioConfig, waypoints=None):
    models = sc.models()
    curve = sc.load_curve()
    seed_file = sc.output / "config" / sc.name / "seed.yaml"
    seed = _read_config(seed_file) if seed_file.exists() else seed_configuration(sc, models, curve)
    placed = place(models, seed)
    try:
        path = solve_path(seed, curve, models, lock_robot2=True)
        mu = max_uniform_speed(path, models).mu
        n_wp = int(waypoints or sc.baseline["waypoints"])
        prog = uniform_line_program(path, placed, curve, n_wp, speed=mu, extension=float(sc.fit["extension"]))
    except (IKError, FitError, SpeedBoundError) as exc:
        raise KinematicsError(str(exc)) from exc
    opts = tune_options(sc)
    res = baseline_search(prog, curve, placed, sc.tolerances, hi=mu, options=opts, iters=int(sc.baseline["iterations"]))
    pdir, edir, rdir = stage_dir(sc, "program"), stage_dir(sc, "exec"), stage_dir(sc, "report")
    save_program(res.program, pdir / "baseline.prog")
    with open(rdir / "baseline_probes.csv", "w") as fh:
        fh.write("speed,max_pos_err,max_norm_err,mu_avg,std_ratio\n")
        for v, m in res.probes:
            vals = [m.max_pos_err, m.max_norm_err, m.mu_avg, m.speed_std_ratio] if m else [float("nan")] * 4
            fh.write(",".join(repr(float(x)) for x in [v, *vals]) + "\n")
    if res.metrics is not None:
        rec = average_runs(res.program, placed, opts.runs, SimOptions(**{**opts.sim.__dict__, "noise": opts.noise, "seed": opts.seed}))
        rec.to_csv(edir / "baseline_record.csv")
        write_trace(edir / "baseline_trace.csv", compute_metrics(rec, curve, placed))
        _write_yaml(rdir / "baseline_metrics.yaml", _metrics_dict(res.metrics, {"success": bool(res.success), "speed_cmd": float(res.speed),
                                                                               "waypoints": n_wp, "single_arm_mu": float(mu)}))
        print(f"{'success' if res.success else 'FAILED'}: speed {res.speed:.1f} " + " ".join(f"{k}={v:.4g}" for k, v in res.metrics.summary().items()))
    if not res.success:
        raise ToleranceFailure("baseline infeasible at the speed floor")
    return EXIT_OK


def cmd_report(sc: ScenarioConfig):
    from . import plotting

    rdir = stage_dir(sc, "report")
    made = plotting.render_run(sc.output, sc.name, rdir, sc.tolerances)
    rows = []
    for label, f in (("dual", rdir / "tune_metrics.yaml"), ("baseline", rdir / "baseline_metrics.yaml")):
        if f.exists():
            d = yaml.safe_load(f.read_text())
            rows.append((label, d["mu_avg"], d["max_pos_err"], d["max_norm_err"], d["speed_std_ratio"], d.get("success", False)))
    with open(rdir / "summary.csv", "w") as fh:
        fh.write("method,mu_avg,max_pos_err,max_norm_err,speed_std_ratio,success\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    for p in made:
        print(p)
    print(rdir / "summary.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario YAML (defaults: shipped models and curve 1)")
    common.add_argument("--seed", type=int, default=None, help="seed for DE and simulator noise")
    common.add_argument("--out", default=None, help="artifact root directory")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="dualmotion", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    sub.add_parser("optimize", parents=[common], help="configuration search")
    p = sub.add_parser("fit", parents=[common], help="greedy primitive fit")
    p.add_argument("--config")
    p = sub.add_parser("simulate", parents=[common], help="execute a program on the simulator")
    p.add_argument("--program")
    p.add_argument("--config")
    p.add_argument("--noise", action="store_true", help="averaged noisy runs instead of one clean run")
    p = sub.add_parser("tune", parents=[common], help="waypoint iteration")
    p.add_argument("--program")
    p.add_argument("--config")
    p = sub.add_parser("baseline", parents=[common], help="equally spaced moveL baseline")
    p.add_argument("--waypoints", type=int)
    sub.add_parser("report", parents=[common], help="figures and summary table")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        sc = load_scenario(args.scenario, args.out, args.seed)
        if args.cmd == "optimize":
            return cmd_optimize(sc)
        if args.cmd == "fit":
            return cmd_fit(sc, args.config)
        if args.cmd == "simulate":
            return cmd_simulate(sc, args.program, args.config, args.noise)
        if args.cmd == "tune":
            return cmd_tune(sc, args.program, args.config)
        if args.cmd == "baseline":
            return cmd_baseline(sc, args.waypoints)
        return cmd_report(sc)
    except (InputError, ModelError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (KinematicsError, IKError, SimulationError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_KINEMATICS
    except (ToleranceFailure, MetricsError) as exc:
        print(f"tolerance failure: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE


if __name__ == "__main__":
    sys.exit(main())
