import time

import numpy as np
import yaml

from conftest import straight_curve
from dualmotion.cli import EXIT_INPUT, EXIT_KINEMATICS, EXIT_OK, EXIT_TOLERANCE, load_scenario, main
from dualmotion.curve import Curve, save_curve
from dualmotion.motion_program import load_program


def scenario(tmp_path, name="smoke", curve=None, **over):
    """Tiny straight-line scenario: quick DE, one clean simulator run."""
    if curve is None:
        curve = tmp_path / "line.csv"
        save_curve(straight_curve(60.0), curve)
    raw = {
        "name": name,
        "curve": str(curve),
        "de": {"population": 10, "max_gens": 10},
        "sim": {"runs": 1, "noise": False},
        "tune": {"max_iter": 4},
        "baseline": {"waypoints": 7, "iterations": 4},
    }
    for k, v in over.items():
        raw[k] = {**raw.get(k, {}), **v} if isinstance(v, dict) else v
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def run(path, out, *args):
    return main([*args, "--scenario", str(path), "--out", str(out)])


def test_missing_curve_exit_code(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "curve.csv"
    code = run(scenario(tmp_path, curve=missing), tmp_path / "runs", "optimize")
    assert code == EXIT_INPUT
    assert str(missing) in capsys.readouterr().err


def test_missing_scenario_and_config(tmp_path, capsys):
    assert main(["fit", "--scenario", str(tmp_path / "x.yaml")]) == EXIT_INPUT
    assert run(scenario(tmp_path), tmp_path / "runs", "fit") == EXIT_INPUT
    assert "config.yaml" in capsys.readouterr().err


def test_bad_tolerance_rejected(tmp_path):
    assert run(scenario(tmp_path, tolerances={"eps_pos": -1.0}), tmp_path / "runs", "optimize") == EXIT_INPUT


def test_smoke_pipeline(tmp_path):
    sc = scenario(tmp_path)
    out = tmp_path / "runs"
    t0 = time.perf_counter()
    for cmd in ("optimize", "fit", "tune", "baseline", "report"):
        assert run(sc, out, cmd) == EXIT_OK, cmd
    assert time.perf_counter() - t0 < 60.0
    for f in ("config/smoke/config.yaml", "config/smoke/de_history.csv", "program/smoke/dual.prog", "program/smoke/fit_report.csv",
              "program/smoke/tuned.prog", "program/smoke/baseline.prog", "report/smoke/tune_history.csv", "report/smoke/summary.csv"):
        assert (out / f).exists(), f
    assert list((out / "report" / "smoke").glob("*.png"))
    assert len(load_program(out / "program" / "smoke" / "baseline.prog").robot1) == 7 - 1 + 2  # steps between waypoints plus leads
    # a stage reruns from the persisted artifacts alone
    before = (out / "program/smoke/dual.prog").read_bytes()
    assert run(sc, out, "fit") == EXIT_OK
    assert (out / "program/smoke/dual.prog").read_bytes() == before


def test_optimize_byte_stable(tmp_path):
    """Curve 1, seed 42: two runs write identical configuration files (short search)."""
    sc = scenario(tmp_path, name="c1", curve="curve1.csv", de={"population": 8, "max_gens": 2, "step": 4.0})
    blobs = []
    for i in range(2):
        out = tmp_path / f"r{i}"
        assert main(["optimize", "--scenario", str(sc), "--out", str(out), "--seed", "42"]) == EXIT_OK
        blobs.append(((out / "config/c1/config.yaml").read_bytes(), (out / "config/c1/de_history.csv").read_bytes()))
    assert blobs[0] == blobs[1]


def test_fit_reports_ik_failure(tmp_path, capsys):
    sc = scenario(tmp_path)
    out = tmp_path / "runs"
    assert run(sc, out, "optimize") == EXIT_OK
    far = Curve.from_points(straight_curve(60.0).p + [8000.0, 0, 0], straight_curve(60.0).n)
    save_curve(far, tmp_path / "line.csv")
    assert run(sc, out, "fit") == EXIT_KINEMATICS
    assert "lambda=0.000" in capsys.readouterr().err


def test_tune_failure_keeps_best(tmp_path):
    sc = scenario(tmp_path, tolerances={"eps_pos": 1e-6})
    out = tmp_path / "runs"
    assert run(sc, out, "optimize") == EXIT_OK
    assert run(sc, out, "fit") == EXIT_OK
    assert run(sc, out, "tune") == EXIT_TOLERANCE
    assert (out / "program/smoke/tuned.prog").exists()
    assert not yaml.safe_load((out / "report/smoke/tune_metrics.yaml").read_text())["success"]


def test_baseline_waypoint_flag(tmp_path):
    sc = scenario(tmp_path)
    out = tmp_path / "runs"
    assert main(["baseline", "--scenario", str(sc), "--out", str(out), "--waypoints", "5"]) == EXIT_OK
    d = yaml.safe_load((out / "report/smoke/baseline_metrics.yaml").read_text())
    assert d["waypoints"] == 5 and d["success"]
    prog = load_program(out / "program/smoke/baseline.prog")
    assert set(prog.kinds(1)[1:-1]) == {"L"} and len(prog.robot1) == 5 - 1 + 2
    assert np.all([np.array_equal(p.target, prog.robot2[0].target) for p in prog.robot2[1:-1]])


def test_scenario_defaults(tmp_path):
    sc = load_scenario(None, tmp_path)
    assert sc.curve.name == "curve1.csv" and sc.robot1_model.exists()
    assert sc.tolerances.eps_pos == 0.5
