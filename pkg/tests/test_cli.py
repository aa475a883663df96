import csv
import json

import numpy as np
import pytest

import hierreach.cli as cli
from hierreach.hierarchy import HierarchicalPlanner, SinglePlanner, load_planner
from hierreach.scenarios import ExpertDataset

from conftest import CONFIGS, run_cli


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


# ---------------------------------------------------------------- errors


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert run_cli("gen-data", "--config", tmp_path / "nope.json", "--out", tmp_path) == 2
    assert "config file not found" in capsys.readouterr().err


@pytest.mark.parametrize("doc,message", [
    ({"scenario": "left_turn", "colour": "red"}, "unknown config keys"),
    ({"initial_set": "merge"}, "scenario"),
    ({"scenario": "roundabout"}, "unknown scenario"),
    ({"scenario": "merging", "params": {"lanes": 2}}, "parameters"),
    ({"scenario": "merging", "initial_set": "fixed_window"}, "known"),
    ({"scenario": "merging", "initial_set": [[0, 1]]}, "dims"),
    ({"scenario": "merging", "reach": {"speed": 1}}, "reach"),
    ({"scenario": "merging", "training": []}, "object"),
])
def test_bad_configs_are_usage_errors(tmp_path, capsys, doc, message):
    path = write_config(tmp_path, doc)
    assert run_cli("gen-data", "--config", path, "--out", tmp_path / "out") == 2
    assert message in capsys.readouterr().err


def test_invalid_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"scenario": ')
    assert run_cli("gen-data", "--config", path, "--out", tmp_path) == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_unknown_subcommand_and_bad_flags(tmp_path):
    assert run_cli("plot", "--config", "x", "--out", tmp_path) == 2
    assert run_cli("gen-data", "--out", tmp_path) == 2
    cfg = write_config(tmp_path, {"scenario": "merging"})
    assert run_cli("gen-data", "--config", cfg, "--out", tmp_path, "--workers", 0) == 2
    assert run_cli("--help") == 0


def test_missing_planner(tmp_path, capsys):
    cfg = write_config(tmp_path, {"scenario": "merging", "initial_set": "merge"})
    assert run_cli("verify", "--config", cfg, "--out", tmp_path) == 2
    assert "planner" in capsys.readouterr().err
    cfg = write_config(tmp_path, {"scenario": "merging", "initial_set": "merge", "planner": "none.json"})
    assert run_cli("verify", "--config", cfg, "--out", tmp_path) == 2


def test_internal_error_exit_code(tmp_path, monkeypatch, capsys):
    def boom(cfg, out, args):
        raise RuntimeError("kaput")

    monkeypatch.setitem(cli.COMMANDS, "gen-data", boom)
    cfg = write_config(tmp_path, {"scenario": "merging"})
    assert run_cli("gen-data", "--config", cfg, "--out", tmp_path) == 3
    assert "kaput" in capsys.readouterr().err


def test_schedule_trigger_needs_schedule(tmp_path, left_turn_bundle, capsys):
    cfg = write_config(tmp_path, {"scenario": "left_turn", "initial_set": "fixed_window",
                                  "trigger": {"kind": "every", "k": 2, "last": "schedule"}})
    code = run_cli("verify", "--config", cfg, "--out", tmp_path, "--planner", left_turn_bundle / "hierarchical.json")
    assert code == 2 and "schedule" in capsys.readouterr().err


# ---------------------------------------------------------------- gen-data


def test_gen_data_writes_csv_and_histogram(tmp_path, capsys):
    cfg = write_config(tmp_path, {"scenario": "merging"})
    assert run_cli("gen-data", "--config", cfg, "--out", tmp_path / "a") == 0
    out = capsys.readouterr().out
    assert "yield:" in out and "proceed:" in out
    data = ExpertDataset.from_csv(tmp_path / "a" / "dataset.csv")
    assert len(data) > 0
    assert run_cli("gen-data", "--config", cfg, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "dataset.csv").read_bytes() == (tmp_path / "b" / "dataset.csv").read_bytes()
    assert run_cli("gen-data", "--config", cfg, "--out", tmp_path / "c", "--seed", 1) == 0
    assert (tmp_path / "a" / "dataset.csv").read_bytes() != (tmp_path / "c" / "dataset.csv").read_bytes()


# ---------------------------------------------------------------- train


def test_train_outputs(left_turn_bundle):
    weights = sorted(p.name for p in left_turn_bundle.glob("hierarchical.*.weights.json"))
    assert weights == ["hierarchical.behavior.weights.json", "hierarchical.proceed.weights.json",
                       "hierarchical.stop.weights.json", "hierarchical.yield.weights.json"]
    planner = load_planner(left_turn_bundle / "hierarchical.json")
    assert isinstance(planner, HierarchicalPlanner) and planner.behaviors == ("stop", "yield", "proceed")
    assert isinstance(load_planner(left_turn_bundle / "single.json"), SinglePlanner)


def test_train_fit_quality(tmp_path, capsys):
    # a reduced merging run keeps this quick
    cfg = write_config(tmp_path, {"scenario": "merging", "params": {"sampling": {
        "ranges": [[-3.0, 3.0], [22.0, 28.0], [-34.0, -14.0], [23.0, 27.0]], "rollouts": 100, "horizon": 28}}})
    assert run_cli("train", "--config", cfg, "--out", tmp_path / "m") == 0
    lines = dict(line.split(": ") for line in capsys.readouterr().out.splitlines() if ": " in line)
    for name in ("yield", "proceed", "single"):
        assert float(lines[f"mse {name}"]) < 0.05
    assert float(lines["behavior accuracy"]) > 0.9


def test_train_from_dataset_file(tmp_path):
    cfg = write_config(tmp_path, {"scenario": "merging", "params": {"sampling": {
        "ranges": [[-3.0, 3.0], [22.0, 28.0], [-34.0, -14.0], [23.0, 27.0]], "rollouts": 20, "horizon": 6}}})
    assert run_cli("gen-data", "--config", cfg, "--out", tmp_path) == 0
    cfg2 = write_config(tmp_path, {"scenario": "merging", "dataset": "dataset.csv",
                                   "training": {"epochs": 2}, "behavior_training": {"epochs": 2}}, "t.json")
    assert run_cli("train", "--config", cfg2, "--out", tmp_path / "m") == 0
    assert (tmp_path / "m" / "hierarchical.json").is_file()
    cfg3 = write_config(tmp_path, {"scenario": "merging", "dataset": "missing.csv"}, "t3.json")
    assert run_cli("train", "--config", cfg3, "--out", tmp_path / "m") == 2


# ---------------------------------------------------------------- verify / simulate / falsify


def test_verify_fixed_window(fixed_window_run):
    assert fixed_window_run.code == 0
    meta = json.loads((fixed_window_run.out / "reach_meta.json").read_text())
    assert meta["verdict"] == "Safe"
    header = (fixed_window_run.out / "reach.csv").read_text().splitlines()[0]
    los = ",".join(f"lo_{i}" for i in range(1, 6))
    his = ",".join(f"hi_{i}" for i in range(1, 6))
    assert header == f"step_index,t_lo,t_hi,planner_tag,{los},{his}"


def test_simulate_with_containment(workdir, left_turn_bundle, fixed_window_run):
    out = workdir / "cli_simulate"
    code = run_cli("simulate", "--config", CONFIGS / "left_turn_fixed_window.json", "--out", out,
                   "--planner", left_turn_bundle / "hierarchical.json",
                   "--reach", fixed_window_run.out / "reach.csv", "--samples", 30)
    assert code == 0
    rows = list(csv.DictReader((out / "trajectories.csv").open()))
    steps = np.array([int(r["step"]) for r in rows])
    assert np.all(np.bincount(steps) == 30)
    assert (out / "trajectories_containment.txt").read_text().startswith("contained 30/30")


def test_falsify_small_schedule(workdir, left_turn_bundle, capsys):
    out = workdir / "cli_falsify"
    code = run_cli("falsify", "--config", CONFIGS / "left_turn_fixed_window.json", "--out", out,
                   "--planner", left_turn_bundle / "hierarchical.json", "--samples", 500)
    text = (out / "falsify.txt").read_text()
    assert text.splitlines()[0] == "samples 100: 0 violating"
    assert code == (1 if "sample " in text.split("counterexample:")[1] else 0)
    assert text in capsys.readouterr().out


def test_merge_window_outputs(merging_run):
    assert merging_run.code == 0
    lines = (merging_run.out / "merge_window.txt").read_text().splitlines()
    assert lines[0] == "verdict: Safe" and lines[1] == "d_th: 19.75"
    assert lines[2].startswith("window: [")


def test_merge_window_needs_merging(tmp_path, left_turn_bundle, capsys):
    code = run_cli("merge-window", "--config", CONFIGS / "left_turn_fixed_window.json", "--out", tmp_path,
                   "--planner", left_turn_bundle / "hierarchical.json")
    assert code == 2 and "merging" in capsys.readouterr().err
