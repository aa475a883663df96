"""Command-line entry point: dataset generation, training, verification, falsification, simulation.

Every subcommand reads a JSON run config (``--config``) and writes its
outputs under ``--out``.  Relative paths inside a config resolve against the
config file's directory.  Exit codes: 0 success or Safe, 1 Uncertain (or a
counterexample / no merge window), 2 usage or config error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import hierarchy as hi
from .nn import TrainConfig
from .reach import (
    IntervalBox,
    ReachConfig,
    UnsafeRegion,
    algorithm1,
    export_csv,
    export_metadata,
    load_reach,
)
from .scenarios import (
    ExpertDataset,
    LeftTurnScenario,
    MergingScenario,
    make_scenario,
    merging_unsafe_window,
)
from .sim import DEFAULT_SCHEDULE, containment_check, export_trajectories, falsify, sample_box, simulate_batch

log = logging.getLogger("hierreach")

EXIT_OK, EXIT_UNCERTAIN, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: object
    base: Path
    initial: IntervalBox | None = None
    planner_path: Path | None = None
    trigger: dict | None = None
    t0: float | None = None
    unsafe: object = "default"
    reach: dict = field(default_factory=dict)
    bernstein: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    behavior_training: dict = field(default_factory=dict)
    dataset_path: Path | None = None
    falsify: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    merge: dict = field(default_factory=dict)
    seed: int = 0


_KNOWN = {"scenario", "params", "initial_set", "planner", "trigger", "t0", "unsafe", "reach",
          "bernstein", "training", "behavior_training", "dataset", "falsify", "simulate", "merge", "seed"}


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _KNOWN
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "scenario" not in doc:
        raise ConfigError("config needs a 'scenario' name")
    base = path.parent
    try:
        sc = make_scenario(doc["scenario"], **doc.get("params", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    cfg = RunConfig(sc, base, seed=int(doc.get("seed", 0)))
    init = doc.get("initial_set")
    if isinstance(init, str):
        try:
            cfg.initial = sc.initial_set(init)
        except KeyError as exc:
            raise ConfigError(exc.args[0]) from None
    elif init is not None:
        try:
            cfg.initial = IntervalBox.from_bounds(init)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad initial_set: {exc}") from None
        if cfg.initial.n != len(sc.state_names):
            raise ConfigError(f"initial_set has {cfg.initial.n} dims, scenario has {len(sc.state_names)}")
    if "planner" in doc:
        cfg.planner_path = base / doc["planner"]
    if "dataset" in doc:
        cfg.dataset_path = base / doc["dataset"]
    cfg.trigger = doc.get("trigger")
    cfg.t0 = doc.get("t0")
    cfg.unsafe = doc.get("unsafe", "default")
    for key in ("reach", "bernstein", "training", "behavior_training", "falsify", "simulate", "merge"):
        val = doc.get(key, {})
        if not isinstance(val, dict):
            raise ConfigError(f"'{key}' must be an object")
        setattr(cfg, key, val)
    _check_keys(cfg.reach, ReachConfig, "reach")
    _check_keys(cfg.training, TrainConfig, "training")
    _check_keys(cfg.behavior_training, TrainConfig, "behavior_training")
    _check_keys(cfg.bernstein, hi.StepConfig, "bernstein")
    return cfg


def _check_keys(d: dict, cls, where: str) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {where} parameters: {sorted(unknown)}")


def _require_initial(cfg: RunConfig) -> IntervalBox:
    if cfg.initial is None:
        raise ConfigError("config needs an 'initial_set'")
    return cfg.initial


def _t0(cfg: RunConfig, initial: IntervalBox) -> float:
    if cfg.t0 is not None:
        return float(cfg.t0)
    names = cfg.scenario.state_names
    return float(initial.lo[names.index("t")]) if "t" in names else 0.0


def _load_planner(cfg: RunConfig, override: str | None = None):
    path = Path(override) if override else cfg.planner_path
    if path is None:
        raise ConfigError("config needs a 'planner' bundle path (or pass --planner)")
    if not path.is_file():
        raise ConfigError(f"planner bundle not found: {path}")
    try:
        planner = hi.load_planner(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load planner {path}: {exc}") from None
    if isinstance(planner, hi.HierarchicalPlanner) and cfg.trigger is not None:
        planner = planner.with_trigger(_trigger(cfg))
    return planner


def _trigger(cfg: RunConfig) -> hi.Trigger:
    d = dict(cfg.trigger)
    if d.get("last") == "schedule":
        sc = cfg.scenario
        if not isinstance(sc, LeftTurnScenario) or not sc.schedule:
            raise ConfigError("trigger last='schedule' needs a left-turn scenario with a schedule")
        d["last"] = sc.last_update_step(_t0(cfg, _require_initial(cfg)))
    try:
        return hi.Trigger.from_dict(d)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad trigger: {exc}") from None


def _unsafe(cfg: RunConfig) -> UnsafeRegion | None:
    sc = cfg.scenario
    u = cfg.unsafe
    if u is None:
        return None
    if u == "default":
        return sc.unsafe() if isinstance(sc, LeftTurnScenario) else None
    if isinstance(u, dict) and isinstance(sc, LeftTurnScenario):
        return sc.unsafe(u.get("tau_min"), u.get("tau_max"))
    if isinstance(u, dict) and isinstance(sc, MergingScenario):
        return sc.band_region(u["p_lo"], u["p_hi"], u.get("d_th"))
    raise ConfigError(f"bad unsafe spec: {u!r}")


def _reach_config(cfg: RunConfig) -> ReachConfig:
    sc = cfg.scenario
    # wall-clock budgets would make outputs machine dependent, so off unless asked for
    params = {"dt": sc.dt, "delta": tuple(sc.delta), "cell_time_budget": None, **cfg.reach}
    if "max_steps" not in cfg.reach and isinstance(sc, LeftTurnScenario):
        params["max_steps"] = sc.horizon_steps(_require_initial(cfg))
    if "delta" in params:
        params["delta"] = tuple(np.broadcast_to(params["delta"], (len(sc.state_names),)).tolist())
    try:
        return ReachConfig(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad reach config: {exc}") from None


def _step_config(cfg: RunConfig) -> hi.StepConfig:
    params = {"degree": tuple(cfg.scenario.degree), **cfg.bernstein}
    params["degree"] = tuple(params["degree"])
    return hi.StepConfig(**params)


def _horizon(cfg: RunConfig, initial: IntervalBox) -> int:
    sc = cfg.scenario
    if isinstance(sc, LeftTurnScenario):
        return sc.horizon_steps(initial)
    return int(cfg.reach.get("max_steps", ReachConfig().max_steps))


def _dataset(cfg: RunConfig, seed: int | None) -> ExpertDataset:
    if cfg.dataset_path is not None:
        if not cfg.dataset_path.is_file():
            raise ConfigError(f"dataset not found: {cfg.dataset_path}")
        return ExpertDataset.from_csv(cfg.dataset_path)
    sampling = cfg.scenario.sampling
    if seed is not None:
        sampling = type(sampling)(**{**sampling.__dict__, "seed": seed})
    return cfg.scenario.generate_dataset(sampling)


def _run_reach(cfg: RunConfig, planner):
    sc = cfg.scenario
    initial = _require_initial(cfg)
    stepper = hi.PlannerStepper(planner, sc.dynamics(), sc.dt, _step_config(cfg), t0=_t0(cfg, initial))
    tag = None if isinstance(planner, hi.HierarchicalPlanner) else planner.tag
    return algorithm1(initial, _unsafe(cfg), sc.goal(), stepper, _reach_config(cfg), initial_tag=tag)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    ds = _dataset(cfg, args.seed if args.seed is not None else cfg.seed)
    path = out / "dataset.csv"
    ds.to_csv(path, cfg.scenario.state_names)
    hist = ds.label_histogram(len(cfg.scenario.behaviors))
    total = max(1, len(ds))
    for k, name in enumerate(cfg.scenario.behaviors, start=1):
        print(f"{name}: {hist.get(k, 0)} ({100.0 * hist.get(k, 0) / total:.1f}%)")
    print(f"wrote {len(ds)} samples to {path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    seed = args.seed if args.seed is not None else cfg.seed
    ds = _dataset(cfg, seed)
    motion_cfg = TrainConfig(**{"seed": seed, **cfg.training})
    behavior_cfg = None
    if cfg.behavior_training:
        behavior_cfg = TrainConfig(**{"seed": seed, "learning_rate": 0.003, "optimizer": "adam",
                                      **cfg.behavior_training})
    trigger = _trigger(cfg) if cfg.trigger is not None else None
    res = hi.train_planners(cfg.scenario, ds, motion_cfg, behavior_cfg, trigger)
    written = hi.save_bundle(res.hierarchical, out, "hierarchical")
    written += hi.save_bundle(res.single, out, "single")
    for name, mse in res.mse.items():
        print(f"mse {name}: {mse:.6g}")
    print(f"behavior accuracy: {res.behavior_accuracy:.4f}")
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Path, args) -> int:
    planner = _load_planner(cfg, args.planner)
    rs = _run_reach(cfg, planner)
    export_csv(rs, out / "reach.csv")
    export_metadata(rs, out / "reach_meta.json", scenario=cfg.scenario.name)
    print(f"verdict: {rs.verdict}" + (f" ({rs.reason})" if rs.reason else ""))
    return EXIT_OK if rs.verdict == "Safe" else EXIT_UNCERTAIN


def cmd_falsify(cfg: RunConfig, out: Path, args) -> int:
    sc = cfg.scenario
    planner = _load_planner(cfg, args.planner)
    initial = _require_initial(cfg)
    unsafe = _unsafe(cfg)
    if unsafe is None:
        raise ConfigError("falsify needs an unsafe region")
    schedule = cfg.falsify.get("schedule", list(DEFAULT_SCHEDULE))
    if args.samples is not None:
        schedule = [c for c in schedule if c < args.samples] + [args.samples]
    report = falsify(sc.dynamics(), planner, initial, unsafe, schedule=schedule,
                     horizon_steps=_horizon(cfg, initial), dt=sc.dt,
                     seed=args.seed if args.seed is not None else cfg.seed,
                     substeps=int(cfg.falsify.get("substeps", 10)), workers=args.workers,
                     u_bounds=sc.u_bounds)
    text = report.to_text(sc.state_names)
    (out / "falsify.txt").write_text(text)
    print(text, end="")
    return EXIT_UNCERTAIN if report.found else EXIT_OK


def cmd_simulate(cfg: RunConfig, out: Path, args) -> int:
    sc = cfg.scenario
    planner = _load_planner(cfg, args.planner)
    initial = _require_initial(cfg)
    n = args.samples if args.samples is not None else int(cfg.simulate.get("samples", 100))
    seed = args.seed if args.seed is not None else cfg.seed
    x0 = sample_box(initial, n, seed=seed)
    batch = simulate_batch(sc.dynamics(), planner, x0, _horizon(cfg, initial), sc.dt, sc.u_bounds)
    export_trajectories(batch, out / "trajectories.csv", sc.state_names)
    print(f"wrote {n} trajectories to {out / 'trajectories.csv'}")
    reach_csv = Path(args.reach) if args.reach else out / "reach.csv"
    if reach_csv.is_file():
        rs = load_reach(reach_csv, reach_csv.with_name("reach_meta.json"))
        report = containment_check(batch, rs, goal=sc.goal())
        with open(out / "trajectories_containment.txt", "w") as fh:
            fh.write(report.to_text())
        print(report.to_text(), end="")
        return EXIT_OK if report.ok else EXIT_UNCERTAIN
    return EXIT_OK


def cmd_merge_window(cfg: RunConfig, out: Path, args) -> int:
    sc = cfg.scenario
    if not isinstance(sc, MergingScenario):
        raise ConfigError("merge-window needs the merging scenario")
    planner = _load_planner(cfg, args.planner)
    rs = _run_reach(cfg, planner)
    export_csv(rs, out / "reach.csv")
    export_metadata(rs, out / "reach_meta.json", scenario=sc.name)
    d_th = float(cfg.merge.get("d_th", sc.d_th))
    window = merging_unsafe_window(rs, d_th, sc, substeps=int(cfg.merge.get("substeps", 10)),
                                   grid=float(cfg.merge.get("grid", 1.0)))
    lines = [f"verdict: {rs.verdict}" + (f" ({rs.reason})" if rs.reason else ""), f"d_th: {d_th!r}"]
    lines.append("window: none" if window is None else f"window: [{window[0]!r}, {window[1]!r}]")
    text = "\n".join(lines) + "\n"
    (out / "merge_window.txt").write_text(text)
    print(text, end="")
    return EXIT_OK if window is not None else EXIT_UNCERTAIN


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "verify": cmd_verify,
    "falsify": cmd_falsify,
    "simulate": cmd_simulate,
    "merge-window": cmd_merge_window,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierreach", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--workers", type=int, default=1, help="worker processes for falsification")
        p.add_argument("--samples", type=int, default=None, help="sample count (simulate, falsify)")
        if name not in ("gen-data", "train"):
            p.add_argument("--planner", default=None, help="planner bundle, overrides the config")
        if name == "simulate":
            p.add_argument("--reach", default=None, help="reach CSV to check containment against")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1 or (args.samples is not None and args.samples < 1):
            raise ConfigError("--workers and --samples must be positive")
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
