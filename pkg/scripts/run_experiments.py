"""Run every experiment through the CLI and write the outputs under runs/.

Planners are trained first (skipped when a bundle already exists, unless
--retrain is given), then each reach, simulation and falsification run uses
the bundles referenced by its config.
"""

import argparse
import sys
import time
from pathlib import Path

from hierreach.cli import main

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
RUNS = ROOT / "runs"

# (output dir, subcommand, config, extra args)
EXPERIMENTS = [
    ("left_turn_fixed_window", "verify", "left_turn_fixed_window.json", []),
    ("left_turn_fixed_window", "simulate", "left_turn_fixed_window.json", ["--reach", "{out}/reach.csv"]),
    ("left_turn_changing_window", "verify", "left_turn_changing_window.json", []),
    ("left_turn_changing_window", "simulate", "left_turn_changing_window.json", ["--reach", "{out}/reach.csv"]),
    ("left_turn_changing_window_once", "verify", "left_turn_changing_window_once.json", []),
    ("left_turn_single_net", "verify", "left_turn_single_net.json", []),
    ("left_turn_single_net", "falsify", "left_turn_single_net.json", ["--samples", "100000"]),
    ("merging_reach", "merge-window", "merging.json", []),
    ("merging_reach", "simulate", "merging.json", ["--reach", "{out}/reach.csv"]),
    ("merging_single", "merge-window", "merging_single.json", []),
]


def run(*args) -> int:
    started = time.time()
    code = main([str(a) for a in args])
    print(f"[{code}] {' '.join(str(a) for a in args[:1])} {args[2] if len(args) > 2 else ''} "
          f"({time.time() - started:.1f}s)", flush=True)
    return code


def main_(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--retrain", action="store_true", help="train even if bundles exist")
    ap.add_argument("--only", nargs="*", help="restrict to these output directory names")
    args = ap.parse_args(argv)

    for name in ("left_turn", "merging"):
        out = RUNS / name
        if args.retrain or not (out / "hierarchical.json").exists():
            if run("train", "--config", CONFIGS / f"{name}_train.json", "--out", out) != 0:
                return 1

    failures = []
    for out_name, command, config, extra in EXPERIMENTS:
        if args.only and out_name not in args.only:
            continue
        out = RUNS / out_name
        extra = [e.format(out=out) for e in extra]
        code = run(command, "--config", CONFIGS / config, "--out", out, *extra)
        # exit code 1 is a result (Uncertain, counterexample, no window), not a crash
        if code not in (0, 1):
            failures.append((out_name, command, code))
    for f in failures:
        print("failed:", *f, file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main_())
