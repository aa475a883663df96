"""Session fixtures: planners are trained once through the CLI and shared."""

from pathlib import Path

import pytest

from hierreach.cli import main
from hierreach.hierarchy import load_planner

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def run_cli(*args) -> int:
    return main([str(a) for a in args])


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("hierreach")


def _train(workdir, name):
    out = workdir / name
    if not (out / "hierarchical.json").exists():
        assert run_cli("train", "--config", CONFIGS / f"{name}_train.json", "--out", out) == 0
    return out


@pytest.fixture(scope="session")
def left_turn_bundle(workdir):
    return _train(workdir, "left_turn")


@pytest.fixture(scope="session")
def merging_bundle(workdir):
    return _train(workdir, "merging")


@pytest.fixture(scope="session")
def lt_planner(left_turn_bundle):
    return load_planner(left_turn_bundle / "hierarchical.json")


@pytest.fixture(scope="session")
def lt_single(left_turn_bundle):
    return load_planner(left_turn_bundle / "single.json")


@pytest.fixture(scope="session")
def mg_planner(merging_bundle):
    return load_planner(merging_bundle / "hierarchical.json")


class CliRun:
    """Output directory and exit code of one CLI invocation."""

    def __init__(self, out: Path, code: int):
        self.out = out
        self.code = code


def cli_run(workdir, name, command, config, bundle, *extra) -> CliRun:
    out = workdir / name
    code = run_cli(command, "--config", CONFIGS / config, "--out", out, "--planner", bundle, *extra)
    return CliRun(out, code)


@pytest.fixture(scope="session")
def fixed_window_run(workdir, left_turn_bundle):
    return cli_run(workdir, "fixed_window", "verify", "left_turn_fixed_window.json",
                   left_turn_bundle / "hierarchical.json")


@pytest.fixture(scope="session")
def changing_window_run(workdir, left_turn_bundle):
    return cli_run(workdir, "changing_window", "verify", "left_turn_changing_window.json",
                   left_turn_bundle / "hierarchical.json")


@pytest.fixture(scope="session")
def changing_window_once_run(workdir, left_turn_bundle):
    return cli_run(workdir, "changing_window_once", "verify", "left_turn_changing_window_once.json",
                   left_turn_bundle / "hierarchical.json")


@pytest.fixture(scope="session")
def merging_run(workdir, merging_bundle):
    return cli_run(workdir, "merging_window", "merge-window", "merging.json", merging_bundle / "hierarchical.json")


@pytest.fixture(scope="session")
def merging_single_run(workdir, merging_bundle):
    return cli_run(workdir, "merging_single", "merge-window", "merging_single.json", merging_bundle / "single.json")


@pytest.fixture(scope="session")
def single_net_verify_run(workdir, left_turn_bundle):
    return cli_run(workdir, "single_net_verify", "verify", "left_turn_single_net.json",
                   left_turn_bundle / "single.json")


@pytest.fixture(scope="session")
def single_net_falsify_run(workdir, left_turn_bundle):
    return cli_run(workdir, "single_net_falsify", "falsify", "left_turn_single_net.json",
                   left_turn_bundle / "single.json", "--samples", 100000)


# acceptance outcomes, printed together at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def report_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}: {detail}")
