"""Concrete closed-loop simulation, falsification and reach-set containment checks.

Simulation uses the same closed-form step as the reachability layer
(``reach.step_points`` followed by the dynamics reset), so a state escaping
the computed reach set points at an abstraction bug rather than a model
mismatch.
"""

from __future__ import annotations

import csv
import logging
import multiprocessing
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .hierarchy import Executor, executor_for
from .reach import AffineStepDynamics, Clusters, IntervalBox, ReachSet, UnsafeRegion, step_points

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (100, 10_000, 100_000)


def _num(v) -> str:
    return repr(float(v))


@dataclass
class TrajectoryBatch:
    """N closed-loop trajectories of K steps."""

    states: np.ndarray  # (N, K+1, n)
    controls: np.ndarray  # (N, K)
    tags: np.ndarray  # (N, K) active behavior index per step, 0 for a single network
    times: np.ndarray  # (N, K+1)
    dt: float
    tag_names: tuple[str, ...] = ()

    def __len__(self):
        return len(self.states)

    @property
    def n_steps(self) -> int:
        return self.controls.shape[1]

    def trajectory(self, i: int) -> "Trajectory":
        return Trajectory(self.times[i], self.states[i], self.controls[i], self.tags[i], self.dt, self.tag_names)

    def tag_name(self, k: int) -> str:
        if k == 0 or not self.tag_names:
            return "single"
        return self.tag_names[k - 1]


@dataclass
class Trajectory:
    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (K+1, n)
    controls: np.ndarray  # (K,)
    tags: np.ndarray  # (K,)
    dt: float
    tag_names: tuple[str, ...] = ()

    def planner_tags(self) -> list[str]:
        return [("single" if k == 0 or not self.tag_names else self.tag_names[k - 1]) for k in self.tags]


def _times(dyn: AffineStepDynamics, states: np.ndarray, dt: float) -> np.ndarray:
    if "t" in dyn.names:
        return states[..., dyn.index("t")].copy()
    return np.broadcast_to(np.arange(states.shape[1]) * dt, states.shape[:2]).copy()


def _tag_names(planner) -> tuple[str, ...]:
    return tuple(getattr(planner, "behaviors", ()))


def simulate_batch(dyn: AffineStepDynamics, planner, x0, horizon_steps: int, dt: float,
                   u_bounds: tuple[float, float] | None = None) -> TrajectoryBatch:
    """Closed-loop rollouts from each row of ``x0`` with u held constant per step."""
    executor = planner if isinstance(planner, Executor) else executor_for(planner)
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    if not np.all(np.isfinite(x)):
        raise ValueError("initial states must be finite")
    states = [x]
    controls, tags_out = [], []
    tags = None
    for k in range(1, horizon_steps + 1):
        u, tags = executor.controls(x, k, tags)
        if u_bounds is not None:
            u = np.clip(u, *u_bounds)
        nxt = step_points(dyn, x, u, dt)
        x = np.asarray(dyn.apply_reset(nxt, nxt)[0])
        states.append(x)
        controls.append(u)
        tags_out.append(np.asarray(tags, dtype=int))
    st = np.stack(states, axis=1)
    n = len(st)
    ctl = np.stack(controls, axis=1) if controls else np.zeros((n, 0))
    tg = np.stack(tags_out, axis=1) if tags_out else np.zeros((n, 0), dtype=int)
    names = _tag_names(getattr(executor, "planner", None))
    return TrajectoryBatch(st, ctl, tg, _times(dyn, st, dt), dt, names)


def simulate(dyn: AffineStepDynamics, planner, x0, horizon_steps: int, dt: float,
             u_bounds: tuple[float, float] | None = None) -> Trajectory:
    """Single closed-loop trajectory from ``x0``."""
    return simulate_batch(dyn, planner, np.asarray(x0, dtype=float)[None], horizon_steps, dt, u_bounds).trajectory(0)


def sample_box(box: IntervalBox, count: int, seed: int = 0) -> np.ndarray:
    """Scrambled Sobol points in the box (fixed coordinates where the box is flat)."""
    if not (np.all(np.isfinite(box.lo)) and np.all(np.isfinite(box.hi))):
        raise ValueError("cannot sample an unbounded box")
    dims = box.active_dims
    out = np.tile(box.lo, (count, 1))
    if len(dims) == 0 or count == 0:
        return out
    sampler = qmc.Sobol(d=len(dims), scramble=True, seed=seed)
    with warnings.catch_warnings():
        # counts need not be powers of two
        warnings.simplefilter("ignore", UserWarning)
        u = sampler.random(count)
    out[:, dims] = qmc.scale(u, box.lo[dims], box.hi[dims])
    return out


# --------------------------------------------------------------------------
# falsification


@dataclass
class Counterexample:
    x0: np.ndarray
    trajectory: Trajectory
    step: int  # 0 when the initial state is unsafe, else the step during which the violation occurs
    time: float
    state: np.ndarray
    sample_index: int
    sample_count: int


@dataclass
class FalsifyReport:
    counterexample: Counterexample | None
    checked: list[tuple[int, int]] = field(default_factory=list)  # (count, violations found)

    @property
    def found(self) -> bool:
        return self.counterexample is not None

    def to_text(self, state_names=None) -> str:
        lines = [f"samples {c}: {v} violating" for c, v in self.checked]
        ce = self.counterexample
        if ce is None:
            lines.append("counterexample: none")
        else:
            names = state_names or [f"x{i}" for i in range(len(ce.x0))]
            lines.append(f"counterexample: sample {ce.sample_index} of {ce.sample_count}")
            lines.append("x0: " + ", ".join(f"{n}={_num(v)}" for n, v in zip(names, ce.x0)))
            lines.append(f"violation at step {ce.step}, t={_num(ce.time)}")
            lines.append("state: " + ", ".join(f"{n}={_num(v)}" for n, v in zip(names, ce.state)))
        return "\n".join(lines) + "\n"


def first_violation(dyn: AffineStepDynamics, batch: TrajectoryBatch, unsafe: UnsafeRegion, substeps: int = 10):
    """Per trajectory, the first (step, sub-step fraction) at which the flow meets ``unsafe``.

    Besides step endpoints the flow is sampled at ``substeps`` points inside
    each step, so every reported hit is a state the continuous trajectory
    actually visits.  Returns arrays (step, fraction), step = -1 when none.
    """
    n = len(batch)
    step = np.full(n, -1)
    frac = np.zeros(n)
    hit0 = unsafe.contains(batch.states[:, 0])
    step[hit0] = 0
    fracs = np.arange(1, substeps + 1) / substeps
    for k in range(batch.n_steps):
        open_ = step < 0
        if not open_.any():
            break
        x = batch.states[open_, k]
        u = batch.controls[open_, k]
        found = np.zeros(len(x), dtype=bool)
        where = np.zeros(len(x))
        for f in fracs:
            pts = step_points(dyn, x, u, f * batch.dt)
            if f == 1.0:
                pts = np.asarray(dyn.apply_reset(pts, pts)[0])
            h = unsafe.contains(pts) & ~found
            where[h] = f
            found |= h
        idx = np.flatnonzero(open_)[found]
        step[idx] = k + 1
        frac[idx] = where[found]
    return step, frac


_SHARED: dict = {}


def _init_worker(shared: dict) -> None:
    # fork start method: the dynamics (which may hold a closure) is inherited, not pickled
    _SHARED.update(shared)


def _falsify_chunk(bounds):
    a, b = bounds
    sh = _SHARED
    batch = simulate_batch(sh["dyn"], sh["planner"], sh["x0"][a:b], sh["horizon"], sh["dt"], sh["u_bounds"])
    return first_violation(sh["dyn"], batch, sh["unsafe"], sh["substeps"])


def falsify(dyn: AffineStepDynamics, planner, initial: IntervalBox, unsafe: UnsafeRegion,
            schedule=DEFAULT_SCHEDULE, horizon_steps: int = 20, dt: float = 0.5, seed: int = 0,
            substeps: int = 10, chunk: int = 20_000, workers: int = 1,
            u_bounds: tuple[float, float] | None = None) -> FalsifyReport:
    """Monte-Carlo search for an unsafe closed-loop trajectory from ``initial``.

    Each count in the ascending ``schedule`` draws a fresh scrambled Sobol
    set; the first violating sample (lowest index) of the first count with
    any violation is returned.
    """
    counts = list(schedule)
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ValueError("sample counts must be strictly ascending")
    report = FalsifyReport(None)
    for j, count in enumerate(counts):
        x0 = sample_box(initial, count, seed=seed + j)
        shared = {"dyn": dyn, "planner": planner, "x0": x0, "horizon": horizon_steps, "dt": dt,
                  "unsafe": unsafe, "substeps": substeps, "u_bounds": u_bounds}
        ranges = [(a, min(a + chunk, count)) for a in range(0, count, chunk)]
        if workers > 1 and len(ranges) > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                                     initializer=_init_worker, initargs=(shared,)) as pool:
                parts = list(pool.map(_falsify_chunk, ranges))
        else:
            _init_worker(shared)
            parts = [_falsify_chunk(r) for r in ranges]
            _SHARED.clear()
        step = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, int)
        bad = np.flatnonzero(step >= 0)
        report.checked.append((count, int(len(bad))))
        log.info("falsify: %d samples, %d violating", count, len(bad))
        if len(bad):
            i = int(bad[0])
            traj = simulate(dyn, planner, x0[i], horizon_steps, dt, u_bounds)
            s = int(step[i])
            frac = float(np.concatenate([p[1] for p in parts])[i])
            if s == 0:
                state = traj.states[0]
            else:
                state = step_points(dyn, traj.states[s - 1], traj.controls[s - 1], frac * dt)
                if frac == 1.0:
                    state = np.asarray(dyn.apply_reset(state, state)[0])
            time = float(traj.times[0] + (s - 1 + frac) * dt) if s else float(traj.times[0])
            report.counterexample = Counterexample(x0[i], traj, s, time, np.asarray(state), i, count)
            return report
    return report


# --------------------------------------------------------------------------
# containment


@dataclass
class ContainmentReport:
    contained: int  # trajectories with every checked state inside the reach set
    total: int
    checked_states: int
    violations: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_text(self) -> str:
        lines = [f"contained {self.contained}/{self.total} trajectories ({self.checked_states} states checked)"]
        for v in self.violations[:20]:
            lines.append(f"violation: trajectory {v['trajectory']} step {v['step']} state {v['state']}")
        return "\n".join(lines) + "\n"


def _inside(points: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float) -> np.ndarray:
    """Whether each point lies in at least one box (with a relative tolerance)."""
    out = np.zeros(len(points), dtype=bool)
    slack = tol * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    lo_t, hi_t = lo - slack, hi + slack
    for a in range(0, len(lo), 2048):
        ge = np.all(points[:, None, :] >= lo_t[None, a : a + 2048], axis=2)
        le = np.all(points[:, None, :] <= hi_t[None, a : a + 2048], axis=2)
        out |= np.any(ge & le, axis=1)
    return out


def containment_check(trajectories, rs: ReachSet, goal: IntervalBox | None = None,
                      tol: float = 1e-9) -> ContainmentReport:
    """Check that every trajectory state at step i lies in the union of step-i segment boxes.

    States after a trajectory first enters ``goal`` are not checked, since
    the reach computation stops propagating boxes inside the goal.  Steps
    beyond the last computed step are not checked either.
    """
    if isinstance(trajectories, TrajectoryBatch):
        states = trajectories.states
    else:
        states = np.stack([t.states for t in trajectories])
    n, k1, _ = states.shape
    active = np.ones(n, dtype=bool)
    ok = np.ones(n, dtype=bool)
    violations = []
    checked = 0
    computed = set(rs.steps)
    for k in range(k1):
        if k > 0 and goal is not None:
            active &= ~goal.contains(states[:, k - 1])
        if k == 0:
            if rs.initial is None:
                continue
            lo, hi = rs.initial.lo[None], rs.initial.hi[None]
        elif k in computed:
            segs = rs.at_step(k)
            lo = np.array([s.box.lo for s in segs])
            hi = np.array([s.box.hi for s in segs])
        else:
            continue
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        inside = _inside(states[idx, k], lo, hi, tol)
        checked += len(idx)
        for i in idx[~inside]:
            ok[i] = False
            violations.append({"trajectory": int(i), "step": k, "state": states[i, k].tolist()})
    return ContainmentReport(int(ok.sum()), n, checked, violations)


# --------------------------------------------------------------------------
# branch structure of sampled bands


def sample_clusters(values, min_gap: float) -> Clusters:
    """Split sorted samples wherever consecutive values are more than ``min_gap`` apart."""
    v = np.sort(np.asarray(values, dtype=float).reshape(-1))
    if v.size == 0:
        return Clusters([], [])
    gaps = np.diff(v)
    cut = np.flatnonzero(gaps > min_gap)
    starts = np.concatenate([[0], cut + 1])
    ends = np.concatenate([cut, [v.size - 1]])
    return Clusters([(float(v[a]), float(v[b])) for a, b in zip(starts, ends)], [float(g) for g in gaps[cut]])


def band_clusters(states: np.ndarray, step: int, dim: int, min_gap: float) -> Clusters:
    """Clusters of a sampled trajectory band (N, K+1, n) at one step, projected onto ``dim``."""
    return sample_clusters(np.asarray(states)[:, step, dim], min_gap)


def divergence_step(states: np.ndarray, dim: int, min_gap: float) -> int | None:
    """First step at which the sampled band splits into two or more clusters."""
    states = np.asarray(states)
    for k in range(states.shape[1]):
        if len(band_clusters(states, k, dim, min_gap)) > 1:
            return k
    return None


# --------------------------------------------------------------------------
# export


def export_trajectories(batch: TrajectoryBatch, path, state_names) -> None:
    """CSV with one row per (trajectory, step): state at the step start, applied u, active tag.

    The final state of each trajectory gets a row with empty u and tag.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        # a state dimension may itself be called "t"
        w.writerow(["trajectory", "step", "time", *state_names, "u", "tag"])
        for i in range(len(batch)):
            for k in range(batch.n_steps + 1):
                row = [i, k, _num(batch.times[i, k]), *[_num(v) for v in batch.states[i, k]]]
                if k < batch.n_steps:
                    row += [_num(batch.controls[i, k]), batch.tag_name(int(batch.tags[i, k]))]
                else:
                    row += ["", ""]
                w.writerow(row)
