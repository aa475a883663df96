"""The unprotected left turn and highway merging case studies.

Each scenario bundles its dynamics, actuator bounds, named initial sets,
unsafe and goal sets, and a scripted expert (decision rule plus one tracking
law per behavior) used to generate training data.  Expert functions are
vectorised over a batch of states (N, n).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .nn import TrainingDataset
from .reach import AffineStepDynamics, IntervalBox, ReachSet, UnsafeRegion, step_points


@dataclass
class ExpertDataset:
    states: np.ndarray  # (N, n)
    labels: np.ndarray  # (N,) expert decision at the state, 1..N_behaviors
    modes: np.ndarray  # (N,) behavior whose control law produced u
    controls: np.ndarray  # (N,)

    def __len__(self):
        return len(self.states)

    def label_histogram(self, n_behaviors: int) -> dict[int, int]:
        return {k: int(np.sum(self.labels == k)) for k in range(1, n_behaviors + 1)}

    def for_motion(self, scenario: "Scenario", behavior: int) -> TrainingDataset:
        sel = self.modes == behavior
        return TrainingDataset(self.states[sel], _to_raw(self.controls[sel], scenario.u_bounds),
                               scenario.norm_lo, scenario.norm_hi)

    def for_single(self, scenario: "Scenario") -> TrainingDataset:
        sel = self.modes == self.labels
        return TrainingDataset(self.states[sel], _to_raw(self.controls[sel], scenario.u_bounds),
                               scenario.norm_lo, scenario.norm_hi)

    def for_behavior(self, scenario: "Scenario") -> TrainingDataset:
        n = len(scenario.behaviors)
        centers = -1.0 + (2.0 * np.arange(n) + 1.0) / n
        return TrainingDataset(self.states, centers[self.labels - 1], scenario.norm_lo, scenario.norm_hi)

    def to_csv(self, path, names) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*names, "label", "mode", "u"])
            for x, lab, mode, u in zip(self.states, self.labels, self.modes, self.controls):
                w.writerow([*(repr(float(v)) for v in x), int(lab), int(mode), repr(float(u))])

    @classmethod
    def from_csv(cls, path) -> "ExpertDataset":
        with open(path) as fh:
            rows = list(csv.reader(fh))
        body = np.array(rows[1:], dtype=float)
        return cls(body[:, :-3], body[:, -3].astype(int), body[:, -2].astype(int), body[:, -1])


def _to_raw(u, bounds):
    lo, hi = bounds
    return 2.0 * (np.asarray(u) - lo) / (hi - lo) - 1.0


@dataclass
class SamplingConfig:
    """Initial-state ranges for expert rollouts; one [lo, hi] pair per state dim."""

    ranges: list
    rollouts: int = 400
    horizon: int = 24
    seed: int = 0
    # additional (ranges, rollouts) pairs sampled densely, e.g. around decision boundaries
    focus: list = field(default_factory=list)


class Scenario:
    name: str
    state_names: tuple[str, ...]
    behaviors: tuple[str, ...]

    # subclasses provide: dynamics, decide, control, initial_sets, goal, sampling,
    # norm_lo/norm_hi, degree, delta, u_bounds

    def behavior_index(self, name: str) -> int:
        return self.behaviors.index(name) + 1

    def initial_set(self, name: str) -> IntervalBox:
        try:
            return IntervalBox.from_bounds(self.initial_sets[name])
        except KeyError:
            raise KeyError(f"scenario {self.name!r} has no initial set {name!r}; "
                           f"known: {sorted(self.initial_sets)}") from None

    def expert_policy(self, x):
        """Decision and control of the expert at concrete state(s)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        labels = self.decide(x)
        u = self.control(x, labels)
        return labels, u

    def step_states(self, x, u):
        dyn = self.dynamics()
        nxt = step_points(dyn, x, u, self.dt)
        return np.asarray(dyn.apply_reset(nxt, nxt)[0])

    def rollout(self, x0, horizon: int, mode=None, redecide_every: int | None = None):
        """Expert rollouts from states x0 (N, n).

        ``mode`` forces one behavior for the whole rollout; otherwise the
        expert decides at step 0 (and every ``redecide_every`` steps) and
        keeps its behavior in between.
        Returns states (N, horizon+1, n), modes (N, horizon), controls (N, horizon).
        """
        x = np.atleast_2d(np.asarray(x0, dtype=float))
        states = [x]
        modes, controls = [], []
        current = None
        for i in range(horizon):
            if mode is not None:
                current = np.full(len(x), mode)
            elif current is None or (redecide_every and i % redecide_every == 0):
                current = self.decide(x)
            u = self.control(x, current)
            x = self.step_states(x, u)
            states.append(x)
            modes.append(current)
            controls.append(u)
        return np.stack(states, axis=1), np.stack(modes, axis=1), np.stack(controls, axis=1)

    def generate_dataset(self, sampling: SamplingConfig | None = None) -> ExpertDataset:
        """Roll out every behavior (forced) and the expert itself from sampled states.

        Each visited state is recorded with the expert's decision there, the
        rollout behavior, and the control that behavior applied.
        """
        cfg = sampling or self.sampling
        rng = np.random.default_rng(cfg.seed)
        draws = [(cfg.ranges, cfg.rollouts)] + [(r, c) for r, c in cfg.focus]
        x0 = np.concatenate([self._fix_initial(IntervalBox.from_bounds(r).sample(rng, c)) for r, c in draws])
        parts = []
        for k in range(1, len(self.behaviors) + 1):
            xs, ms, us = self.rollout(x0, cfg.horizon, mode=k)
            parts.append((xs[:, :-1], ms, us))
        xs, ms, us = self.rollout(x0, cfg.horizon)
        parts.append((xs[:, :-1], ms, us))
        states = np.concatenate([p[0].reshape(-1, xs.shape[-1]) for p in parts])
        modes = np.concatenate([p[1].reshape(-1) for p in parts]).astype(int)
        controls = np.concatenate([p[2].reshape(-1) for p in parts])
        labels = self.decide(states).astype(int)
        return ExpertDataset(states, labels, modes, controls)

    def _fix_initial(self, x0):
        return x0


# --------------------------------------------------------------------------
# unprotected left turn


def tau_schedule_reset(schedule, tmin_idx=2, tmax_idx=3, t_idx=4):
    """Reset applying a prediction-window schedule [(time, tau_min, tau_max), ...]."""
    times = np.array([s[0] for s in schedule], dtype=float)
    tmins = np.array([s[1] for s in schedule], dtype=float)
    tmaxs = np.array([s[2] for s in schedule], dtype=float)

    def lookup(t):
        return np.searchsorted(times, t + 1e-9, side="right") - 1

    def reset(lo, hi):
        lo = np.array(lo, dtype=float)
        hi = np.array(hi, dtype=float)
        k_lo = lookup(lo[..., t_idx])
        k_hi = lookup(hi[..., t_idx])
        active = k_lo >= 0
        if not np.any(active):
            return lo, hi
        k_lo_c = np.clip(k_lo, 0, None)
        k_hi_c = np.clip(k_hi, 0, None)
        # schedule is monotone: tau_min nondecreasing, tau_max nonincreasing
        lo[..., tmin_idx] = np.where(active, tmins[k_lo_c], lo[..., tmin_idx])
        hi[..., tmin_idx] = np.where(active, tmins[k_hi_c], hi[..., tmin_idx])
        lo[..., tmax_idx] = np.where(active, tmaxs[k_hi_c], lo[..., tmax_idx])
        hi[..., tmax_idx] = np.where(active, tmaxs[k_lo_c], hi[..., tmax_idx])
        return lo, hi

    return reset


def check_schedule(schedule) -> None:
    """Raise unless the window only tightens and tau_min <= tau_max throughout."""
    prev = None
    for t, a, b in schedule:
        if a > b:
            raise ValueError(f"tau_min {a} > tau_max {b} at t={t}")
        if prev is not None:
            if t <= prev[0]:
                raise ValueError("schedule times must increase")
            if a < prev[1] or b > prev[2]:
                raise ValueError(f"window widens at t={t}: [{prev[1]}, {prev[2]}] -> [{a}, {b}]")
        prev = (t, a, b)


CHANGING_WINDOW_SCHEDULE = [(6.0, 13.0, 21.0), (7.0, 15.0, 21.0), (8.0, 17.0, 21.0), (9.0, 19.0, 21.0), (10.0, 20.0, 21.0)]


@dataclass
class LeftTurnScenario(Scenario):
    name: str = "left_turn"
    dt: float = 0.5
    p_enter: float = 4.5
    p_exit: float = 14.0
    u_bounds: tuple = (-4.0, 3.0)
    t_green: float = 20.0
    t_yellow: float = 3.0
    t_red: float = 20.0
    signal_offset: float = 0.0
    margin: float = 0.5
    proceed_margin: float = 0.92
    crawl_speed: float = 5.0
    comfort_decel: float = 2.0
    yield_buffer: float = 1.5
    v_cruise: float = 14.0
    accel: float = 2.0
    k_track: float = 1.0
    stop_decel: float = 3.0
    k_stop: float = 1.5
    stop_line: float = 0.0
    schedule: list = field(default_factory=list)
    horizon_t: float = 16.0
    initial_sets: dict = field(default_factory=lambda: {
        "single_net": [[-60.4, -60.3], [10.5, 10.51], [14, 14], [16, 16], [6, 6]],
        "fixed_window": [[-64.35, -64.05], [10.5, 10.51], [14, 14], [16, 16], [6, 6]],
        "changing_window": [[-60.0, -59.7], [10.5, 10.51], [13, 13], [21, 21], [6, 6]],
        "branching": [[-110.0, -30.0], [6.0, 8.0], [17, 17], [19, 19], [8, 8]],
    })
    sampling: SamplingConfig = field(default_factory=lambda: SamplingConfig(
        ranges=[[-110.0, -25.0], [5.0, 13.0], [12.0, 20.0], [0.0, 8.0], [5.0, 9.0]],
        rollouts=400, horizon=24, seed=0,
        # dense coverage where the decision changes within a few meters
        focus=[
            ([[-75.0, -55.0], [10.0, 11.0], [13.5, 14.5], [1.5, 2.5], [5.5, 6.5]], 400),
            ([[-66.0, -56.0], [10.4, 10.6], [13.9, 14.1], [1.9, 2.1], [5.9, 6.1]], 400),
        ],
    ))
    norm_lo: np.ndarray = field(default_factory=lambda: np.array([-110.0, 0.0, 10.0, 10.0, 0.0]))
    norm_hi: np.ndarray = field(default_factory=lambda: np.array([60.0, 16.0, 24.0, 24.0, 24.0]))
    degree: tuple = (2, 2, 1, 1, 1)
    delta: tuple = (0.5, 0.1, 1.0, 1.0, 1.0)

    state_names = ("p1", "v1", "tau_min", "tau_max", "t")
    behaviors = ("stop", "yield", "proceed")

    def __post_init__(self):
        if self.schedule:
            check_schedule(self.schedule)

    def _fix_initial(self, x0):
        # sampling range for tau_max is an offset above tau_min
        x0 = x0.copy()
        x0[:, 3] = x0[:, 2] + 1.0 + x0[:, 3]
        return x0

    def dynamics(self) -> AffineStepDynamics:
        A = np.zeros((5, 5))
        A[0, 1] = 1.0
        B = np.array([0.0, 1.0, 0.0, 0.0, 0.0])
        c = np.array([0.0, 0.0, 0.0, 0.0, 1.0])
        reset = tau_schedule_reset(self.schedule) if self.schedule else None
        return AffineStepDynamics(A, B, c, self.state_names, reset)

    def red_onset(self, t):
        """Time the light next turns red (t itself while red)."""
        t = np.asarray(t, dtype=float)
        cycle = self.t_green + self.t_yellow + self.t_red
        phase = np.mod(t - self.signal_offset, cycle)
        go_phase = self.t_green + self.t_yellow
        return np.where(phase < go_phase, t + (go_phase - phase), t)

    def crossing_times(self, x):
        """Earliest entry, earliest clearance and latest entry times of the conflict zone.

        Earliest times hold the current speed (never below crawl speed);
        the latest entry brakes at the comfortable rate down to crawl speed
        and crawls from there.
        """
        p, v, tmin, tmax, t = np.atleast_2d(x).T
        vp = np.maximum(v, self.crawl_speed)
        enter = t + (self.p_enter - p) / vp
        clear = t + (self.p_exit - p) / vp
        dist = self.p_enter - p
        v0 = np.maximum(v, self.crawl_speed)
        t_brake = (v0 - self.crawl_speed) / self.comfort_decel
        d_brake = (v0 ** 2 - self.crawl_speed ** 2) / (2.0 * self.comfort_decel)
        late_braking = t + t_brake + (dist - d_brake) / self.crawl_speed
        # a car that cannot shed its speed within the distance enters while still braking
        root = np.sqrt(np.maximum(v0 ** 2 - 2.0 * self.comfort_decel * np.maximum(dist, 0.0), 0.0))
        late_short = t + (v0 - root) / self.comfort_decel
        latest = np.where(d_brake <= dist, late_braking, late_short)
        return enter, clear, latest

    def decide(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p, v, tmin, tmax, t = x.T
        enter, clear, latest = self.crossing_times(x)
        t_red = self.red_onset(t)
        in_zone = p >= self.p_enter
        enter_before_red = in_zone | (enter <= t_red - self.margin)
        clear_first = clear + self.proceed_margin <= tmin
        window_passed = t >= tmax + self.margin
        can_yield = (latest >= tmax + self.margin) & (tmax + self.margin <= t_red - self.margin)
        labels = np.full(len(x), self.behavior_index("stop"))
        labels = np.where(enter_before_red & can_yield, self.behavior_index("yield"), labels)
        labels = np.where(in_zone | (enter_before_red & (clear_first | window_passed)),
                          self.behavior_index("proceed"), labels)
        return labels

    def _proceed(self, p, v, tmin, tmax, t):
        return np.clip(self.k_track * (self.v_cruise - v), self.u_bounds[0], self.accel)

    def _yield(self, p, v, tmin, tmax, t):
        rem = tmax + self.margin + self.yield_buffer - t
        go = (p >= self.p_enter) | (rem <= 0.5)
        v_ref = np.clip((self.p_enter - p) / np.maximum(rem, 0.5), 0.0, self.v_cruise)
        u = np.clip(self.k_track * (v_ref - v), self.u_bounds[0], self.accel)
        return np.where(go, self._proceed(p, v, tmin, tmax, t), u)

    def _stop(self, p, v, tmin, tmax, t):
        room = np.maximum(self.stop_line - p, 0.5)
        need = np.maximum(v, 0.0) ** 2 / (2.0 * room)
        brake = np.maximum(np.minimum(self.k_stop * v, self.stop_decel), need)
        return -np.clip(brake, 0.0, -self.u_bounds[0])

    def control(self, x, labels) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        labels = np.broadcast_to(labels, (len(x),))
        cols = x.T
        laws = {"stop": self._stop, "yield": self._yield, "proceed": self._proceed}
        u = np.zeros(len(x))
        for name, law in laws.items():
            sel = labels == self.behavior_index(name)
            if np.any(sel):
                u[sel] = law(*cols[:, sel])
        return u

    def unsafe(self, tau_min: float | None = None, tau_max: float | None = None) -> UnsafeRegion:
        """Conflict zone occupied while C2 is predicted to pass.

        With explicit window bounds this is the box p1 in [4.5, 14],
        t in [tau_min, tau_max].  Without them the window is read from the
        state's own tau dimensions, so a changing prediction moves the region.
        """
        inf = np.inf
        if tau_min is not None:
            return UnsafeRegion.from_box([self.p_enter, -inf, -inf, -inf, tau_min],
                                         [self.p_exit, inf, inf, inf, tau_max])
        normals = np.array([
            [1.0, 0, 0, 0, 0],  # p1 <= p_exit
            [-1.0, 0, 0, 0, 0],  # p1 >= p_enter
            [0, 0, 1.0, 0, -1.0],  # t >= tau_min
            [0, 0, 0, -1.0, 1.0],  # t <= tau_max
        ])
        offsets = np.array([self.p_exit, -self.p_enter, 0.0, 0.0])
        return UnsafeRegion(normals, offsets)

    def goal(self) -> IntervalBox:
        inf = np.inf
        return IntervalBox([-inf, -inf, -inf, -inf, self.horizon_t], [inf, inf, inf, inf, inf])

    def last_update_step(self, t0: float) -> int | None:
        """1-based step at which the last scheduled window change takes effect."""
        if not self.schedule:
            return None
        t_last = max(t for t, _, _ in self.schedule)
        return 1 + max(0, int(round((t_last - t0) / self.dt)))

    def horizon_steps(self, initial: IntervalBox) -> int:
        return int(round((self.horizon_t - initial.lo[4]) / self.dt))


def left_turn_unsafe(tau_min: float, tau_max: float, scenario: LeftTurnScenario | None = None) -> UnsafeRegion:
    return (scenario or LeftTurnScenario()).unsafe(tau_min, tau_max)


# --------------------------------------------------------------------------
# highway merging


@dataclass
class MergingScenario(Scenario):
    name: str = "merging"
    dt: float = 0.5
    d_th: float = 19.75
    p_end: float = 150.0
    u_bounds: tuple = (-4.0, 3.0)
    projection_time: float = 3.0
    gap_margin: float = 4.25
    lead_speed: float = 6.0
    yield_drop: float = 18.0
    yield_clear: float = 10.0
    accel: float = 2.0
    k_track: float = 1.0
    initial_sets: dict = field(default_factory=lambda: {
        "merge": [[0.0, 0.0], [25.0, 25.0], [-24.5, -23.5], [24.5, 25.5]],
    })
    sampling: SamplingConfig = field(default_factory=lambda: SamplingConfig(
        ranges=[[-3.0, 3.0], [22.0, 28.0], [-34.0, -14.0], [23.0, 27.0]],
        rollouts=400, horizon=28, seed=0,
    ))
    norm_lo: np.ndarray = field(default_factory=lambda: np.array([-10.0, 0.0, -40.0, 20.0]))
    norm_hi: np.ndarray = field(default_factory=lambda: np.array([250.0, 35.0, 350.0, 30.0]))
    degree: tuple = (2, 2, 2, 2)
    delta: tuple = (1.0, 0.5, 1.0, 0.5)

    state_names = ("p1", "v1", "p2", "v2")
    behaviors = ("yield", "proceed")

    def dynamics(self) -> AffineStepDynamics:
        A = np.zeros((4, 4))
        A[0, 1] = 1.0
        A[2, 3] = 1.0
        B = np.array([0.0, 1.0, 0.0, 0.0])
        return AffineStepDynamics(A, B, np.zeros(4), self.state_names)

    def decide(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p1, v1, p2, v2 = x.T
        projected = (p1 - p2) + (v1 - v2) * self.projection_time
        ok = projected >= self.d_th + self.gap_margin
        return np.where(ok, self.behavior_index("proceed"), self.behavior_index("yield"))

    def control(self, x, labels) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        labels = np.broadcast_to(labels, (len(x),))
        p1, v1, p2, v2 = x.T
        gap = p1 - p2
        v_proceed = v2 + self.lead_speed
        behind = gap <= -(self.d_th + self.yield_clear)
        v_yield = np.where(behind, v2, np.maximum(v2 - self.yield_drop, 0.0))
        v_ref = np.where(labels == self.behavior_index("proceed"), v_proceed, v_yield)
        return np.clip(self.k_track * (v_ref - v1), self.u_bounds[0], self.accel)

    def goal(self) -> IntervalBox:
        inf = np.inf
        return IntervalBox([self.p_end, -inf, -inf, -inf], [inf, inf, inf, inf])

    def band_region(self, p_lo: float, p_hi: float, d_th: float | None = None) -> UnsafeRegion:
        """|p1 - p2| <= d_th with p1 in [p_lo, p_hi] as four half-planes."""
        d = self.d_th if d_th is None else d_th
        normals = np.array([
            [1.0, 0, -1.0, 0],
            [-1.0, 0, 1.0, 0],
            [1.0, 0, 0, 0],
            [-1.0, 0, 0, 0],
        ])
        return UnsafeRegion(normals, np.array([d, d, p_hi, -p_lo]))


def band_p1_interval(box: IntervalBox, d_th: float, p1: int = 0, p2: int = 2):
    """p1 values at which the box meets the band |p1 - p2| <= d_th (exact), or None."""
    lo = max(box.lo[p1], box.lo[p2] - d_th)
    hi = min(box.hi[p1], box.hi[p2] + d_th)
    return (lo, hi) if lo <= hi else None


def segment_sub_boxes(seg, dyn: AffineStepDynamics, substeps: int):
    """Hulls of the segment's flowpipe over ``substeps`` equal time slices.

    Falls back to the segment box when the segment carries no start state.
    """
    from .reach import step_affine

    if getattr(seg, "start_box", None) is None or substeps <= 1:
        return [seg.box]
    h = (seg.t_hi - seg.t_lo) / substeps
    out = []
    box = seg.start_box
    for k in range(substeps):
        span, end = step_affine(dyn, box, seg.u_range, h)
        # intersect with the segment hull, which may be tighter
        out.append(span.intersect(seg.box) or span)
        box = end
    return out


def merging_unsafe_window(rs: ReachSet, d_th: float, scenario: MergingScenario | None = None,
                          substeps: int = 10, grid: float = 1.0):
    """Widest p1 window [lo, hi] within [0, p_end] whose band region misses the reach set.

    Window endpoints lie on a ``grid``-metre lattice.  Returns None when no
    window exists or the reach set is incomplete.
    """
    sc = scenario or MergingScenario()
    if rs.verdict != "Safe":
        return None
    dyn = sc.dynamics()
    bad = []
    for seg in rs.segments:
        for box in segment_sub_boxes(seg, dyn, substeps):
            iv = band_p1_interval(box, d_th)
            if iv is not None:
                bad.append(iv)
    # initial set counts as reached too
    if rs.initial is not None:
        iv = band_p1_interval(rs.initial, d_th)
        if iv is not None:
            bad.append(iv)
    return widest_free_window(bad, 0.0, sc.p_end, grid)


def widest_free_window(bad, lo: float, hi: float, grid: float = 1.0):
    """Widest [a, b] with lattice endpoints in [lo, hi] meeting no closed interval of ``bad``."""
    from .reach import merge_intervals

    blocks = merge_intervals([iv for iv in bad if iv[1] >= lo and iv[0] <= hi]).intervals
    # free stretches: (left, left_open, right, right_open)
    free = []
    left, left_open = lo, False
    for a, b in blocks:
        free.append((left, left_open, a, True))
        left, left_open = b, True
    free.append((left, left_open, hi, False))
    best = None
    for left, lopen, right, ropen in free:
        a = math.ceil(left / grid) * grid
        if lopen and a <= left:
            a += grid
        b = math.floor(right / grid) * grid
        if ropen and b >= right:
            b -= grid
        a, b = max(a, lo), min(b, hi)
        if b > a and (best is None or b - a > best[1] - best[0]):
            best = (float(a), float(b))
    return best


# --------------------------------------------------------------------------
# config files


SCENARIOS = {"left_turn": LeftTurnScenario, "merging": MergingScenario}


def make_scenario(name: str, **overrides) -> Scenario:
    try:
        cls = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}") from None
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown {name} parameters: {sorted(unknown)}")
    if "sampling" in overrides and isinstance(overrides["sampling"], dict):
        overrides["sampling"] = SamplingConfig(**overrides["sampling"])
    for key in ("norm_lo", "norm_hi"):
        if key in overrides:
            overrides[key] = np.asarray(overrides[key], dtype=float)
    if "schedule" in overrides:
        overrides["schedule"] = [tuple(s) for s in overrides["schedule"]]
    for key in ("u_bounds", "degree", "delta"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    return cls(**overrides)


def scenario_to_dict(sc: Scenario) -> dict:
    doc = {}
    for f in fields(sc):
        v = getattr(sc, f.name)
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, SamplingConfig):
            v = asdict(v)
        elif isinstance(v, tuple):
            v = list(v)
        doc[f.name] = v
    return doc
