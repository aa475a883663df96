"""Hierarchical neural planners and their one-step reachability.

A behavior network's scalar output is read through N equal-width decision
regions of [-1, 1]; region k selects motion network k.  A trigger decides at
which control steps the behavior is re-selected; between triggers the last
selection is kept.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bernstein import CertifiedApprox, certify
from .nn import NeuralNetwork, _dump, from_dict, lipschitz_bound, load_weights, save_weights, to_dict
from .reach import (
    AffineStepDynamics,
    IntervalBox,
    ReachAbort,
    ReachSegment,
    refine_span,
    step_affine,
    step_points,
)


@dataclass(frozen=True)
class Trigger:
    """When the behavior layer runs: only at the first step, or every k steps.

    ``last`` optionally stops periodic re-selection after that (1-based) step,
    e.g. once the estimate feeding the behavior layer no longer changes.
    """

    every: int | None = None  # None means once
    last: int | None = None

    @classmethod
    def once(cls) -> "Trigger":
        return cls(None)

    @classmethod
    def every_k(cls, k: int, last: int | None = None) -> "Trigger":
        if k < 1:
            raise ValueError("trigger period must be at least 1")
        if last is not None and last < 1:
            raise ValueError("last trigger step must be at least 1")
        return cls(int(k), None if last is None else int(last))

    def fires(self, step_index: int) -> bool:
        """Whether the behavior is chosen at the start of (1-based) step ``step_index``."""
        k = step_index - 1
        if self.every is None:
            return k == 0
        if self.last is not None and step_index > self.last:
            return False
        return k % self.every == 0

    def to_dict(self) -> dict:
        if self.every is None:
            return {"kind": "once"}
        d = {"kind": "every", "k": self.every}
        if self.last is not None:
            d["last"] = self.last
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Trigger":
        if d.get("kind") == "once":
            return cls.once()
        if d.get("kind") == "every":
            return cls.every_k(int(d["k"]), d.get("last"))
        raise ValueError(f"unknown trigger {d!r}")


def decision_regions(n: int) -> list[tuple[float, float]]:
    """Equal-width regions of [-1, 1]; each is [lo, hi) except the last, which is closed."""
    edges = np.linspace(-1.0, 1.0, n + 1)
    return [(float(edges[k]), float(edges[k + 1])) for k in range(n)]


def region_of(value, n: int) -> np.ndarray:
    """1-based region index of each behavior-network output."""
    # compare against the same edges as the range test, so rounding cannot split them
    inner = np.array([b for _, b in decision_regions(n)[:-1]])
    return np.searchsorted(inner, np.asarray(value, dtype=float), side="right") + 1


@dataclass(frozen=True)
class HierarchicalPlanner:
    behavior_net: NeuralNetwork
    motion_nets: tuple[NeuralNetwork, ...]
    behaviors: tuple[str, ...]
    trigger: Trigger = field(default_factory=Trigger.once)

    def __post_init__(self):
        object.__setattr__(self, "motion_nets", tuple(self.motion_nets))
        object.__setattr__(self, "behaviors", tuple(self.behaviors))
        if len(self.motion_nets) != len(self.behaviors):
            raise ValueError("one motion network per behavior is required")
        if self.behavior_net.output_dim != 1:
            raise ValueError("behavior network must have a scalar output")
        if len(self.motion_nets) < 2:
            raise ValueError("a hierarchy needs at least two behaviors")
        dims = {self.behavior_net.input_dim, *(n.input_dim for n in self.motion_nets)}
        if len(dims) != 1:
            raise ValueError(f"networks disagree on the input dimension: {sorted(dims)}")

    @property
    def n_behaviors(self) -> int:
        return len(self.behaviors)

    def with_trigger(self, trigger: Trigger) -> "HierarchicalPlanner":
        return HierarchicalPlanner(self.behavior_net, self.motion_nets, self.behaviors, trigger)

    def select(self, x) -> np.ndarray:
        """Behavior index (1-based) chosen at concrete states."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return region_of(self.behavior_net.forward(x)[:, 0], self.n_behaviors)

    def motion(self, behavior: int) -> NeuralNetwork:
        return self.motion_nets[behavior - 1]

    def tag(self, behavior: int) -> str:
        return self.behaviors[behavior - 1]

    def index(self, tag: str) -> int:
        return self.behaviors.index(tag) + 1


@dataclass(frozen=True)
class SinglePlanner:
    net: NeuralNetwork
    tag: str = "single"


@dataclass(frozen=True)
class BehaviorSet:
    selected: tuple[int, ...]
    mu_range: tuple[float, float]
    approx: CertifiedApprox | None = None


def behavior_set(planner: HierarchicalPlanner, box: IntervalBox, degree, m: int = 8) -> BehaviorSet:
    """Behaviors whose decision region meets the certified range of the behavior net over the box."""
    net = planner.behavior_net
    L = lipschitz_bound(net, "l2", dims=box.active_dims)
    approx = certify(lambda x: net.forward(x)[:, 0], L, box, degree, m, "behavior")
    lo, hi = approx.range()
    lo, hi = max(lo, -1.0), min(hi, 1.0)
    return BehaviorSet(selected_behaviors(lo, hi, planner.n_behaviors), (lo, hi), approx)


def selected_behaviors(lo: float, hi: float, n: int) -> tuple[int, ...]:
    """1-based indices of the decision regions meeting [lo, hi]."""
    regions = decision_regions(n)
    selected = []
    for k, (a, b) in enumerate(regions, start=1):
        last = k == len(regions)
        if (lo <= b if last else lo < b) and hi >= a:
            selected.append(k)
    return tuple(selected)


@dataclass
class StepConfig:
    """Bernstein settings of the controller abstraction."""

    degree: tuple[int, ...]
    m: int = 8
    eps_cap: float = 0.5  # in raw tanh units
    subdivisions: int = 0
    dependency: bool = True  # tighten endpoints with the polynomial dependency on x
    max_grid_points: int = 2 ** 18  # caps the doubling of m under refinement


def grid_size(cfg: StepConfig, box: IntervalBox, depth: int) -> int:
    """Per-dimension error grid at a refinement depth: m doubled per level, within the point cap."""
    m = cfg.m * 2 ** depth
    k = max(1, len(box.active_dims))
    cap = max(cfg.m, int(math.floor(cfg.max_grid_points ** (1.0 / k) + 1e-9)))
    return max(2, min(m, cap))


@dataclass
class ApproxRecord:
    tag: str
    box: IntervalBox
    approx: CertifiedApprox


def motion_step(net: NeuralNetwork, dyn: AffineStepDynamics, box: IntervalBox, dt: float,
                cfg: StepConfig, depth: int = 0, tag: str = "", records: list | None = None):
    """Flowpipe of one step under a motion network.

    Returns ``(span, endpoint_before_reset, u_range)``.  Raises ReachAbort
    when the certified error exceeds the cap.
    """
    m = grid_size(cfg, box, depth)
    L = lipschitz_bound(net, "l2", dims=box.active_dims)
    approx = certify(lambda x: net.forward(x)[:, 0], L, box, cfg.degree, m, tag)
    if records is not None:
        records.append(ApproxRecord(tag, box, approx))
    if approx.epsilon > cfg.eps_cap:
        raise ReachAbort("epsilon", f"{tag} eps {approx.epsilon:.3g} > cap {cfg.eps_cap}")
    raw_lo, raw_hi = approx.range(cfg.subdivisions)
    raw_lo, raw_hi = max(raw_lo, -1.0), min(raw_hi, 1.0)
    u_range = (float(net.scale_output(raw_lo)), float(net.scale_output(raw_hi)))
    span, end = step_affine(dyn, box, u_range, dt)
    if cfg.dependency:
        end = _dependency_endpoint(net, dyn, box, approx, end, dt)
        span = refine_span(dyn, box, u_range, span, end, dt)
    return span, end, u_range


def _dependency_endpoint(net, dyn, box, approx, end: IntervalBox, dt: float) -> IntervalBox:
    """Endpoint enclosure keeping the controller's polynomial dependency on the state.

    x_j(dt) = Phi_j x + Gamma_j u + gamma_j with u = offset + gain * raw and
    raw in B(x) +/- eps; written in the Bernstein basis of B, the coefficient
    extremes bound it.  Intersected with the interval endpoint.
    """
    phi, gam, g = dyn.transition(dt)
    poly = approx.poly
    gain = net.output_gain
    offset = net.output_scale[0] + gain
    lo = end.lo.copy()
    hi = end.hi.copy()
    for j in range(dyn.n):
        if gam[j] == 0.0:
            continue
        coeffs = poly.linear_coeffs(phi[j], gam[j] * offset + g[j]) + gam[j] * gain * poly.coeffs
        pad = abs(gam[j]) * gain * approx.epsilon
        lo[j] = max(lo[j], float(coeffs.min()) - pad)
        hi[j] = min(hi[j], float(coeffs.max()) + pad)
    return IntervalBox(lo, np.maximum(hi, lo))


def _segment(dyn, box, span, end, u_range, step_index, dt, t0, tag) -> ReachSegment:
    lo, hi = dyn.apply_reset(end.lo, end.hi)
    post = IntervalBox(lo, hi)
    return ReachSegment(
        step_index=step_index,
        t_lo=t0 + (step_index - 1) * dt,
        t_hi=t0 + step_index * dt,
        box=span.hull(post),
        endpoint_box=post,
        planner_tag=tag,
        start_box=box,
        u_range=u_range,
    )


@dataclass
class PlannerStepper:
    """Stepper for the reach loop driving a single or hierarchical planner.

    ``t0`` only labels segment times.  With ``records`` set, every certified
    controller approximation is kept for later validation.
    """

    planner: HierarchicalPlanner | SinglePlanner
    dyn: AffineStepDynamics
    dt: float
    cfg: StepConfig
    t0: float = 0.0
    records: list | None = None
    behavior_calls: list = field(default_factory=list)

    def __call__(self, box: IntervalBox, tag: str, step_index: int, depth: int = 0) -> list[ReachSegment]:
        if isinstance(self.planner, SinglePlanner):
            return single_planner_step(self, box, step_index, depth)
        return hierarchical_step(self, box, tag, step_index, depth)


def single_planner_step(st: PlannerStepper, box, step_index: int, depth: int = 0) -> list[ReachSegment]:
    net = st.planner.net
    span, end, u_range = motion_step(net, st.dyn, box, st.dt, st.cfg, depth, st.planner.tag, st.records)
    return [_segment(st.dyn, box, span, end, u_range, step_index, st.dt, st.t0, st.planner.tag)]


def hierarchical_step(st: PlannerStepper, box, tag: str | None, step_index: int, depth: int = 0) -> list[ReachSegment]:
    """One step for a box: fork over the selectable behaviors at triggers, else keep ``tag``."""
    planner: HierarchicalPlanner = st.planner
    if planner.trigger.fires(step_index) or tag is None:
        bs = behavior_set(planner, box, st.cfg.degree, st.cfg.m * 2 ** depth)
        st.behavior_calls.append((step_index, box, bs))
        chosen = bs.selected
    elif tag in planner.behaviors:
        chosen = (planner.index(tag),)
    else:
        raise ValueError(f"unknown behavior tag {tag!r}")
    out = []
    for k in chosen:
        name = planner.tag(k)
        span, end, u_range = motion_step(planner.motion(k), st.dyn, box, st.dt, st.cfg, depth, name, st.records)
        out.append(_segment(st.dyn, box, span, end, u_range, step_index, st.dt, st.t0, name))
    return out


# --------------------------------------------------------------------------
# concrete execution


class Executor:
    """Closed-loop controller for batches of concrete states."""

    def controls(self, x: np.ndarray, step_index: int, tags: np.ndarray | None):
        raise NotImplementedError


@dataclass
class HierarchicalExecutor(Executor):
    planner: HierarchicalPlanner

    def controls(self, x, step_index, tags):
        x = np.atleast_2d(x)
        if tags is None or self.planner.trigger.fires(step_index):
            tags = self.planner.select(x)
        u = np.empty(len(x))
        for k in np.unique(tags):
            sel = tags == k
            u[sel] = self.planner.motion(int(k)).scaled(x[sel])[:, 0]
        return u, tags


@dataclass
class SingleExecutor(Executor):
    net: NeuralNetwork

    def controls(self, x, step_index, tags):
        x = np.atleast_2d(x)
        return self.net.scaled(x)[:, 0], np.zeros(len(x), dtype=int)


def executor_for(planner) -> Executor:
    if isinstance(planner, HierarchicalPlanner):
        return HierarchicalExecutor(planner)
    if isinstance(planner, SinglePlanner):
        return SingleExecutor(planner.net)
    if isinstance(planner, NeuralNetwork):
        return SingleExecutor(planner)
    raise TypeError(f"not a planner: {type(planner).__name__}")


def execute(planner: HierarchicalPlanner, x, step_index: int, prev_tag: int | None = None,
            u_bounds: tuple[float, float] | None = None):
    """Control and behavior for one concrete state.

    The network output is already within the actuator bounds; ``u_bounds``
    adds a defensive clamp.
    """
    u, tags = HierarchicalExecutor(planner).controls(
        np.asarray(x, dtype=float)[None], step_index,
        None if prev_tag is None else np.array([prev_tag]))
    u = float(u[0])
    if u_bounds is not None:
        u = float(np.clip(u, *u_bounds))
    return u, int(tags[0])


def closed_loop_step(dyn: AffineStepDynamics, x, u, dt: float):
    nxt = step_points(dyn, x, u, dt)
    return np.asarray(dyn.apply_reset(nxt, nxt)[0])


# --------------------------------------------------------------------------
# bundle files


def planner_to_dict(planner) -> dict:
    if isinstance(planner, SinglePlanner):
        return {"kind": "single", "tag": planner.tag, "net": to_dict(planner.net)}
    return {
        "kind": "hierarchical",
        "behaviors": list(planner.behaviors),
        "decision_regions": [list(r) for r in decision_regions(planner.n_behaviors)],
        "trigger": planner.trigger.to_dict(),
        "behavior_net": to_dict(planner.behavior_net),
        "motion_nets": [to_dict(n) for n in planner.motion_nets],
    }


def planner_from_dict(doc: dict, base: Path | None = None):
    """Planner from a bundle document; networks are inline dicts or weight-file paths relative to ``base``."""

    def net(entry):
        if isinstance(entry, str):
            return load_weights(Path(base or ".") / entry)
        return from_dict(entry)

    kind = doc.get("kind")
    if kind == "single":
        return SinglePlanner(net(doc["net"]), doc.get("tag", "single"))
    if kind == "hierarchical":
        regions = doc.get("decision_regions")
        expected = decision_regions(len(doc["behaviors"]))
        if regions is not None and not np.allclose(np.asarray(regions, dtype=float), expected, rtol=0, atol=1e-12):
            raise ValueError("only equal-width decision regions over [-1, 1] are supported")
        return HierarchicalPlanner(
            net(doc["behavior_net"]),
            tuple(net(d) for d in doc["motion_nets"]),
            tuple(doc["behaviors"]),
            Trigger.from_dict(doc.get("trigger", {"kind": "once"})),
        )
    raise ValueError(f"unknown planner kind {kind!r}")


def save_planner(planner, path) -> None:
    Path(path).write_text(_dump(planner_to_dict(planner)) + "\n")


def save_bundle(planner, directory, stem: str) -> list[Path]:
    """Write one weight file per network plus a bundle file referencing them.

    Returns the written paths, bundle last.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    def put(net, suffix):
        name = f"{stem}.{suffix}.weights.json"
        save_weights(net, directory / name)
        written.append(directory / name)
        return name

    if isinstance(planner, SinglePlanner):
        doc = {"kind": "single", "tag": planner.tag, "net": put(planner.net, planner.tag)}
    else:
        doc = {
            "kind": "hierarchical",
            "behaviors": list(planner.behaviors),
            "decision_regions": [list(r) for r in decision_regions(planner.n_behaviors)],
            "trigger": planner.trigger.to_dict(),
            "behavior_net": put(planner.behavior_net, "behavior"),
            "motion_nets": [put(n, tag) for n, tag in zip(planner.motion_nets, planner.behaviors)],
        }
    bundle = directory / f"{stem}.json"
    bundle.write_text(_dump(doc) + "\n")
    written.append(bundle)
    return written


def load_planner(path):
    path = Path(path)
    return planner_from_dict(json.loads(path.read_text()), path.parent)


# --------------------------------------------------------------------------
# training


@dataclass
class PlannerTraining:
    hierarchical: HierarchicalPlanner
    single: SinglePlanner
    mse: dict
    behavior_accuracy: float


def train_planners(scenario, dataset, cfg=None, behavior_cfg=None, trigger: Trigger | None = None) -> PlannerTraining:
    """Fit the behavior net, one motion net per behavior and the single-net baseline.

    Motion net k learns from rollouts forced into behavior k; the behavior
    net regresses onto decision-region centers; the single net sees only
    on-policy samples, so it must average across behaviors near boundaries.
    """
    from .nn import TrainConfig, train

    cfg = cfg or TrainConfig()
    # the behavior target is piecewise constant with narrow bands; plain SGD
    # smooths them away, while the motion nets stay flatter (smaller
    # Lipschitz bounds) under SGD
    behavior_cfg = behavior_cfg or TrainConfig(learning_rate=0.003, optimizer="adam", seed=cfg.seed)
    n = len(scenario.behaviors)
    mse = {}
    motion = []
    for k in range(1, n + 1):
        res = train(dataset.for_motion(scenario, k), cfg, scenario.u_bounds)
        mse[scenario.behaviors[k - 1]] = res.mse
        motion.append(res.net)
    res = train(dataset.for_behavior(scenario), behavior_cfg)
    mse["behavior"] = res.mse
    mu = res.net
    accuracy = float(np.mean(region_of(mu.forward(dataset.states)[:, 0], n) == dataset.labels))
    res = train(dataset.for_single(scenario), cfg, scenario.u_bounds)
    mse["single"] = res.mse
    planner = HierarchicalPlanner(mu, tuple(motion), tuple(scenario.behaviors), trigger or Trigger.once())
    return PlannerTraining(planner, SinglePlanner(res.net), mse, accuracy)
