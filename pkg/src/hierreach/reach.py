"""Interval boxes, closed-form flowpipe steps and the partition-and-union reach loop.

Dynamics are affine in the state with a nilpotent state matrix and a control
held constant over each control step, so every trajectory coordinate is a
polynomial in time whose coefficients are linear in (x(0), u).  Endpoint
boxes are therefore exact interval hulls, and span hulls are found from the
box vertices plus interior critical points of those polynomials.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class IntervalBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).reshape(-1)
        hi = np.array(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("lo and hi must have the same length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError(f"empty box: lo {lo} > hi {hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def point(cls, x) -> IntervalBox:
        return cls(x, x)

    @classmethod
    def from_bounds(cls, bounds: Sequence[Sequence[float]]) -> IntervalBox:
        arr = np.asarray(bounds, dtype=float)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def n(self) -> int:
        return len(self.lo)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def active_dims(self) -> np.ndarray:
        """Indices of dimensions with nonzero width."""
        return np.flatnonzero(self.hi > self.lo)

    def volume(self, dims=None) -> float:
        w = self.width if dims is None else self.width[list(dims)]
        return float(np.prod(w))

    def contains(self, x, tol: float = 0.0):
        """Membership of a point (n,) or a batch of points (N, n)."""
        x = np.asarray(x, dtype=float)
        ok = (x >= self.lo - tol) & (x <= self.hi + tol)
        return ok.all(axis=-1)

    def contains_box(self, other: IntervalBox, tol: float = 0.0) -> bool:
        return bool(np.all(other.lo >= self.lo - tol) and np.all(other.hi <= self.hi + tol))

    def overlaps(self, other: IntervalBox) -> bool:
        return bool(np.all(self.lo <= other.hi) and np.all(other.lo <= self.hi))

    def hull(self, other: IntervalBox) -> IntervalBox:
        return IntervalBox(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def intersect(self, other: IntervalBox) -> IntervalBox | None:
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(lo > hi):
            return None
        return IntervalBox(lo, hi)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.lo + rng.random((count, self.n)) * self.width

    def __eq__(self, other):
        if not isinstance(other, IntervalBox):
            return NotImplemented
        return bool(np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi))

    def __hash__(self):
        return hash((self.lo.tobytes(), self.hi.tobytes()))

    def __repr__(self):
        pairs = ", ".join(f"[{a:.6g}, {b:.6g}]" for a, b in zip(self.lo, self.hi))
        return f"IntervalBox({pairs})"


def hull_of(boxes: Iterable[IntervalBox]) -> IntervalBox:
    boxes = list(boxes)
    lo = np.min([b.lo for b in boxes], axis=0)
    hi = np.max([b.hi for b in boxes], axis=0)
    return IntervalBox(lo, hi)


@dataclass(frozen=True, eq=False)
class UnsafeRegion:
    """Conjunction of linear constraints ``normals @ x - offsets <= 0``.

    Regions built with :meth:`from_box` also keep the box so intersection
    tests against boxes are exact.
    """

    normals: np.ndarray
    offsets: np.ndarray
    box: IntervalBox | None = None

    def __post_init__(self):
        a = np.atleast_2d(np.array(self.normals, dtype=float))
        b = np.array(self.offsets, dtype=float).reshape(-1)
        if len(a) == 0 or len(a) != len(b):
            raise ValueError("unsafe region needs at least one constraint and matching offsets")
        if np.any(np.all(a == 0.0, axis=1)):
            raise ValueError("constraint normals must be nonzero")
        object.__setattr__(self, "normals", a)
        object.__setattr__(self, "offsets", b)

    @classmethod
    def from_box(cls, lo, hi) -> UnsafeRegion:
        """Box region; infinite bounds leave a dimension unconstrained."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        n = len(lo)
        rows, offs = [], []
        for j in range(n):
            if np.isfinite(hi[j]):
                e = np.zeros(n)
                e[j] = 1.0
                rows.append(e)
                offs.append(hi[j])
            if np.isfinite(lo[j]):
                e = np.zeros(n)
                e[j] = -1.0
                rows.append(e)
                offs.append(-lo[j])
        return cls(np.array(rows), np.array(offs), IntervalBox(lo, hi))

    @property
    def n(self) -> int:
        return self.normals.shape[1]

    def constraint_minima(self, box: IntervalBox) -> np.ndarray:
        """Minimum of each constraint function over ``box``."""
        a = self.normals
        with np.errstate(invalid="ignore"):
            lo_terms = np.where(a >= 0.0, a * box.lo, a * box.hi)
        lo_terms = np.where(a == 0.0, 0.0, lo_terms)
        return lo_terms.sum(axis=1) - self.offsets

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all(x @ self.normals.T - self.offsets <= 0.0, axis=-1)


def intersects(obj, region: UnsafeRegion | None, exact: bool = False) -> bool:
    """Whether a box (or a segment's span hull) may meet the unsafe region.

    Exact for box regions.  For general conjunctions every constraint is
    tested separately, which can report an intersection that does not exist
    but never misses one; ``exact=True`` solves the joint feasibility LP.
    """
    if region is None:
        return False
    box = obj.box if isinstance(obj, ReachSegment) else obj
    if box.n != region.n:
        raise ValueError(f"dimension mismatch: box {box.n}, region {region.n}")
    if region.box is not None:
        return box.overlaps(region.box)
    if not np.all(region.constraint_minima(box) <= 0.0):
        return False
    if not exact:
        return True
    from scipy.optimize import linprog

    bounds = [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b)
              for a, b in zip(box.lo, box.hi)]
    res = linprog(np.zeros(box.n), A_ub=region.normals, b_ub=region.offsets + 1e-9,
                  bounds=bounds, method="highs")
    return res.status == 0


# --------------------------------------------------------------------------
# dynamics


class UnsupportedDynamics(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AffineStepDynamics:
    """``x' = A x + B u + c`` with scalar control held constant per step.

    ``reset`` maps state bounds (lo, hi), arrays of shape (..., n), to new
    bounds at a step boundary; it models discrete updates such as a changing
    prediction window.  ``names`` labels the state dimensions.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    names: tuple[str, ...] = ()
    reset: Callable | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.array(self.A, dtype=float))
        n = A.shape[0]
        B = np.array(self.B, dtype=float).reshape(n)
        c = np.array(self.c, dtype=float).reshape(n)
        if A.shape != (n, n):
            raise ValueError("A must be square")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{j}" for j in range(n)))
        power = np.eye(n)
        for _ in range(n):
            power = power @ A
        if np.any(power != 0.0):
            raise UnsupportedDynamics("state matrix is not nilpotent; only polynomial flows are supported")
        object.__setattr__(self, "_coeffs", self._time_coefficients())

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def _time_coefficients(self):
        """Per power k of t: (P_k, Q_k, r_k) with x(t) = sum_k t^k (P_k x0 + Q_k u + r_k)."""
        n = self.n
        P = [np.eye(n)]
        Q = [np.zeros(n)]
        r = [np.zeros(n)]
        power = np.eye(n)  # A^(k-1)
        k = 1
        while True:
            qk = power @ self.B / math.factorial(k)
            rk = power @ self.c / math.factorial(k)
            pk = power @ self.A / math.factorial(k)
            if not (np.any(pk) or np.any(qk) or np.any(rk)):
                break
            P.append(pk)
            Q.append(qk)
            r.append(rk)
            power = power @ self.A
            k += 1
        return np.array(P), np.array(Q), np.array(r)

    @property
    def degree(self) -> int:
        return len(self._coeffs[0]) - 1

    def transition(self, dt: float):
        """(Phi, Gamma, gamma) with x(dt) = Phi x0 + Gamma u + gamma."""
        P, Q, r = self._coeffs
        powers = dt ** np.arange(len(P))
        return (
            np.tensordot(powers, P, axes=1),
            powers @ Q,
            powers @ r,
        )

    def apply_reset(self, lo, hi):
        if self.reset is None:
            return lo, hi
        return self.reset(np.array(lo, dtype=float), np.array(hi, dtype=float))


def step_points(dyn: AffineStepDynamics, x, u, dt: float) -> np.ndarray:
    """Exact flow of concrete states (n,) or (N, n) under constant controls, no reset."""
    phi, gam, g = dyn.transition(dt)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return x @ phi.T + np.multiply.outer(u, gam) + g


def _quadratic_extrema(c: np.ndarray, dt: float):
    """Min and max over t in [0, dt] of polynomials with coefficient rows c (M, K+1)."""
    K = c.shape[1] - 1
    ts = [np.zeros(len(c)), np.full(len(c), dt)]
    if K == 2:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t_star = -c[:, 1] / (2.0 * c[:, 2])
        ok = np.isfinite(t_star) & (t_star > 0.0) & (t_star < dt)
        ts.append(np.where(ok, t_star, 0.0))
    elif K > 2:
        extra = []
        for row in c:
            crit = np.roots(np.polynomial.polynomial.polyder(row)[::-1]) if np.any(row[1:]) else []
            crit = [z.real for z in np.atleast_1d(crit) if abs(z.imag) < 1e-12 and 0.0 < z.real < dt]
            extra.append(crit)
        width = max((len(e) for e in extra), default=0)
        for k in range(width):
            ts.append(np.array([e[k] if k < len(e) else 0.0 for e in extra]))
    ts = np.stack(ts, axis=1)  # (M, C)
    powers = ts[:, :, None] ** np.arange(K + 1)
    vals = np.einsum("mck,mk->mc", powers, c)
    return vals.min(axis=1), vals.max(axis=1)


def step_affine(dyn: AffineStepDynamics, box: IntervalBox, u_range, dt: float):
    """Interval flowpipe of one control step.

    Returns ``(span_hull, endpoint)``: the exact hull of the states reached
    over t in [0, dt] and at t = dt, for x(0) in ``box`` and constant u in
    ``u_range``.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    u_lo, u_hi = float(u_range[0]), float(u_range[1])
    if u_lo > u_hi:
        raise ValueError("empty control range")
    phi, gam, g = dyn.transition(dt)
    M = np.column_stack([phi, gam])  # coefficients on (x, u)
    vlo = np.append(box.lo, u_lo)
    vhi = np.append(box.hi, u_hi)
    end_lo = np.where(M >= 0, M * vlo, M * vhi).sum(axis=1) + g
    end_hi = np.where(M >= 0, M * vhi, M * vlo).sum(axis=1) + g
    endpoint = IntervalBox(end_lo, np.maximum(end_hi, end_lo))

    P, Q, r = dyn._coeffs
    span_lo = np.minimum(box.lo, end_lo)
    span_hi = np.maximum(box.hi, end_hi)
    if dyn.degree >= 2:
        for j in range(dyn.n):
            # coefficients of x_j(t) as linear forms over (x, u): shape (K+1, n+1)
            forms = np.column_stack([P[:, j, :], Q[:, j]])
            consts = r[:, j]
            if not np.any(forms[2:]) and not np.any(consts[2:]):
                continue  # at most linear in t: endpoints suffice
            # min/max of a linear form over the box sit at vertices for every t
            rel = np.flatnonzero(np.any(forms != 0.0, axis=0))
            verts = np.tile(vlo, (2 ** len(rel), 1))
            verts[:, rel] = list(itertools.product(*[(vlo[i], vhi[i]) for i in rel]))
            mn, mx = _quadratic_extrema(verts @ forms.T + consts, dt)
            span_lo[j] = min(span_lo[j], mn.min())
            span_hi[j] = max(span_hi[j], mx.max())
    return IntervalBox(span_lo, span_hi), endpoint


def refine_span(dyn: AffineStepDynamics, box: IntervalBox, u_range, span: IntervalBox,
                endpoint: IntervalBox, dt: float) -> IntervalBox:
    """Tighten a span hull using a (possibly tighter) endpoint enclosure.

    A coordinate that is monotone in time along every trajectory stays
    between its start and end values, so its span lies in the hull of the
    start box and the endpoint box.  Coordinates at most linear in time are
    always monotone; quadratic ones are when their derivative has one sign
    at both ends of the step.
    """
    P, Q, r = dyn._coeffs
    lo = span.lo.copy()
    hi = span.hi.copy()
    u_lo, u_hi = float(u_range[0]), float(u_range[1])

    def rate(b: IntervalBox, j: int):
        a = dyn.A[j]
        terms_lo = np.where(a >= 0, a * b.lo, a * b.hi).sum()
        terms_hi = np.where(a >= 0, a * b.hi, a * b.lo).sum()
        bj = dyn.B[j]
        return (terms_lo + min(bj * u_lo, bj * u_hi) + dyn.c[j],
                terms_hi + max(bj * u_lo, bj * u_hi) + dyn.c[j])

    for j in range(dyn.n):
        deg = max((k for k in range(len(P)) if np.any(P[k, j]) or Q[k, j] or r[k, j]), default=0)
        if deg > 2:
            continue
        if deg == 2:
            a0, b0 = rate(box, j)
            a1, b1 = rate(endpoint, j)
            if not ((a0 >= 0 and a1 >= 0) or (b0 <= 0 and b1 <= 0)):
                continue
        lo[j] = max(lo[j], min(box.lo[j], endpoint.lo[j]))
        hi[j] = min(hi[j], max(box.hi[j], endpoint.hi[j]))
    return IntervalBox(lo, np.maximum(hi, lo))


def span_hull_points(dyn: AffineStepDynamics, x, u, dt: float):
    """Exact per-trajectory (lo, hi) over one step for concrete states (N, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.asarray(u, dtype=float).reshape(len(x))
    P, Q, r = dyn._coeffs
    # coefficients (N, n, K+1)
    c = np.einsum("kji,ni->njk", P, x) + np.multiply.outer(u, Q.T) + r.T[None]
    N, n, K1 = c.shape
    mn, mx = _quadratic_extrema(c.reshape(N * n, K1), dt)
    return mn.reshape(N, n), mx.reshape(N, n)


# --------------------------------------------------------------------------
# partition


def partition(box: IntervalBox, delta) -> list[IntervalBox]:
    """Grid cells of width at most ``delta`` per dimension covering ``box``.

    Cuts are placed at lo + k * delta; zero-width dimensions are not split.
    """
    delta = np.broadcast_to(np.asarray(delta, dtype=float), box.lo.shape)
    if np.any(delta <= 0.0):
        raise ValueError("partition width must be positive")
    edges = []
    for lo, hi, d in zip(box.lo, box.hi, delta):
        w = hi - lo
        if w == 0.0:
            edges.append([(lo, hi)])
            continue
        k = max(1, math.ceil(w / d - 1e-9))
        cuts = [lo + i * d for i in range(k)] + [hi]
        edges.append([(cuts[i], cuts[i + 1]) for i in range(k)])
    cells = []
    for combo in itertools.product(*edges):
        arr = np.array(combo)
        cells.append(IntervalBox(arr[:, 0], arr[:, 1]))
    return cells


def lattice_cover(boxes: Sequence[IntervalBox], anchor, delta) -> list[IntervalBox]:
    """Cover a union of boxes with cells of a fixed delta-lattice.

    Every lattice cell meeting some box (with positive overlap in the box's
    nondegenerate dimensions) becomes one output box, shrunk to the hull of
    the parts of the boxes inside it.  The number of cells is bounded by the
    union's extent rather than the number of input boxes.
    """
    if not boxes:
        return []
    anchor = np.asarray(anchor, dtype=float)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), anchor.shape)
    cells: dict[tuple, list[np.ndarray]] = {}
    for b in boxes:
        wide = b.hi > b.lo
        i_lo = np.where(wide, np.floor((b.lo - anchor) / delta), 0).astype(int)
        i_hi = np.where(wide, np.ceil((b.hi - anchor) / delta) - 1, 0).astype(int)
        i_hi = np.maximum(i_hi, i_lo)
        ranges = [range(a, c + 1) for a, c in zip(i_lo, i_hi)]
        for idx in itertools.product(*ranges):
            idx_arr = np.array(idx)
            c_lo = np.where(wide, anchor + idx_arr * delta, b.lo)
            c_hi = np.where(wide, anchor + (idx_arr + 1) * delta, b.hi)
            lo = np.maximum(b.lo, c_lo)
            hi = np.minimum(b.hi, c_hi)
            if np.any(hi < lo):
                continue
            key = tuple(np.where(wide, idx_arr, 0))
            entry = cells.get(key)
            if entry is None:
                cells[key] = [lo, hi]
            else:
                np.minimum(entry[0], lo, out=entry[0])
                np.maximum(entry[1], hi, out=entry[1])
    return [IntervalBox(lo, hi) for lo, hi in (cells[k] for k in sorted(cells))]


# --------------------------------------------------------------------------
# reach sets


@dataclass(eq=False)
class ReachSegment:
    step_index: int
    t_lo: float
    t_hi: float
    box: IntervalBox  # hull over the step
    endpoint_box: IntervalBox  # states at the end of the step (after resets)
    planner_tag: str = "single"
    start_box: IntervalBox | None = None  # cell the step started from
    u_range: tuple[float, float] | None = None  # control enclosure applied over the step


@dataclass
class ReachSet:
    segments: list[ReachSegment] = field(default_factory=list)
    verdict: str = "InProgress"  # Safe | Uncertain | InProgress
    reason: str = ""
    initial: IntervalBox | None = None
    unsafe: UnsafeRegion | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def steps(self) -> list[int]:
        return sorted({s.step_index for s in self.segments})

    def at_step(self, step_index: int) -> list[ReachSegment]:
        return [s for s in self.segments if s.step_index == step_index]

    def tags(self) -> list[str]:
        return sorted({s.planner_tag for s in self.segments})

    def union_volume(self, step_index: int, dims) -> float:
        """Volume of the union of step segment boxes projected onto ``dims``."""
        boxes = [(s.box.lo[list(dims)], s.box.hi[list(dims)]) for s in self.at_step(step_index)]
        return union_volume(boxes)


def _union_length(lo: np.ndarray, hi: np.ndarray) -> float:
    order = np.argsort(lo, kind="stable")
    lo, hi = lo[order], hi[order]
    reach = np.maximum.accumulate(hi)
    # a new run starts wherever an interval begins past everything before it
    starts = np.concatenate([[True], lo[1:] > reach[:-1]])
    run = np.cumsum(starts) - 1
    run_lo = lo[starts]
    run_hi = np.full(len(run_lo), -np.inf)
    np.maximum.at(run_hi, run, hi)
    return float(np.sum(run_hi - run_lo))


def _sweep_volume(lo: np.ndarray, hi: np.ndarray) -> float:
    if lo.shape[1] == 1:
        return _union_length(lo[:, 0], hi[:, 0])
    edges = np.unique(np.concatenate([lo[:, 0], hi[:, 0]]))
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (a + b)
        cover = (lo[:, 0] <= mid) & (hi[:, 0] >= mid)
        if cover.any():
            total += (b - a) * _sweep_volume(lo[cover, 1:], hi[cover, 1:])
    return total


def union_volume(boxes) -> float:
    """Exact volume of a union of axis-aligned boxes given as (lo, hi) pairs.

    Sweeps slabs between consecutive box edges along the first axis and
    recurses on the boxes covering each slab.
    """
    boxes = list(boxes)
    if not boxes:
        return 0.0
    lo = np.array([np.asarray(a, float) for a, _ in boxes]).reshape(len(boxes), -1)
    hi = np.array([np.asarray(b, float) for _, b in boxes]).reshape(len(boxes), -1)
    if lo.shape[1] == 0:
        return 1.0  # empty product, as for a box's volume
    keep = np.all(hi > lo, axis=1)
    if not keep.any():
        return 0.0
    return _sweep_volume(lo[keep], hi[keep])


class ReachAbort(Exception):
    """Raised by a stepper when an abstraction quality gate fails."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


@dataclass
class ReachConfig:
    dt: float = 0.5
    delta: Sequence[float] | float = 1.0  # partition width, scalar or per dimension
    n_steps: int = 4  # steps per Reach_Comp call
    max_steps: int = 40
    growth_factor: float = 4.0
    eps_cap: float = 0.5
    cell_time_budget: float | None = 5.0  # seconds per cell, None disables (deterministic runs)
    max_refine_depth: int = 4


@dataclass
class FrontierItem:
    box: IntervalBox
    tag: str = "single"


@dataclass
class CompResult:
    segments: list[ReachSegment]
    frontier: list[FrontierItem]
    abort_reason: str | None = None
    detail: str = ""

    @property
    def aborted(self) -> bool:
        return self.abort_reason is not None


# A stepper maps (box, tag, step_index, refine_depth) to the child segments
# of one control step.
Stepper = Callable[[IntervalBox, str, int, int], list]


def growth_ratio(before: IntervalBox, after: IntervalBox, scale) -> float:
    """Largest per-dimension width ratio, with widths floored at ``scale``."""
    scale = np.broadcast_to(np.asarray(scale, dtype=float), before.lo.shape)
    return float(np.max(after.width / np.maximum(before.width, scale)))


def reach_comp(
    cell: FrontierItem,
    n: int,
    stepper: Stepper,
    cfg: ReachConfig,
    start_step: int = 0,
    depth: int = 0,
) -> CompResult:
    """Propagate one cell for ``n`` control steps, or abort on a failed gate."""
    if n < 1:
        raise ValueError("n must be at least 1")
    scale = np.broadcast_to(np.asarray(cfg.delta, dtype=float), cell.box.lo.shape)
    frontier = [cell]
    segments: list[ReachSegment] = []
    started = time.perf_counter()
    for k in range(n):
        step_index = start_step + k + 1
        children: list[FrontierItem] = []
        for item in frontier:
            try:
                segs = stepper(item.box, item.tag, step_index, depth)
            except ReachAbort as exc:
                return CompResult([], [], exc.reason, exc.detail)
            for seg in segs:
                ratio = growth_ratio(item.box, seg.endpoint_box, scale)
                if ratio > cfg.growth_factor:
                    return CompResult([], [], "accuracy", f"width growth {ratio:.3g}x at step {step_index}")
                segments.append(seg)
                children.append(FrontierItem(seg.endpoint_box, seg.planner_tag))
        frontier = children
        if cfg.cell_time_budget is not None and time.perf_counter() - started > cfg.cell_time_budget:
            return CompResult([], [], "time", f"budget {cfg.cell_time_budget}s exhausted at step {step_index}")
    return CompResult(segments, frontier)


class RefinementExhausted(Exception):
    pass


def _sort_key(item: FrontierItem):
    return (item.tag or "", tuple(item.box.lo), tuple(item.box.hi))


def item_tag(tag: str):
    return tag or None


def algorithm1(
    initial: IntervalBox,
    unsafe: UnsafeRegion | None,
    goal: IntervalBox,
    stepper: Stepper,
    cfg: ReachConfig,
    initial_tag: str = "single",
) -> ReachSet:
    """Partition-and-union reachable set computation with safety verdict.

    The frontier is a list of boxes, never hulled together.  Each round
    covers the union of the frontier boxes (separately per planner tag) with
    cells of a delta-lattice anchored at the initial set, propagates every
    cell for ``cfg.n_steps`` steps, re-partitions aborted cells at half the
    width, and takes the union of all endpoint boxes as the next frontier.
    """
    if intersects(initial, unsafe):
        raise ValueError("initial set intersects the unsafe region")
    started = time.perf_counter()
    delta0 = np.broadcast_to(np.asarray(cfg.delta, dtype=float), initial.lo.shape)
    rs = ReachSet(initial=initial, unsafe=unsafe)
    events: list[dict] = []
    rs.metadata = {
        "initial_lo": initial.lo.tolist(),
        "initial_hi": initial.hi.tolist(),
        "delta": delta0.tolist(),
        "n_steps": cfg.n_steps,
        "dt": cfg.dt,
        "refinement_events": events,
    }
    frontier = [FrontierItem(initial, initial_tag)]
    step = 0

    def comp(cell: FrontierItem, start: int, n: int, depth: int) -> list[CompResult]:
        res = reach_comp(cell, n, stepper, cfg, start, depth)
        if not res.aborted:
            return [res]
        events.append({
            "step": start,
            "depth": depth,
            "reason": res.abort_reason,
            "detail": res.detail,
            "cell_lo": cell.box.lo.tolist(),
            "cell_hi": cell.box.hi.tolist(),
        })
        log.debug("cell aborted (%s) at depth %d: %s", res.abort_reason, depth, res.detail)
        if depth >= cfg.max_refine_depth:
            raise RefinementExhausted(f"{res.abort_reason}: {res.detail}")
        out = []
        for sub in partition(cell.box, delta0 / 2 ** (depth + 1)):
            out.extend(comp(FrontierItem(sub, cell.tag), start, n, depth + 1))
        return out

    def finish(verdict: str, reason: str = "") -> ReachSet:
        rs.verdict = verdict
        rs.reason = reason
        rs.metadata["steps"] = step
        rs.metadata["wall_time"] = time.perf_counter() - started
        rs.metadata["frontier_size"] = len(frontier)
        rs.frontier = frontier
        return rs

    done: list[FrontierItem] = []
    while True:
        # boxes inside the goal set are finished and no longer propagated
        done.extend(item for item in frontier if goal.contains_box(item.box))
        frontier = [item for item in frontier if not goal.contains_box(item.box)]
        if not frontier:
            frontier = done
            return finish("Safe")
        if step >= cfg.max_steps:
            frontier = frontier + done
            return finish("Uncertain", "horizon exhausted")
        n = min(cfg.n_steps, cfg.max_steps - step)
        cells = []
        for tag in sorted({item.tag or "" for item in frontier}):
            group = [item.box for item in frontier if (item.tag or "") == tag]
            cells.extend(FrontierItem(c, item_tag(tag)) for c in lattice_cover(group, initial.lo, delta0))
        cells.sort(key=_sort_key)
        results: list[CompResult] = []
        try:
            for cell in cells:
                results.extend(comp(cell, step, n, 0))
        except RefinementExhausted as exc:
            return finish("Uncertain", f"refinement exhausted ({exc})")
        log.info("round at step %d: %d cells, %d refinement events so far, %.1fs",
                 step, len(cells), len(events), time.perf_counter() - started)
        new_segments = [s for r in results for s in r.segments]
        new_segments.sort(key=lambda s: (s.step_index, s.planner_tag, tuple(s.box.lo), tuple(s.box.hi)))
        rs.segments.extend(new_segments)
        step += n
        frontier = sorted((f for r in results for f in r.frontier), key=_sort_key)
        hit = next((s for s in new_segments if intersects(s, unsafe)), None)
        if hit is not None:
            return finish("Uncertain", f"unsafe intersection at step {hit.step_index} ({hit.planner_tag})")


# --------------------------------------------------------------------------
# analysis and export


@dataclass
class Clusters:
    intervals: list[tuple[float, float]]
    gaps: list[float]

    def __len__(self):
        return len(self.intervals)


def merge_intervals(intervals, tol: float = 0.0) -> Clusters:
    """Merge intervals that overlap (or lie within ``tol``) into maximal clusters."""
    ivs = sorted((float(a), float(b)) for a, b in intervals)
    merged: list[list[float]] = []
    for a, b in ivs:
        if merged and a <= merged[-1][1] + tol:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    out = [(a, b) for a, b in merged]
    gaps = [out[k + 1][0] - out[k][1] for k in range(len(out) - 1)]
    return Clusters(out, gaps)


def branch_clusters(rs: ReachSet, step_index: int, dim: int, use_endpoint: bool = False) -> Clusters:
    """Disjoint clusters of the step's segment boxes projected onto one dimension."""
    segs = rs.at_step(step_index)
    if not segs:
        raise ValueError(f"no segments at step {step_index}")
    boxes = [s.endpoint_box if use_endpoint else s.box for s in segs]
    return merge_intervals([(b.lo[dim], b.hi[dim]) for b in boxes])


def export_csv(rs: ReachSet, path) -> None:
    n = rs.initial.n if rs.initial is not None else rs.segments[0].box.n
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step_index", "t_lo", "t_hi", "planner_tag"]
                   + [f"lo_{j + 1}" for j in range(n)] + [f"hi_{j + 1}" for j in range(n)])
        for s in rs.segments:
            w.writerow([s.step_index, repr(s.t_lo), repr(s.t_hi), s.planner_tag]
                       + [repr(float(v)) for v in s.box.lo] + [repr(float(v)) for v in s.box.hi])


def export_metadata(rs: ReachSet, path, **extra) -> None:
    doc = {"verdict": rs.verdict, "reason": rs.reason, **rs.metadata, **extra}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_reach(csv_path, metadata_path=None) -> ReachSet:
    """Rebuild a reach set from its CSV export (and optional metadata sidecar)."""
    segments = []
    with open(csv_path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        n = (len(header) - 4) // 2
        for r in rows:
            lo = np.array([float(v) for v in r[4 : 4 + n]])
            hi = np.array([float(v) for v in r[4 + n : 4 + 2 * n]])
            box = IntervalBox(lo, hi)
            # endpoints are not exported; the step hull contains them
            segments.append(ReachSegment(int(r[0]), float(r[1]), float(r[2]), box, box, r[3]))
    rs = ReachSet(segments=segments)
    if metadata_path is not None and Path(metadata_path).exists():
        meta = json.loads(Path(metadata_path).read_text())
        rs.verdict = meta.get("verdict", rs.verdict)
        rs.reason = meta.get("reason", "")
        if "initial_lo" in meta:
            rs.initial = IntervalBox(np.array(meta["initial_lo"]), np.array(meta["initial_hi"]))
        rs.metadata = meta
    return rs
