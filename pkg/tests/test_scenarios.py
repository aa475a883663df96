import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierreach.reach import IntervalBox, ReachSegment, ReachSet, intersects, step_affine
from hierreach.scenarios import (
    CHANGING_WINDOW_SCHEDULE,
    ExpertDataset,
    LeftTurnScenario,
    MergingScenario,
    SamplingConfig,
    band_p1_interval,
    check_schedule,
    left_turn_unsafe,
    make_scenario,
    merging_unsafe_window,
    scenario_to_dict,
    segment_sub_boxes,
    widest_free_window,
)
from hierreach.sim import TrajectoryBatch, first_violation, sample_box

LT = LeftTurnScenario()
MG = MergingScenario()


def _batch(sc, xs, ms, us):
    return TrajectoryBatch(xs, us, ms, np.zeros(xs.shape[:2]), sc.dt)


# ---------------------------------------------------------------- dynamics


def test_left_turn_coasting_step():
    x = LT.step_states(np.array([[-20.0, 10.0, 14.0, 16.0, 6.0]]), np.zeros(1))[0]
    assert np.allclose(x, [-15.0, 10.0, 14.0, 16.0, 6.5])


def test_left_turn_accelerating_step():
    x = LT.step_states(np.array([[0.0, 0.0, 14.0, 16.0, 0.0]]), np.array([2.0]))[0]
    assert np.allclose(x[:2], [0.25, 1.0])


def test_schedule_jump_when_time_crosses_seven():
    sc = LeftTurnScenario(schedule=CHANGING_WINDOW_SCHEDULE)
    x = np.array([[-60.0, 10.5, 13.0, 21.0, 6.5]])
    x = sc.step_states(x, np.zeros(1))
    assert x[0, 4] == pytest.approx(7.0)
    assert (x[0, 2], x[0, 3]) == (15.0, 21.0)
    x = sc.step_states(x, np.zeros(1))
    assert (x[0, 2], x[0, 3]) == (15.0, 21.0)


def test_schedule_reset_on_boxes_straddling_an_event():
    sc = LeftTurnScenario(schedule=CHANGING_WINDOW_SCHEDULE)
    box = IntervalBox([-60.0, 10.0, 13.0, 21.0, 6.5], [-59.0, 11.0, 13.0, 21.0, 7.0])
    lo, hi = sc.dynamics().apply_reset(box.lo, box.hi)
    assert (lo[2], hi[2]) == (13.0, 15.0)
    assert (lo[3], hi[3]) == (21.0, 21.0)


def test_full_schedule_reaches_final_window():
    sc = LeftTurnScenario(schedule=CHANGING_WINDOW_SCHEDULE)
    xs, _, _ = sc.rollout(np.array([[-60.0, 10.5, 13.0, 21.0, 6.0]]), 10, mode=1)
    tmin, tmax = xs[0, :, 2], xs[0, :, 3]
    assert (tmin[-1], tmax[-1]) == (20.0, 21.0)
    assert np.all(np.diff(tmin) >= 0) and np.all(np.diff(tmax) <= 0)
    assert np.all(tmin <= tmax)


def test_schedule_validation():
    check_schedule(CHANGING_WINDOW_SCHEDULE)
    with pytest.raises(ValueError, match="widens"):
        check_schedule([(6.0, 15.0, 21.0), (7.0, 13.0, 21.0)])
    with pytest.raises(ValueError, match="widens"):
        check_schedule([(6.0, 15.0, 20.0), (7.0, 15.0, 21.0)])
    with pytest.raises(ValueError, match="increase"):
        check_schedule([(7.0, 13.0, 21.0), (6.0, 15.0, 21.0)])
    with pytest.raises(ValueError):
        check_schedule([(6.0, 22.0, 21.0)])
    with pytest.raises(ValueError):
        LeftTurnScenario(schedule=[(6.0, 15.0, 21.0), (7.0, 13.0, 21.0)])


@settings(max_examples=40, deadline=None)
@given(
    widths=st.lists(st.floats(0.0, 3.0), min_size=1, max_size=6),
    shrink=st.lists(st.tuples(st.floats(0.0, 2.0), st.floats(0.0, 2.0)), min_size=6, max_size=6),
)
def test_tightening_schedules_accepted_widening_rejected(widths, shrink):
    a, b, t, sched = 10.0, 30.0, 0.0, []
    for k, w in enumerate(widths):
        da, db = shrink[k]
        if a + da > b - db:
            break
        a, b, t = a + da, b - db, t + 0.5 + w
        sched.append((t, a, b))
    check_schedule(sched)
    if sched:
        t_last, a_last, b_last = sched[-1]
        with pytest.raises(ValueError):
            check_schedule(sched + [(t_last + 1.0, a_last - 0.5, b_last)])


def test_merging_truck_keeps_speed():
    x0 = np.array([[0.0, 25.0, -24.0, 25.3], [5.0, 20.0, -30.0, 24.5]])
    xs, _, _ = MG.rollout(x0, 20)
    assert np.all(xs[:, :, 3] == x0[:, None, 3])


def test_merging_gap_closed_form():
    # coasting: gap(t) = gap0 + (v1 - v2) t, p2(t) = p2_0 + v2 t
    x = np.array([[0.0, 27.0, -24.0, 25.0]])
    for k in range(1, 9):
        x = MG.step_states(x, np.zeros(1))
        t = 0.5 * k
        assert x[0, 0] - x[0, 2] == pytest.approx(24.0 + 2.0 * t, abs=1e-12)
        assert x[0, 2] == pytest.approx(-24.0 + 25.0 * t, abs=1e-12)


# ---------------------------------------------------------------- sets


@pytest.mark.parametrize("window", [(14.0, 16.0), (17.0, 19.0), (20.0, 21.0)])
def test_left_turn_unsafe_boxes(window):
    region = left_turn_unsafe(*window)
    assert region.box is not None
    assert region.box.lo[0] == 4.5 and region.box.hi[0] == 14.0
    assert (region.box.lo[4], region.box.hi[4]) == window
    a, b = window
    inside = np.array([[9.0, 3.0, 0.0, 0.0, (a + b) / 2]])
    assert region.contains(inside)[0]
    for p, t in [(4.4, a), (14.1, a), (9.0, a - 0.01), (9.0, b + 0.01)]:
        assert not region.contains(np.array([[p, 3.0, 0.0, 0.0, t]]))[0]


def test_state_window_unsafe_matches_fixed_box():
    rng = np.random.default_rng(0)
    x = rng.uniform([0.0, 0.0, 14.0, 16.0, 10.0], [20.0, 10.0, 14.0, 16.0, 20.0], (5000, 5))
    assert np.array_equal(LT.unsafe().contains(x), LT.unsafe(14.0, 16.0).contains(x))


def test_goal_is_horizon_slab():
    g = LT.goal()
    assert g.lo[4] == 16.0 and np.isinf(g.hi[4])
    assert MG.goal().lo[0] == 150.0


def test_named_initial_sets():
    assert np.allclose(LT.initial_set("fixed_window").lo, [-64.35, 10.5, 14, 16, 6])
    assert np.allclose(LT.initial_set("changing_window").hi, [-59.7, 10.51, 13, 21, 6])
    m = MG.initial_set("merge")
    assert np.allclose(m.lo, [0, 25, -24.5, 24.5]) and np.allclose(m.hi, [0, 25, -23.5, 25.5])
    with pytest.raises(KeyError, match="known"):
        LT.initial_set("nope")


def test_horizon_and_last_update_step():
    assert LT.horizon_steps(LT.initial_set("fixed_window")) == 20
    assert LT.last_update_step(6.0) is None
    sc = LeftTurnScenario(schedule=CHANGING_WINDOW_SCHEDULE)
    # last change at t = 10 is applied at the end of step 8 from t0 = 6
    assert sc.last_update_step(6.0) == 9


def test_band_region_constraints():
    region = MG.band_region(80.0, 110.0)
    pts = np.array([
        [90.0, 25.0, 80.0, 25.0],  # gap 10, inside window
        [90.0, 25.0, 60.0, 25.0],  # gap 30
        [70.0, 25.0, 65.0, 25.0],  # before window
        [110.0, 25.0, 90.25, 25.0],  # gap exactly 19.75 at the window edge
    ])
    assert list(region.contains(pts)) == [True, False, False, True]


@settings(max_examples=60, deadline=None)
@given(
    lo=st.lists(st.floats(-50, 200), min_size=4, max_size=4),
    w=st.lists(st.floats(0, 30), min_size=4, max_size=4),
)
def test_band_interval_agrees_with_exact_lp(lo, w):
    lo = np.array(lo)
    box = IntervalBox(lo, lo + np.array(w))
    iv = band_p1_interval(box, 19.75)
    wide = MG.band_region(-1e6, 1e6)
    assert (iv is not None) == intersects(box, wide, exact=True)
    if iv is not None:
        a, b = iv
        assert intersects(box, MG.band_region(a, b), exact=True)
        if a - box.lo[0] > 1e-6:
            assert not intersects(box, MG.band_region(box.lo[0], a - 1e-6), exact=True)


# ---------------------------------------------------------------- windows


def _segment(lo, hi, k=1):
    box = IntervalBox(lo, hi)
    return ReachSegment(k, 0.5 * (k - 1), 0.5 * k, box, box, "yield")


def test_window_for_reach_far_from_band():
    # C1 always far ahead of the truck
    segs = [_segment([10.0 * k, 25.0, 10.0 * k - 60.0, 25.0], [10.0 * k + 5, 26.0, 10.0 * k - 50.0, 25.0], k)
            for k in range(15)]
    rs = ReachSet(segs, verdict="Safe")
    assert merging_unsafe_window(rs, 19.75) == (0.0, 150.0)


def test_no_window_when_band_covered():
    segs = [_segment([0.0, 25.0, 0.0, 25.0], [150.0, 26.0, 150.0, 25.0])]
    assert merging_unsafe_window(ReachSet(segs, verdict="Safe"), 19.75) is None


def test_no_window_for_incomplete_reach():
    segs = [_segment([10.0, 25.0, -60.0, 25.0], [15.0, 26.0, -50.0, 25.0])]
    assert merging_unsafe_window(ReachSet(segs, verdict="Uncertain"), 19.75) is None


def test_window_is_disjoint_under_constraint_test():
    segs = [
        _segment([0.0, 25.0, -24.5, 25.0], [30.0, 26.0, 5.0, 25.0], 1),
        _segment([30.0, 25.0, 20.0, 25.0], [60.0, 26.0, 30.0, 25.0], 2),
        _segment([130.0, 25.0, 120.0, 25.0], [160.0, 26.0, 130.0, 25.0], 3),
    ]
    rs = ReachSet(segs, verdict="Safe")
    win = merging_unsafe_window(rs, 19.75)
    # band meets p1 <= 30 + 19.75 and p1 >= 130; lattice endpoints stay strictly clear
    assert win == (50.0, 129.0)
    region = MG.band_region(*win)
    assert not any(intersects(s.box, region, exact=True) for s in segs)


def test_sub_boxes_cover_the_flow():
    dyn = MG.dynamics()
    start = IntervalBox([0.0, 25.0, -24.5, 24.5], [0.0, 25.0, -23.5, 25.5])
    span, end = step_affine(dyn, start, (-1.0, 2.0), 0.5)
    seg = ReachSegment(1, 0.0, 0.5, span, end, "yield", start, (-1.0, 2.0))
    subs = segment_sub_boxes(seg, dyn, 10)
    assert len(subs) == 10
    rng = np.random.default_rng(0)
    x = start.sample(rng, 2000)
    u = rng.uniform(-1.0, 2.0, 2000)
    for j in range(10):
        tt = 0.05 * (j + rng.uniform(size=2000))
        p = x.copy()
        p[:, 0] += x[:, 1] * tt + 0.5 * u * tt ** 2
        p[:, 1] += u * tt
        p[:, 2] += x[:, 3] * tt
        b = subs[j]
        assert np.all((p >= b.lo - 1e-9) & (p <= b.hi + 1e-9))
    assert segment_sub_boxes(ReachSegment(1, 0.0, 0.5, span, end), dyn, 10) == [span]


def test_widest_free_window_examples():
    assert widest_free_window([], 0.0, 150.0) == (0.0, 150.0)
    assert widest_free_window([(0.0, 150.0)], 0.0, 150.0) is None
    assert widest_free_window([(20.5, 40.0), (70.0, 79.5)], 0.0, 150.0) == (80.0, 150.0)
    assert widest_free_window([(0.0, 79.5), (110.2, 150.0)], 0.0, 150.0) == (80.0, 110.0)
    # closed bad intervals exclude integer endpoints they touch
    assert widest_free_window([(0.0, 80.0), (110.0, 150.0)], 0.0, 150.0) == (81.0, 109.0)


# ---------------------------------------------------------------- expert


def test_expert_proceeds_after_window():
    x = np.array([[-80.0, 10.0, 2.0, 4.0, 6.0]])
    labels, u = LT.expert_policy(x)
    assert labels[0] == LT.behavior_index("proceed")
    assert u[0] >= 0.0


def test_expert_at_rest_at_stop_line_on_red():
    x = np.array([[0.0, 0.0, 30.0, 32.0, 30.0]])
    assert LT.red_onset(30.0) == 30.0
    labels, u = LT.expert_policy(x)
    assert labels[0] == LT.behavior_index("stop")
    assert u[0] == 0.0


def test_expert_three_branches_from_branching_set():
    box = LT.initial_set("branching")
    x0 = sample_box(box, 4000, seed=0)
    xs, ms, _ = LT.rollout(x0, LT.horizon_steps(box))
    first = ms[:, 0]
    counts = np.bincount(first, minlength=4)[1:]
    assert np.all(counts > 0)
    stop = first == LT.behavior_index("stop")
    assert xs[stop, :, 0].max() < 4.5
    assert xs[stop, -1, 1].max() < 0.1
    proceed = first == LT.behavior_index("proceed")
    assert xs[proceed, -1, 0].min() > 14.0
    yld = first == LT.behavior_index("yield")
    # yielding cars wait for the window [17, 19] before entering
    entered = xs[yld, :, 0] >= 4.5
    assert not np.any(entered & (xs[yld, :, 4] < 19.0))


def test_expert_controls_within_bounds():
    for sc in (LT, MG):
        rng = np.random.default_rng(3)
        x = sc._fix_initial(IntervalBox.from_bounds(sc.sampling.ranges).sample(rng, 5000))
        for k in range(1, len(sc.behaviors) + 1):
            u = sc.control(x, np.full(len(x), k))
            assert np.all((u >= sc.u_bounds[0]) & (u <= sc.u_bounds[1]))


def test_merging_expert_rule():
    ok = np.array([[0.0, 25.0, -30.0, 25.0]])  # projected gap 30
    tight = np.array([[0.0, 25.0, -20.0, 25.0]])  # projected gap 20
    assert MG.decide(ok)[0] == MG.behavior_index("proceed")
    assert MG.decide(tight)[0] == MG.behavior_index("yield")
    assert MG.control(ok, MG.behavior_index("proceed"))[0] > 0
    assert MG.control(tight, MG.behavior_index("yield"))[0] < 0


@pytest.mark.parametrize("redecide", [None, 1])
def test_expert_rollouts_avoid_left_turn_unsafe(redecide):
    x0 = LT._fix_initial(IntervalBox.from_bounds(LT.sampling.ranges).sample(np.random.default_rng(1), 3000))
    xs, ms, us = LT.rollout(x0, LT.sampling.horizon, redecide_every=redecide)
    step, _ = first_violation(LT.dynamics(), _batch(LT, xs, ms, us), LT.unsafe())
    assert np.all(step < 0)


def test_expert_rollouts_avoid_merging_band():
    x0 = sample_box(MG.initial_set("merge"), 3000, seed=0)
    xs, ms, us = MG.rollout(x0, 28)
    assert set(np.unique(ms[:, 0])) == {1, 2}
    step, _ = first_violation(MG.dynamics(), _batch(MG, xs, ms, us), MG.band_region(80.0, 110.0))
    assert np.all(step < 0)


# ---------------------------------------------------------------- datasets


def test_rollout_sample_count():
    xs, ms, us = LT.rollout(np.array([[-80.0, 10.0, 2.0, 4.0, 6.0]]), 2)
    assert xs.shape == (1, 3, 5) and ms.shape == (1, 2) and us.shape == (1, 2)


def test_dataset_count_one_rollout():
    cfg = SamplingConfig(ranges=LT.sampling.ranges, rollouts=1, horizon=2, seed=0)
    data = LT.generate_dataset(cfg)
    # two samples for each forced behavior and for the expert itself
    assert len(data) == 2 * (len(LT.behaviors) + 1)


def test_all_proceed_region_single_label():
    # window long gone and close enough to enter before red even when forced to brake
    ranges = [[-40.0, -30.0], [9.0, 11.0], [2.0, 3.0], [0.0, 1.0], [6.0, 7.0]]
    data = LT.generate_dataset(SamplingConfig(ranges=ranges, rollouts=50, horizon=6, seed=2))
    assert set(np.unique(data.labels)) == {LT.behavior_index("proceed")}


@pytest.mark.parametrize("sc", [LT, MG], ids=["left_turn", "merging"])
def test_default_dataset_label_shares(sc):
    data = sc.generate_dataset()
    hist = data.label_histogram(len(sc.behaviors))
    total = sum(hist.values())
    assert all(c / total >= 0.10 for c in hist.values()), hist


def test_dataset_invariants_and_determinism():
    cfg = SamplingConfig(ranges=LT.sampling.ranges, rollouts=40, horizon=8, seed=5)
    a, b = LT.generate_dataset(cfg), LT.generate_dataset(cfg)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.controls, b.controls)
    assert np.array_equal(a.labels, LT.decide(a.states))
    assert np.all((a.controls >= -4.0) & (a.controls <= 3.0))
    c = LT.generate_dataset(SamplingConfig(ranges=LT.sampling.ranges, rollouts=40, horizon=8, seed=6))
    assert not np.array_equal(a.states, c.states)


def test_dataset_csv_round_trip(tmp_path):
    data = MG.generate_dataset(SamplingConfig(ranges=MG.sampling.ranges, rollouts=5, horizon=3, seed=1))
    path = tmp_path / "d.csv"
    data.to_csv(path, MG.state_names)
    assert path.read_text().splitlines()[0] == "p1,v1,p2,v2,label,mode,u"
    again = ExpertDataset.from_csv(path)
    assert np.array_equal(again.states, data.states)
    assert np.array_equal(again.labels, data.labels)
    assert np.array_equal(again.controls, data.controls)


def test_training_views():
    data = LT.generate_dataset(SamplingConfig(ranges=LT.sampling.ranges, rollouts=20, horizon=4, seed=0))
    beh = data.for_behavior(LT)
    centers = np.array([-2 / 3, 0.0, 2 / 3])
    assert np.all(np.min(np.abs(beh.targets.reshape(-1, 1) - centers), axis=1) < 1e-12)
    motion = data.for_motion(LT, 2)
    assert len(motion.inputs) == np.sum(data.modes == 2)
    assert np.all(np.abs(motion.targets) <= 1.0)


# ---------------------------------------------------------------- config


def test_make_scenario_overrides_and_errors():
    sc = make_scenario("merging", d_th=15.0, norm_lo=[-1, 0, -1, 0])
    assert sc.d_th == 15.0 and isinstance(sc.norm_lo, np.ndarray)
    sc = make_scenario("left_turn", schedule=[[6, 13, 21], [7, 15, 21]])
    assert sc.schedule == [(6, 13, 21), (7, 15, 21)]
    with pytest.raises(ValueError, match="unknown scenario"):
        make_scenario("roundabout")
    with pytest.raises(ValueError, match="parameters"):
        make_scenario("merging", lanes=3)


def test_scenario_dict_round_trip():
    doc = scenario_to_dict(LeftTurnScenario(schedule=CHANGING_WINDOW_SCHEDULE))
    doc.pop("name")
    again = make_scenario("left_turn", **doc)
    assert again.schedule == CHANGING_WINDOW_SCHEDULE
    assert again.sampling == LT.sampling
