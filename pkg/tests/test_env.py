import dataclasses
import math

import numpy as np
import pytest

from recoil import env as E


CFG = E.EnvConfig()
ZERO_NOISE = dataclasses.replace(CFG, noise_in=1e-12, noise_out=2e-12)


def test_reset_deterministic():
    a = E.reset(CFG, 7)
    b = E.reset(CFG, 7)
    assert np.array_equal(a.pos, b.pos)
    assert a.stage == 0 and a.status == E.STATUS_RUNNING


def test_reset_within_start_disc_many_seeds():
    c = np.asarray(CFG.start_center)
    for seed in range(1000):
        s = E.reset(CFG, seed)
        assert np.linalg.norm(s.pos - c) <= CFG.start_radius + 1e-12
        assert 0.0 <= s.pos[0] <= 1.0 and 0.0 <= s.pos[1] <= 1.0


def test_zero_action_zero_noise_fixed_point():
    s = E.reset(ZERO_NOISE, 3)
    s = dataclasses.replace(s, pos=np.array([0.2, 0.5]))  # corridor interior
    s2 = E.step(s, np.zeros(2), ZERO_NOISE)
    assert np.allclose(s2.pos, s.pos, atol=1e-9)
    assert s2.last_event == E.EV_NONE
    assert s2.stage == 0


def settled(state):
    return dataclasses.replace(state, corridor_streak=CFG.hazard_settle)


def test_slow_goal_entry_completes_subtask():
    goal = ZERO_NOISE.goal(0)
    start = goal - np.array([0.015, 0.0])
    s = settled(dataclasses.replace(E.reset(ZERO_NOISE, 3), pos=start))
    act = np.array([0.015, 0.0])
    s2 = E.step(s, act, ZERO_NOISE)
    assert s2.last_event == E.EV_SUBTASK
    assert s2.stage == 1


def test_fast_goal_entry_bounces_into_annulus():
    goal = ZERO_NOISE.goal(0)
    start = goal - np.array([0.015, 0.0])  # inside corridor
    lo, hi = ZERO_NOISE.bounce_annulus
    for seed in range(1000):
        s = settled(dataclasses.replace(E.reset(ZERO_NOISE, seed), pos=start))
        s2 = E.step(s, np.array([0.04, 0.0]), ZERO_NOISE)
        assert s2.last_event == E.EV_BOUNCE
        r = np.linalg.norm(s2.pos - goal)
        assert lo - 1e-12 <= r <= hi + 1e-12
        assert s2.bounces_this_stage == 1


def test_unsettled_entry_from_outside_corridor_can_be_fatal():
    goal = ZERO_NOISE.goal(0)
    outcomes = {"hazard": 0, "bounce": 0}
    # displaced beyond the halfwidth, one fast step from the goal disc
    start = goal + np.array([0.075, 0.0])
    assert not E.in_corridor(ZERO_NOISE, start, 0)
    for seed in range(2000):
        s = dataclasses.replace(E.reset(ZERO_NOISE, seed), pos=start)
        s2 = E.step(s, np.array([-0.05, 0.0]), ZERO_NOISE)
        if s2.status == E.STATUS_FAILED:
            assert s2.last_event == E.EV_HAZARD
            outcomes["hazard"] += 1
        else:
            assert s2.last_event == E.EV_BOUNCE
            outcomes["bounce"] += 1
    frac = outcomes["hazard"] / 2000
    assert abs(frac - ZERO_NOISE.hazard_prob) < 0.04


def test_unsettled_slow_entry_risks_hazard_but_can_succeed():
    goal = ZERO_NOISE.goal(0)
    start = goal - np.array([0.02, 0.0])
    got = {"hazard": 0, "subtask": 0}
    for seed in range(2000):
        s = dataclasses.replace(E.reset(ZERO_NOISE, seed), pos=start)  # streak 0
        s2 = E.step(s, np.array([0.02, 0.0]), ZERO_NOISE)
        got[{"hazard_fail": "hazard", "subtask": "subtask"}[s2.last_event]] += 1
    assert abs(got["hazard"] / 2000 - ZERO_NOISE.hazard_prob) < 0.04


def test_settled_entry_never_hazard():
    goal = ZERO_NOISE.goal(0)
    start = goal - np.array([0.02, 0.0])
    for seed in range(500):
        s = settled(dataclasses.replace(E.reset(ZERO_NOISE, seed), pos=start))
        s2 = E.step(s, np.array([0.02, 0.0]), ZERO_NOISE)
        assert s2.last_event == E.EV_SUBTASK


def test_determinism_full_trajectory():
    gen = np.random.default_rng(0)
    actions = gen.uniform(-0.05, 0.05, size=(200, 2))

    def roll():
        s = E.reset(CFG, 99)
        trace = []
        for a in actions:
            if s.status != E.STATUS_RUNNING:
                break
            s = E.step(s, a, CFG)
            trace.append((s.pos[0], s.pos[1], s.stage, s.status, s.last_event))
        return trace

    assert roll() == roll()


def test_step_on_terminal_raises():
    s = E.reset(CFG, 4)
    s = dataclasses.replace(s, status=E.STATUS_FAILED)
    with pytest.raises(E.SteppedTerminal):
        E.step(s, np.zeros(2), CFG)


def test_stage_never_decreases_and_success_iff_all_stages():
    gen = np.random.default_rng(17)
    for seed in range(20):
        s = E.reset(CFG, seed)
        prev_stage = s.stage
        while s.status == E.STATUS_RUNNING:
            a = gen.uniform(-0.05, 0.05, 2)
            s = E.step(s, a, CFG)
            assert s.stage >= prev_stage
            prev_stage = s.stage
        assert (s.status == E.STATUS_SUCCESS) == (s.stage == CFG.num_stages)


def test_timeout():
    s = E.reset(ZERO_NOISE, 5)
    s = dataclasses.replace(s, pos=np.array([0.5, 0.45]))
    while s.status == E.STATUS_RUNNING:
        s = E.step(s, np.zeros(2), ZERO_NOISE)
    assert s.last_event == E.EV_TIMEOUT
    assert s.steps == ZERO_NOISE.horizon


def test_oob_failure_after_consecutive_clamps():
    s = dataclasses.replace(E.reset(ZERO_NOISE, 6), pos=np.array([0.001, 0.5]))
    for _ in range(E.OOB_LIMIT):
        assert s.status == E.STATUS_RUNNING
        s = E.step(s, np.array([-0.05, 0.0]), ZERO_NOISE)
    assert s.status == E.STATUS_FAILED
    assert s.last_event == E.EV_OOB


def test_in_corridor_geometry():
    cfg = CFG
    e0, g0 = np.asarray(cfg.entries[0]), np.asarray(cfg.goals[0])
    mid = (e0 + g0) / 2
    assert E.in_corridor(cfg, mid, 0)
    perp = np.array([1.0, 0.0])  # corridor 0 runs along +y
    assert not E.in_corridor(cfg, mid + 2 * cfg.corridor_halfwidth * perp, 0)
    # boundary is inclusive
    assert E.in_corridor(cfg, mid + cfg.corridor_halfwidth * perp, 0)


def test_segment_distance_hand_values():
    a = np.array([0.0, 0.0])
    b = np.array([1.0, 0.0])
    assert E.segment_distance(np.array([0.5, 0.3]), a, b) == pytest.approx(0.3)
    assert E.segment_distance(np.array([-0.3, 0.4]), a, b) == pytest.approx(0.5)
    assert E.segment_distance(np.array([1.2, 0.0]), a, b) == pytest.approx(0.2)


def test_observation_layout_and_values():
    m = CFG.num_stages
    s = E.reset(CFG, 11)
    obs = E.observe(s, CFG)
    assert obs.shape == (2 + m + 3,)
    assert obs.dtype == np.float32
    assert np.allclose(obs[0:2], s.pos.astype(np.float32))
    assert obs[2 + s.stage] == 1.0 and obs[2 : 2 + m].sum() == 1.0
    assert obs[2 + m + 2] == 0.0  # no bounce yet

    s2 = dataclasses.replace(s, stage=2)
    obs2 = E.observe(s2, CFG)
    assert list(obs2[2 : 2 + m]) == [0.0, 0.0, 1.0, 0.0]

    s3 = dataclasses.replace(s, pos=np.asarray(CFG.entries[0], dtype=float))
    obs3 = E.observe(s3, CFG)
    want = np.linalg.norm(np.asarray(CFG.entries[0]) - np.asarray(CFG.goals[0]))
    assert obs3[2 + m] == pytest.approx(want, abs=1e-6)


def test_observation_onehot_zero_when_terminal():
    s = dataclasses.replace(E.reset(CFG, 1), status=E.STATUS_FAILED)
    obs = E.observe(s, CFG)
    assert obs[2 : 2 + CFG.num_stages].sum() == 0.0


def test_bounce_recency_decay():
    s = dataclasses.replace(E.reset(CFG, 1), last_bounce_step=0, steps=0)
    assert E.observe(s, CFG)[-1] == pytest.approx(1.0)
    s2 = dataclasses.replace(s, steps=20)
    assert E.observe(s2, CFG)[-1] == pytest.approx(math.exp(-1.0), abs=1e-6)


def test_invalid_config_rejected():
    with pytest.raises(E.InvalidConfig):
        E.EnvConfig(goal_radius=0.06)  # must stay below halfwidth
    with pytest.raises(E.InvalidConfig):
        E.EnvConfig(noise_in=0.02, noise_out=0.01)
    with pytest.raises(E.InvalidConfig):
        E.EnvConfig(entries=((0.2, 0.2),), goals=((0.2, 0.8),), num_stages=2)


def test_config_json_roundtrip():
    cfg = E.EnvConfig.default(5)
    doc = cfg.to_json()
    back = E.EnvConfig.from_json(doc)
    assert back == cfg
    # tolerant reader: unknown fields ignored
    doc["future_field"] = 123
    assert E.EnvConfig.from_json(doc) == cfg
