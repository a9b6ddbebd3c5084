import math

import numpy as np
import pytest

from stopgame.game import GameConfig, DegenerateBeliefError, belief_update, reward
from stopgame.observation import ObservationModel
from stopgame.simulator import (EpisodeTrace, Step, TerminalReason, episode_stats,
                                estimate_objective, run_episode, run_episodes, write_traces)
from stopgame.strategies import (BaselineStrategy, BoundAttacker, MixedThresholdStrategy, Player,
                                 ThresholdVector, constant_attacker, constant_defender)


def _mixtures(rng, L, n=8):
    dm = MixedThresholdStrategy.uniform(
        [ThresholdVector(Player.DEFENDER, rng.normal(0, 2, L)) for _ in range(n)])
    am = BoundAttacker(MixedThresholdStrategy.uniform(
        [ThresholdVector(Player.ATTACKER, rng.normal(0, 2, 2 * L)) for _ in range(n)]), dm)
    return dm, am


def test_always_stop_single_step(binary_obs):
    cfg = GameConfig(L=1)
    tr = run_episode(cfg, binary_obs, constant_defender(1, 1.0), constant_attacker(1, 0.0, 0.0),
                     constant_attacker(1, 0.0, 0.0), np.random.default_rng(0))
    assert len(tr) == 1
    assert tr.steps[0].r == -2
    assert tr.terminal_reason is TerminalReason.FINAL_DEFENDER_STOP
    assert tr.discounted_return == -2


def test_zero_reward_path(binary_obs):
    cfg = GameConfig(L=2, t_max=50)
    never_a = constant_attacker(2, 0.0, 0.0)
    tr = run_episode(cfg, binary_obs, constant_defender(2, 0.0), never_a, never_a,
                     np.random.default_rng(1))
    assert tr.discounted_return == 0
    assert tr.terminal_reason is TerminalReason.TRUNCATED
    assert len(tr) == 50


def test_estimate_deterministic(binary_obs):
    cfg = GameConfig(L=1)
    a = constant_attacker(1, 0.3, 0.2)
    est = estimate_objective(cfg, binary_obs, constant_defender(1, 1.0), a, a, 500, 7)
    assert est.mean == -2 and est.std_error == 0


def test_seed_determinism(desk, rng):
    cfg, obs = desk
    dm, am = _mixtures(rng, cfg.L)
    a = run_episodes(cfg, obs, dm, am, am, 20, seed=42)
    b = run_episodes(cfg, obs, dm, am, am, 20, seed=42)
    assert a == b


def test_trace_replay(desk, rng):
    """Every recorded belief and reward agrees with the reference update."""
    cfg, obs = desk
    dm, am = _mixtures(rng, cfg.L)
    for tr in run_episodes(cfg, obs, dm, am, am, 200, seed=9):
        ret = 0.0
        for i, st in enumerate(tr.steps):
            assert st.r == pytest.approx(reward(st.s, st.a_d, st.a_a, st.l, cfg), abs=1e-12)
            ret += cfg.gamma ** i * st.r
            if i + 1 < len(tr.steps):
                nxt = tr.steps[i + 1]
                assert nxt.l == st.l - st.a_d
                bp = belief_update(st.b1, st.a_d, st.o, am, st.l, obs, cfg)
                assert nxt.b1 == pytest.approx(bp, abs=1e-9)
        assert tr.discounted_return == pytest.approx(ret, abs=1e-9)


def test_split_halves_agree(desk, rng):
    cfg, obs = desk
    dm, am = _mixtures(rng, cfg.L)
    e1 = estimate_objective(cfg, obs, dm, am, am, 5000, seed=1)
    e2 = estimate_objective(cfg, obs, dm, am, am, 5000, seed=2)
    pooled = math.hypot(e1.std_error, e2.std_error)
    assert abs(e1.mean - e2.mean) <= 3 * pooled


def test_separate_belief_model(desk, rng):
    cfg, obs = desk
    dm, am = _mixtures(rng, cfg.L)
    other = constant_attacker(cfg.L, 0.5, 0.0)
    for tr in run_episodes(cfg, obs, dm, am, other, 50, seed=3):
        for st, nxt in zip(tr.steps, tr.steps[1:]):
            bp = belief_update(st.b1, st.a_d, st.o, other, st.l, obs, cfg)
            assert nxt.b1 == pytest.approx(bp, abs=1e-9)


def test_alert_threshold_baseline(desk):
    cfg, obs = desk
    att = constant_attacker(cfg.L, 0.2, 0.0)
    for tr in run_episodes(cfg, obs, BaselineStrategy("alert-threshold", 5), att, att, 30, 4):
        assert tr.steps[0].a_d == 0  # no observation yet
        for st, nxt in zip(tr.steps, tr.steps[1:]):
            assert nxt.a_d == int(st.o >= 5)


def test_degenerate_raise():
    cfg = GameConfig(L=2)
    obs = ObservationModel([1.0, 0.0], [0.0, 1.0])
    att, model = constant_attacker(2, 1.0, 0.0), constant_attacker(2, 0.0, 0.0)
    with pytest.raises(DegenerateBeliefError):
        estimate_objective(cfg, obs, constant_defender(2, 0.0), att, model, 10, 0, fallback="raise")
    est = estimate_objective(cfg, obs, constant_defender(2, 0.0), att, model, 10, 0)
    assert math.isfinite(est.mean)


def _trace(lengths):
    steps = tuple(Step(t, 0, 0.0, 1, 0, 0, 0, 0.0) for t in range(1, 4))
    return EpisodeTrace(steps, TerminalReason.TRUNCATED, 0.0, 1, lengths, 0)


def test_episode_stats():
    st = episode_stats([_trace(2), _trace(4)])
    assert st.mean_intrusion_length == 3
    single = episode_stats([_trace(2)])
    assert single.mean_intrusion_length == 2 and single.mean_episode_length == 3


def test_episode_stats_recount(desk, rng, tmp_path):
    cfg, obs = desk
    dm, am = _mixtures(rng, cfg.L)
    traces = run_episodes(cfg, obs, dm, am, am, 100, seed=5)
    st = episode_stats(traces)
    stops = sum(s.a_d for tr in traces for s in tr.steps)
    assert sum(st.stop_time_histogram.values()) == stops
    assert st.mean_episode_length == pytest.approx(np.mean([len(t.steps) for t in traces]))
    assert st.mean_return == pytest.approx(np.mean([t.discounted_return for t in traces]))
    path = tmp_path / "traces.csv"
    write_traces(path, traces)
    assert len(path.read_text().splitlines()) == 1 + sum(len(t) + 1 for t in traces)
