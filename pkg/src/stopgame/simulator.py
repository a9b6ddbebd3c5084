"""Episode simulation and Monte Carlo estimates of the players' objectives."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import _kernels as K
from .game import DegenerateBeliefError, GameConfig
from .observation import ObservationModel
from .strategies import (BaselineKind, BaselineStrategy, BoundAttacker, GridStrategy,
                         MixedThresholdStrategy, Player, ThresholdVector, as_mixture)

UNIFORMS_PER_STEP = 4


class TerminalReason(str, Enum):
    FINAL_DEFENDER_STOP = "FinalDefenderStop"
    INTRUSION_STOPPED_BY_CHANCE = "IntrusionStoppedByChance"
    ATTACKER_ABORTED = "AttackerAborted"
    TRUNCATED = "Truncated"
    DEGENERATE_BELIEF = "DegenerateBelief"


_REASONS = {
    K.REASON_FINAL_STOP: TerminalReason.FINAL_DEFENDER_STOP,
    K.REASON_CHANCE: TerminalReason.INTRUSION_STOPPED_BY_CHANCE,
    K.REASON_ABORT: TerminalReason.ATTACKER_ABORTED,
    K.REASON_TRUNCATED: TerminalReason.TRUNCATED,
    K.REASON_DEGENERATE: TerminalReason.DEGENERATE_BELIEF,
}
_FALLBACK = {"likelihood": K.FALLBACK_LIKELIHOOD, "carry": K.FALLBACK_CARRY,
             "raise": K.FALLBACK_RAISE}


@dataclass(frozen=True)
class Step:
    t: int
    s: int
    b1: float
    l: int
    a_d: int
    a_a: int
    o: int | None
    r: float


@dataclass(frozen=True)
class EpisodeTrace:
    steps: tuple[Step, ...]
    terminal_reason: TerminalReason
    discounted_return: float
    intrusion_start: int | None
    intrusion_length: int
    degenerate_updates: int = 0

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class ObjectiveEstimate:
    mean: float
    std_error: float
    n_episodes: int

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.mean - 1.96 * self.std_error, self.mean + 1.96 * self.std_error)

    def negate(self) -> "ObjectiveEstimate":
        return ObjectiveEstimate(-self.mean, self.std_error, self.n_episodes)


@dataclass(frozen=True)
class BatchResult:
    """Per-episode outputs of a simulated batch."""

    returns: np.ndarray
    lengths: np.ndarray
    reasons: np.ndarray
    intrusion_start: np.ndarray
    intrusion_length: np.ndarray
    degenerate: np.ndarray

    def estimate(self) -> ObjectiveEstimate:
        return summarize_returns(self.returns)


def summarize_returns(returns: np.ndarray) -> ObjectiveEstimate:
    x = np.asarray(returns, dtype=float)
    n = x.size
    if n == 0:
        raise ValueError("no returns to summarise")
    mean = math.fsum(x) / n
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return ObjectiveEstimate(mean, se, n)


# -- strategy encodings -------------------------------------------------------

_E1 = np.zeros(1)
_E2 = np.zeros((1, 1))
_E3 = np.zeros((1, 1, 1))


def _f(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _sorted_columns(mix: MixedThresholdStrategy):
    order = np.argsort(mix.thetas, axis=0, kind="stable")
    ths = np.take_along_axis(mix.thetas, order, axis=0)
    ws = mix.weights[order]
    cw = np.vstack([np.zeros((1, ws.shape[1])), np.cumsum(ws, axis=0)])
    return _f(ths), _f(ws), _f(cw)


def _encode_defender(strategy, L: int):
    if isinstance(strategy, ThresholdVector):
        strategy = as_mixture(strategy)
    if isinstance(strategy, MixedThresholdStrategy):
        if strategy.player is not Player.DEFENDER:
            raise ValueError("defender slot received an attacker mixture")
        _check_L(strategy.L, L)
        return (0, *_sorted_columns(strategy), _E2, 0.0)
    if isinstance(strategy, GridStrategy):
        if strategy.player is not Player.DEFENDER:
            raise ValueError("defender slot received an attacker grid strategy")
        _check_L(strategy.L, L)
        return 1, _E2, _E2, _E2, _f(strategy.table), 0.0
    if isinstance(strategy, BaselineStrategy):
        if strategy.kind is BaselineKind.ALERT_THRESHOLD:
            return 2, _E2, _E2, _E2, _E2, float(strategy.threshold)
        return 3, _E2, _E2, _E2, _E2, 0.0
    raise TypeError(f"unsupported defender strategy {type(strategy).__name__}")


def _encode_attacker(strategy, L: int):
    if isinstance(strategy, BoundAttacker):
        _check_L(strategy.L, L)
        dk, dth, dw, dcw, dtab, _ = _encode_defender(strategy.defender, L)
        if dk > 1:
            raise TypeError("attackers can only be bound to threshold or grid defender strategies")
        a = strategy.attacker
        return (0, *_sorted_columns(a), _E3, float(a.d_floor), dk, dth, dw, dcw, dtab)
    if isinstance(strategy, GridStrategy):
        if strategy.player is not Player.ATTACKER:
            raise ValueError("attacker slot received a defender grid strategy")
        _check_L(strategy.L, L)
        return (1, _E2, _E2, _E2, _f(strategy.table), 0.0, 1, _E2, _E2, _E2, _E2)
    raise TypeError(f"unsupported attacker strategy {type(strategy).__name__}; "
                    "bind threshold mixtures to a defender with BoundAttacker")


def _same_defender(x, y) -> bool:
    if x is y:
        return True
    if isinstance(x, ThresholdVector):
        x = as_mixture(x)
    if isinstance(y, ThresholdVector):
        y = as_mixture(y)
    if isinstance(x, MixedThresholdStrategy) and isinstance(y, MixedThresholdStrategy):
        return np.array_equal(x.thetas, y.thetas) and np.array_equal(x.weights, y.weights)
    if isinstance(x, GridStrategy) and isinstance(y, GridStrategy):
        return x.player is y.player and np.array_equal(x.table, y.table)
    return False


def _share_flags(defender, attacker, model) -> np.ndarray:
    ab = attacker.defender if isinstance(attacker, BoundAttacker) else None
    mb = model.defender if isinstance(model, BoundAttacker) else None
    same_model = attacker is model
    if not same_model and isinstance(attacker, BoundAttacker) and isinstance(model, BoundAttacker):
        x, y = attacker.attacker, model.attacker
        same_model = (x.d_floor == y.d_floor and np.array_equal(x.thetas, y.thetas)
                      and np.array_equal(x.weights, y.weights) and _same_defender(ab, mb))
    elif not same_model and isinstance(attacker, GridStrategy) and isinstance(model, GridStrategy):
        same_model = _same_defender(attacker, model)
    return np.array([
        ab is not None and _same_defender(ab, defender),
        mb is not None and _same_defender(mb, defender),
        mb is not None and ab is not None and _same_defender(mb, ab),
        same_model,
    ], dtype=np.bool_)


def _check_L(got: int, want: int):
    if got != want:
        raise ValueError(f"strategy built for L={got}, game has L={want}")


def episode_uniforms(seed, n_episodes: int, t_max: int) -> np.ndarray:
    """Uniform draws of shape (n, t_max, 4); episode i uses child stream i of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(n_episodes)
    u = np.empty((n_episodes, t_max, UNIFORMS_PER_STEP))
    for i, ss in enumerate(children):
        u[i] = np.random.default_rng(ss).random((t_max, UNIFORMS_PER_STEP))
    return u


def simulate_batch(cfg: GameConfig, obs: ObservationModel, defender, attacker,
                   attacker_belief_model, u: np.ndarray, fallback: str = "likelihood",
                   record: bool = False):
    """Run one episode per leading slice of ``u``; returns (BatchResult, traces or None)."""
    if fallback not in _FALLBACK:
        raise ValueError(f"unknown fallback mode {fallback!r}")
    u = np.ascontiguousarray(u, dtype=np.float64)
    if u.ndim != 3 or u.shape[1] != cfg.t_max or u.shape[2] != UNIFORMS_PER_STEP:
        raise ValueError(f"uniforms must have shape (n, {cfg.t_max}, {UNIFORMS_PER_STEP})")
    n = u.shape[0]
    rewards = np.array([cfg.r_st, cfg.r_cost, cfg.r_int, cfg.gamma])
    phi = np.array(cfg.phi)
    pmf = _f(obs.matrix)
    cdf = _f(obs._cdfs)
    traces = (np.zeros((n, cfg.t_max, K.TRACE_COLS)) if record
              else np.zeros((1, 1, K.TRACE_COLS)))
    out = K.batch(u, rewards, phi, pmf, cdf,
                  *_encode_defender(defender, cfg.L),
                  *_encode_attacker(attacker, cfg.L),
                  *_encode_attacker(attacker_belief_model, cfg.L),
                  _share_flags(defender, attacker, attacker_belief_model),
                  _FALLBACK[fallback], traces)
    res = BatchResult(*out)
    if fallback == "raise" and np.any(res.reasons == K.REASON_DEGENERATE):
        i = int(np.flatnonzero(res.reasons == K.REASON_DEGENERATE)[0])
        raise DegenerateBeliefError(
            f"episode {i}: observation impossible under the attacker belief model")
    return res, (traces if record else None)


def _trace_from_arrays(res: BatchResult, i: int, tr: np.ndarray) -> EpisodeTrace:
    steps = []
    for t in range(int(res.lengths[i])):
        row = tr[t]
        o = int(row[K.TR_O])
        steps.append(Step(t + 1, int(row[K.TR_S]), float(row[K.TR_B]), int(row[K.TR_L]),
                          int(row[K.TR_AD]), int(row[K.TR_AA]), None if o < 0 else o,
                          float(row[K.TR_R])))
    start = int(res.intrusion_start[i])
    return EpisodeTrace(tuple(steps), _REASONS[int(res.reasons[i])],
                        float(res.returns[i]), None if start < 0 else start,
                        int(res.intrusion_length[i]), int(res.degenerate[i]))


def run_episode(cfg: GameConfig, obs: ObservationModel, defender, attacker,
                attacker_belief_model, rng: np.random.Generator,
                fallback: str = "likelihood") -> EpisodeTrace:
    """Simulate one game from s=0, b=0, l=L and return its full trace.

    ``attacker_belief_model`` is the attacker the defender assumes in its belief
    update; it may differ from ``attacker``.
    """
    u = rng.random((cfg.t_max, UNIFORMS_PER_STEP))[None]
    res, traces = simulate_batch(cfg, obs, defender, attacker, attacker_belief_model,
                                 u, fallback, record=True)
    return _trace_from_arrays(res, 0, traces[0])


def run_episodes(cfg, obs, defender, attacker, attacker_belief_model, n_episodes: int,
                 seed, fallback: str = "likelihood") -> list[EpisodeTrace]:
    u = episode_uniforms(seed, n_episodes, cfg.t_max)
    res, traces = simulate_batch(cfg, obs, defender, attacker, attacker_belief_model,
                                 u, fallback, record=True)
    return [_trace_from_arrays(res, i, traces[i]) for i in range(n_episodes)]


def estimate_objective(cfg: GameConfig, obs: ObservationModel, defender, attacker,
                       attacker_belief_model, n_episodes: int, seed,
                       fallback: str = "likelihood", return_batch: bool = False):
    """Monte Carlo estimate of the defender objective J_D (J_A is its negation)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    u = episode_uniforms(seed, n_episodes, cfg.t_max)
    res, _ = simulate_batch(cfg, obs, defender, attacker, attacker_belief_model, u, fallback)
    est = res.estimate()
    return (est, res) if return_batch else est


@dataclass(frozen=True)
class EpisodeStats:
    n_episodes: int
    mean_return: float
    mean_intrusion_length: float
    mean_episode_length: float
    stop_time_histogram: dict[int, int] = field(default_factory=dict)
    reasons: dict[str, int] = field(default_factory=dict)


def episode_stats(traces: Sequence[EpisodeTrace]) -> EpisodeStats:
    """Arithmetic summaries; the histogram counts the time-steps of defender stops."""
    traces = list(traces)
    if not traces:
        raise ValueError("episode_stats needs at least one trace")
    n = len(traces)
    hist: dict[int, int] = {}
    reasons: dict[str, int] = {}
    for tr in traces:
        for st in tr.steps:
            if st.a_d == 1:
                hist[st.t] = hist.get(st.t, 0) + 1
        reasons[tr.terminal_reason.value] = reasons.get(tr.terminal_reason.value, 0) + 1
    return EpisodeStats(
        n_episodes=n,
        mean_return=math.fsum(t.discounted_return for t in traces) / n,
        mean_intrusion_length=sum(t.intrusion_length for t in traces) / n,
        mean_episode_length=sum(len(t.steps) for t in traces) / n,
        stop_time_histogram=dict(sorted(hist.items())),
        reasons=dict(sorted(reasons.items())),
    )


TRACE_COLUMNS = ("episode", "t", "s", "b1", "l", "a_D", "a_A", "o", "r")


def write_traces(path, traces: Iterable[EpisodeTrace]) -> None:
    """One row per step, then a footer row per episode carrying the terminal reason and return."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS + ("terminal_reason", "discounted_return"))
        for e, tr in enumerate(traces):
            for st in tr.steps:
                w.writerow([e, st.t, st.s, repr(st.b1), st.l, st.a_d, st.a_a,
                            "" if st.o is None else st.o, repr(st.r), "", ""])
            w.writerow([e, "", "", "", "", "", "", "", "", tr.terminal_reason.value,
                        repr(tr.discounted_return)])
