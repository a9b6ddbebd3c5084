"""Game state machine: transitions, rewards and the defender's belief update."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Protocol, Sequence

import numpy as np


class State(IntEnum):
    NO_INTRUSION = 0
    INTRUSION = 1
    TERMINAL = 2


class Action(IntEnum):
    CONTINUE = 0
    STOP = 1


LIVE_STATES = (State.NO_INTRUSION, State.INTRUSION)
ALL_STATES = (State.NO_INTRUSION, State.INTRUSION, State.TERMINAL)


class DegenerateBeliefError(ArithmeticError):
    """The observation has zero probability under the assumed attacker model."""


def default_phi(L: int) -> tuple[float, ...]:
    return tuple(1.0 / (2.0 * l) for l in range(1, L + 1))


@dataclass(frozen=True)
class GameConfig:
    """Scalar game parameters. Defaults are the published ones (L=7, gamma=0.99, ...).

    ``phi[l-1]`` is the probability that an ongoing intrusion is stopped when the
    defender has ``l`` stops remaining.
    """

    L: int = 7
    r_st: float = 20.0
    r_cost: float = -2.0
    r_int: float = -1.0
    gamma: float = 0.99
    phi: tuple[float, ...] | None = None
    t_max: int = 200

    def __post_init__(self):
        if not isinstance(self.L, (int, np.integer)) or self.L < 1:
            raise ValueError(f"L: must be a positive integer, got {self.L!r}")
        if self.phi is None:
            object.__setattr__(self, "phi", default_phi(int(self.L)))
        else:
            object.__setattr__(self, "phi", tuple(float(p) for p in self.phi))
        if not self.r_st > 0:
            raise ValueError(f"r_st: must be > 0, got {self.r_st!r}")
        if not self.r_cost < 0:
            raise ValueError(f"r_cost: must be < 0, got {self.r_cost!r}")
        if not self.r_int < 0:
            raise ValueError(f"r_int: must be < 0, got {self.r_int!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma: must lie in [0, 1), got {self.gamma!r}")
        if not isinstance(self.t_max, (int, np.integer)) or self.t_max < 2:
            raise ValueError(f"t_max: must be an integer >= 2, got {self.t_max!r}")
        if len(self.phi) != self.L:
            raise ValueError(f"phi: expected {self.L} entries, got {len(self.phi)}")
        for p in self.phi:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"phi: entries must be probabilities, got {p!r}")
        # phi indexed by stops remaining: fewer stops left => larger stop chance
        for a, b in zip(self.phi, self.phi[1:]):
            if b > a:
                raise ValueError("phi: must be non-increasing in l (stops remaining)")

    def phi_l(self, l: int) -> float:
        check_stops(l, self)
        return self.phi[l - 1]

    @property
    def r_max(self) -> float:
        return max(abs(self.r_st), abs(self.r_cost), abs(self.r_int))

    def truncation_bias(self) -> float:
        """Upper bound on the discounted reward lost by cutting episodes at t_max."""
        return self.gamma ** self.t_max * self.r_max / (1.0 - self.gamma)


def check_stops(l: int, cfg: GameConfig) -> None:
    if not 1 <= l <= cfg.L:
        raise ValueError(f"stops remaining l={l} outside 1..{cfg.L}")


def transition_prob(s: int, s_next: int, a_d: int, a_a: int, l: int, cfg: GameConfig) -> float:
    """Kernel value P[s_next | s, (a_d, a_a), l]; phi is taken at the pre-action l."""
    check_stops(l, cfg)
    return float(transition_row(s, a_d, a_a, l, cfg)[s_next])


def transition_row(s: int, a_d: int, a_a: int, l: int, cfg: GameConfig) -> np.ndarray:
    """Distribution over (NO_INTRUSION, INTRUSION, TERMINAL)."""
    check_stops(l, cfg)
    row = np.zeros(3)
    if s == State.TERMINAL or l - a_d == 0:
        row[State.TERMINAL] = 1.0
    elif s == State.NO_INTRUSION:
        row[State.INTRUSION if a_a == Action.STOP else State.NO_INTRUSION] = 1.0
    elif s == State.INTRUSION:
        if a_a == Action.STOP:
            row[State.TERMINAL] = 1.0
        else:
            phi = cfg.phi[l - 1]
            row[State.INTRUSION] = 1.0 - phi
            row[State.TERMINAL] = phi
    else:
        raise ValueError(f"invalid state {s!r}")
    return row


def draw_index(probs: Sequence[float] | np.ndarray, u: float) -> int:
    """Inverse-CDF draw of an index from ``probs`` with a uniform ``u`` in [0, 1)."""
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, len(cdf) - 1)


def sample_transition(s: int, a_d: int, a_a: int, l: int, cfg: GameConfig,
                      rng: np.random.Generator) -> State:
    return State(draw_index(transition_row(s, a_d, a_a, l, cfg), rng.random()))


def reward(s: int, a_d: int, a_a: int, l: int, cfg: GameConfig) -> float:
    """Defender reward; the attacker receives the negation."""
    check_stops(l, cfg)
    if s == State.TERMINAL:
        return 0.0
    if s == State.INTRUSION:
        if a_a == Action.STOP:
            return 0.0
        return cfg.r_st / l if a_d == Action.STOP else cfg.r_int
    if s == State.NO_INTRUSION:
        return cfg.r_cost / l if a_d == Action.STOP else 0.0
    raise ValueError(f"invalid state {s!r}")


class AttackerModel(Protocol):
    def stop_prob(self, l: int, b: float, s: int | None = None) -> float: ...


def live_masses(b: float, p0: float, p1: float, phi: float) -> tuple[float, float]:
    """Unnormalised next-state masses (s'=0, s'=1) given the game continues."""
    m0 = (1.0 - b) * (1.0 - p0)
    m1 = (1.0 - b) * p0 + b * (1.0 - p1) * (1.0 - phi)
    return m0, m1


def belief_update(b: float, a_d: int, o: int, attacker_model: AttackerModel, l: int,
                  obs, cfg: GameConfig) -> float:
    """Posterior probability of an intrusion after observing ``o``.

    Only live successor states are considered: the update is conditioned on the
    game not having ended at this step. Raises DegenerateBeliefError when ``o``
    is impossible under the model.
    """
    check_stops(l, cfg)
    if a_d == Action.STOP and l == 1:
        raise ValueError("no belief update after the final defender stop")
    if not 0 <= o < obs.alphabet_size:
        raise ValueError(f"observation {o} outside alphabet of size {obs.alphabet_size}")
    p0 = attacker_model.stop_prob(l, b, State.NO_INTRUSION)
    p1 = attacker_model.stop_prob(l, b, State.INTRUSION)
    m0, m1 = live_masses(b, p0, p1, cfg.phi[l - 1])
    num1 = m1 * obs.pmf1[o]
    norm = m0 * obs.pmf0[o] + num1
    if norm <= 0.0:
        raise DegenerateBeliefError(
            f"observation {o} has zero probability at b={b}, l={l} under the attacker model")
    return min(1.0, num1 / norm)


def fallback_belief(b: float, o: int, obs, mode: str) -> float:
    """Belief used when ``belief_update`` is degenerate.

    ``likelihood`` discards the refuted prior and keeps only the evidence of ``o``;
    ``carry`` keeps ``b``.
    """
    if mode == "carry":
        return b
    if mode == "likelihood":
        f0, f1 = obs.pmf0[o], obs.pmf1[o]
        return b if f0 + f1 <= 0.0 else f1 / (f0 + f1)
    raise DegenerateBeliefError(f"degenerate belief update at b={b}, o={o}")


FALLBACK_MODES = ("likelihood", "carry", "raise")
