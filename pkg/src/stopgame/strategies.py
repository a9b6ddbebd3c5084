"""Strategy representations behind one stop-probability interface.

Defender strategies expose ``stop_prob(l, b)`` and ``stop_prob_grid(points)``
(shape ``(L, K)``); attacker strategies expose ``stop_prob(l, b, s)`` and
``stop_prob_grid(points)`` (shape ``(2, L, K)``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .game import Action, State

SHARPNESS = 20.0
# Floor on the defender stop probability fed to attacker thresholds. At d == 0
# the exact smooth threshold pins the state-0 attack probability to 1 for every
# theta, which makes the parameterised game degenerate at the initial belief.
# 0.7 gave the lowest exploitability in a T-FP sweep over 0.3-0.9.
D_FLOOR = 0.7


class Player(str, Enum):
    DEFENDER = "defender"
    ATTACKER = "attacker"


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def smooth_threshold(a: float, b: float) -> float:
    """Smoothed step at b = sigmoid(a): ``(1 + (b(1-s)/(s(1-b)))**-20)**-1``.

    Evaluated as ``sigmoid(20 * (logit(b) - a))``; b = 0 and b = 1 map to 0 and 1.
    """
    if b <= 0.0:
        return 0.0
    if b >= 1.0:
        return 1.0
    return _sigmoid(SHARPNESS * (math.log(b) - math.log1p(-b) - a))


def smooth_threshold_v(a, b) -> np.ndarray:
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    out = np.where(b >= 1.0, 1.0, 0.0)
    inner = (b > 0.0) & (b < 1.0)
    bi = b[inner]
    out[inner] = sigmoid(SHARPNESS * (np.log(bi) - np.log1p(-bi) - a[inner]))
    return out


def logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


@dataclass(frozen=True, eq=False)
class ThresholdVector:
    """Threshold parameters: length L for the defender, 2L for the attacker."""

    player: Player
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "player", Player(self.player))
        t = np.array(self.theta, dtype=float).ravel()
        if not np.all(np.isfinite(t)):
            raise ValueError("theta entries must be finite")
        if self.player is Player.ATTACKER and t.size % 2:
            raise ValueError("attacker theta must have even length 2L")
        if t.size == 0:
            raise ValueError("theta must be non-empty")
        t.setflags(write=False)
        object.__setattr__(self, "theta", t)

    @property
    def L(self) -> int:
        return self.theta.size if self.player is Player.DEFENDER else self.theta.size // 2

    def __eq__(self, other):
        return (isinstance(other, ThresholdVector) and self.player == other.player
                and np.array_equal(self.theta, other.theta))

    def thresholds(self) -> np.ndarray:
        """Soft thresholds sigmoid(theta)."""
        return sigmoid(self.theta)


def _check_l(l: int, L: int):
    if not 1 <= l <= L:
        raise IndexError(f"l={l} outside 1..{L}")


def defender_stop_prob(theta: ThresholdVector, l: int, b: float) -> float:
    if theta.player is not Player.DEFENDER:
        raise ValueError("expected a defender threshold vector")
    _check_l(l, theta.L)
    return smooth_threshold(theta.theta[l - 1], b)


def attacker_stop_prob(theta: ThresholdVector, l: int, s: int, d: float,
                       d_floor: float = D_FLOOR) -> float:
    """Attacker stop probability given the defender's current stop probability ``d``.

    In the intrusion state the attacker aborts when ``d`` exceeds its threshold;
    in the no-intrusion state it starts an attack only while ``d`` stays below it.
    """
    if theta.player is not Player.ATTACKER:
        raise ValueError("expected an attacker threshold vector")
    L = theta.L
    _check_l(l, L)
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"d={d} is not a probability")
    d = max(d, d_floor)
    if s == State.INTRUSION:
        return smooth_threshold(theta.theta[L + l - 1], d)
    if s == State.NO_INTRUSION:
        return 1.0 - smooth_threshold(theta.theta[l - 1], d)
    raise IndexError(f"attacker strategies are defined on live states only, got s={s!r}")


def _attacker_grid(thetas: np.ndarray, weights: np.ndarray, d: np.ndarray,
                   d_floor: float) -> np.ndarray:
    """Mixture attacker stop probabilities, shape (2, L, K), for d of shape (L, K)."""
    L = thetas.shape[1] // 2
    dd = np.maximum(d, d_floor)[None, :, :]
    stop1 = smooth_threshold_v(thetas[:, L:, None], dd)
    stop0 = 1.0 - smooth_threshold_v(thetas[:, :L, None], dd)
    return np.stack([np.tensordot(weights, stop0, axes=1), np.tensordot(weights, stop1, axes=1)])


@dataclass(frozen=True, eq=False)
class MixedThresholdStrategy:
    """Weighted collection of threshold vectors of one player, mixed per step."""

    atoms: tuple[ThresholdVector, ...]
    weights: np.ndarray = None
    d_floor: float = D_FLOOR

    def __post_init__(self):
        atoms = tuple(self.atoms)
        if not atoms:
            raise ValueError("a mixture needs at least one atom")
        p, n = atoms[0].player, atoms[0].theta.size
        if any(a.player != p or a.theta.size != n for a in atoms):
            raise ValueError("all atoms must share player and length")
        w = (np.full(len(atoms), 1.0 / len(atoms)) if self.weights is None
             else np.asarray(self.weights, dtype=float).ravel())
        if w.size != len(atoms) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector over the atoms")
        w.setflags(write=False)
        thetas = np.vstack([a.theta for a in atoms])
        thetas.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "thetas", thetas)

    @classmethod
    def uniform(cls, atoms: Sequence[ThresholdVector], d_floor: float = D_FLOOR):
        return cls(tuple(atoms), None, d_floor)

    @property
    def player(self) -> Player:
        return self.atoms[0].player

    @property
    def L(self) -> int:
        return self.atoms[0].L

    def __len__(self):
        return len(self.atoms)

    def stop_prob(self, l: int, b: float, s: int | None = None, d: float | None = None) -> float:
        return mixed_action_prob(self, l, b, s, d)

    def stop_prob_grid(self, points: np.ndarray, d: np.ndarray | None = None) -> np.ndarray:
        if self.player is Player.DEFENDER:
            probs = smooth_threshold_v(self.thetas[:, :, None], np.asarray(points)[None, None, :])
            return np.clip(np.tensordot(self.weights, probs, axes=1), 0.0, 1.0)
        if d is None:
            raise ValueError("attacker mixtures need the defender stop probabilities d")
        return _attacker_grid(self.thetas, self.weights, d, self.d_floor)


def as_mixture(strategy) -> MixedThresholdStrategy:
    if isinstance(strategy, MixedThresholdStrategy):
        return strategy
    if isinstance(strategy, ThresholdVector):
        return MixedThresholdStrategy((strategy,))
    raise TypeError(f"cannot view {type(strategy).__name__} as a threshold mixture")


def mixed_action_prob(mix: MixedThresholdStrategy, l: int, b: float,
                      s: int | None = None, d: float | None = None) -> float:
    """Weighted average of the atoms' stop probabilities."""
    if mix.player is Player.DEFENDER:
        if s is not None or d is not None:
            raise ValueError("defender mixtures take no state or d argument")
        _check_l(l, mix.L)
        col = mix.thetas[:, l - 1]
        p = float(np.dot(mix.weights, smooth_threshold_v(col, np.full(col.size, b))))
        return min(max(p, 0.0), 1.0)
    if s is None or d is None:
        raise ValueError("attacker mixtures need both s and d")
    return float(sum(w * attacker_stop_prob(a, l, s, d, mix.d_floor)
                     for w, a in zip(mix.weights, mix.atoms)))


@dataclass(frozen=True, eq=False)
class BoundAttacker:
    """Attacker threshold mixture evaluated against a fixed defender strategy's stop probability."""

    attacker: MixedThresholdStrategy
    defender: object

    def __post_init__(self):
        object.__setattr__(self, "attacker", as_mixture(self.attacker))
        if self.attacker.player is not Player.ATTACKER:
            raise ValueError("BoundAttacker needs an attacker mixture")
        if isinstance(self.defender, ThresholdVector):
            object.__setattr__(self, "defender", as_mixture(self.defender))

    player = Player.ATTACKER

    @property
    def L(self) -> int:
        return self.attacker.L

    def stop_prob(self, l: int, b: float, s: int | None = None) -> float:
        d = self.defender.stop_prob(l, b)
        return mixed_action_prob(self.attacker, l, b, s, d)

    def stop_prob_grid(self, points: np.ndarray) -> np.ndarray:
        return self.attacker.stop_prob_grid(points, d=self.defender.stop_prob_grid(points))


def interp_weights(b, K: int):
    """Left index and right weight of ``b`` on the uniform K-point grid of [0, 1]."""
    x = np.clip(np.asarray(b, dtype=float), 0.0, 1.0) * (K - 1)
    i = np.minimum(np.floor(x).astype(np.int64), K - 2)
    return i, x - i


@dataclass(frozen=True, eq=False)
class GridStrategy:
    """Stop probabilities tabulated on a uniform belief grid.

    ``table`` has shape (L, K) for the defender and (2, L, K) for the attacker
    (first axis: state 0 / state 1). Queries interpolate linearly in b.
    """

    player: Player
    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "player", Player(self.player))
        t = np.array(self.table, dtype=float)
        want = 2 if self.player is Player.DEFENDER else 3
        if t.ndim != want or t.shape[-1] < 2:
            raise ValueError(f"{self.player.value} grid table must have {want} dims and K >= 2")
        if self.player is Player.ATTACKER and t.shape[0] != 2:
            raise ValueError("attacker grid table needs a leading state axis of size 2")
        if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
            raise ValueError("grid entries must be probabilities")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def K(self) -> int:
        return self.table.shape[-1]

    @property
    def L(self) -> int:
        return self.table.shape[-2]

    @property
    def points(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.K)

    def stop_prob(self, l: int, b: float, s: int | None = None) -> float:
        return grid_action_prob(self, l, b, s)

    def stop_prob_grid(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.size == self.K and np.allclose(points, self.points, atol=0, rtol=1e-15):
            return np.array(self.table)
        i, w = interp_weights(points, self.K)
        return self.table[..., i] * (1 - w) + self.table[..., i + 1] * w


def grid_action_prob(gs: GridStrategy, l: int, b: float, s: int | None = None) -> float:
    _check_l(l, gs.L)
    row = gs.table[l - 1] if gs.player is Player.DEFENDER else gs.table[int(s), l - 1]
    i, w = interp_weights(b, gs.K)
    return float(row[i] * (1 - w) + row[i + 1] * w)


class BaselineKind(str, Enum):
    ALERT_THRESHOLD = "alert-threshold"
    INTRUSION_ORACLE = "intrusion-oracle"


@dataclass(frozen=True)
class BaselineStrategy:
    """Static defender baselines.

    ``alert-threshold`` stops whenever the last observation is >= ``threshold``;
    ``intrusion-oracle`` knows when the intrusion starts and spends all its stops
    in the steps that follow.
    """

    kind: BaselineKind
    threshold: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", BaselineKind(self.kind))
        if self.kind is BaselineKind.ALERT_THRESHOLD and self.threshold < 1:
            raise ValueError("alert threshold must be >= 1")

    player = Player.DEFENDER


def baseline_decide(bl: BaselineStrategy, *, last_obs: int | None = None,
                    intrusion_started: bool | None = None, stops_taken: int | None = None,
                    L: int | None = None) -> Action:
    if bl.kind is BaselineKind.ALERT_THRESHOLD:
        if last_obs is None:
            raise ValueError("alert-threshold baseline needs the last observation")
        return Action.STOP if last_obs >= bl.threshold else Action.CONTINUE
    if intrusion_started is None or stops_taken is None or L is None:
        raise ValueError("intrusion-oracle baseline needs intrusion_started, stops_taken and L")
    return Action.STOP if intrusion_started and stops_taken < L else Action.CONTINUE


DefenderStrategy = Union[ThresholdVector, MixedThresholdStrategy, GridStrategy, BaselineStrategy]
AttackerStrategy = Union[BoundAttacker, GridStrategy]


def as_defender(strategy) -> DefenderStrategy:
    if isinstance(strategy, ThresholdVector):
        strategy = as_mixture(strategy)
    if getattr(strategy, "player", None) is not Player.DEFENDER:
        raise ValueError(f"expected a defender strategy, got {type(strategy).__name__}")
    return strategy


def as_attacker(strategy) -> AttackerStrategy:
    if not isinstance(strategy, (BoundAttacker, GridStrategy)) or strategy.player is not Player.ATTACKER:
        raise ValueError(
            f"expected an attacker grid strategy or BoundAttacker, got {type(strategy).__name__}")
    return strategy


# Fixed pure strategies used by tests and the CLI.

def constant_defender(L: int, p: float, K: int = 11) -> GridStrategy:
    return GridStrategy(Player.DEFENDER, np.full((L, K), float(p)))


def constant_attacker(L: int, p0: float, p1: float, K: int = 11) -> GridStrategy:
    t = np.empty((2, L, K))
    t[0], t[1] = p0, p1
    return GridStrategy(Player.ATTACKER, t)
