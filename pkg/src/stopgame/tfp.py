"""Threshold fictitious play: SPSA best responses plus empirical strategy averaging."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .game import GameConfig
from .observation import ObservationModel
from .oracle import BeliefGrid, exploitability
from .simulator import estimate_objective
from .strategies import (D_FLOOR, BoundAttacker, MixedThresholdStrategy, Player,
                         ThresholdVector, as_mixture)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TfpHyper:
    """SPSA and fictitious-play settings; defaults are the published ones where given.

    ``swap_exponents`` exchanges the roles of ``epsilon`` and ``lam`` in the gain
    sequences (a_n then decays with ``lam``, c_n with ``epsilon``).
    """

    a: float = 1.0
    c: float = 10.0
    lam: float = 0.602
    A: float = 100.0
    epsilon: float = 0.101
    N: int = 50
    delta: float = 0.2
    max_outer: int = 500
    br_episodes: int = 50
    eval_episodes: int = 2000
    grid_K: int = 201
    swap_exponents: bool = False
    d_floor: float = D_FLOOR
    learned_br_exploitability: bool = False
    fallback: str = "likelihood"

    def __post_init__(self):
        for name in ("a", "c", "A", "delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name}: must be > 0")
        for name in ("epsilon", "lam"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name}: must lie in (0, 1]")
        for name in ("max_outer", "br_episodes", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        if self.N < 0:
            raise ValueError("N: must be >= 0")


def spsa_gains(n: int, h: TfpHyper) -> tuple[float, float]:
    """(a_n, c_n) = (a / (n + A)^epsilon, c / n^lam), exponents exchanged if requested."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ea, ec = (h.lam, h.epsilon) if h.swap_exponents else (h.epsilon, h.lam)
    return h.a / (n + h.A) ** ea, h.c / n ** ec


def rademacher(rng: np.random.Generator, k: int) -> np.ndarray:
    return rng.integers(0, 2, size=k) * 2.0 - 1.0


def spsa_gradient(evaluate: Callable[[np.ndarray], float], theta, c_n: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Two-sided simultaneous-perturbation gradient estimate of ``evaluate`` at ``theta``."""
    theta = np.asarray(getattr(theta, "theta", theta), dtype=float)
    delta = rademacher(rng, theta.size)
    hi = evaluate(theta + c_n * delta)
    lo = evaluate(theta - c_n * delta)
    if not (math.isfinite(hi) and math.isfinite(lo)):
        raise FloatingPointError(f"non-finite objective evaluation ({hi}, {lo})")
    return (hi - lo) / (2.0 * c_n * delta)


def spsa_ascent(evaluate_factory: Callable[[], Callable[[np.ndarray], float]],
                theta0: np.ndarray, h: TfpHyper, rng: np.random.Generator,
                n_iters: int | None = None) -> np.ndarray:
    """Run the inner loop: ``n_iters`` (default h.N) SPSA gradient-ascent steps.

    ``evaluate_factory`` is called once per iteration so both perturbed
    evaluations of that iteration can share random numbers.
    """
    theta = np.array(theta0, dtype=float)
    for n in range(1, (h.N if n_iters is None else n_iters) + 1):
        a_n, c_n = spsa_gains(n, h)
        theta = theta + a_n * spsa_gradient(evaluate_factory(), theta, c_n, rng)
    return theta


def _objective_factory(cfg, obs, player, opponent, own_mixed, h, rng):
    """Evaluator factory for the player's own objective (J_D or J_A = -J_D)."""
    def factory():
        seed = int(rng.integers(2 ** 63))
        if player is Player.DEFENDER:
            attacker = BoundAttacker(opponent, own_mixed)

            def f(theta):
                d = ThresholdVector(Player.DEFENDER, theta)
                return estimate_objective(cfg, obs, d, attacker, attacker, h.br_episodes,
                                          seed, h.fallback).mean
        else:
            model = BoundAttacker(own_mixed, opponent)

            def f(theta):
                a = BoundAttacker(MixedThresholdStrategy(
                    (ThresholdVector(Player.ATTACKER, theta),), d_floor=h.d_floor), opponent)
                return -estimate_objective(cfg, obs, opponent, a, model, h.br_episodes,
                                           seed, h.fallback).mean
        return f
    return factory


def initial_theta(player: Player, L: int, rng: np.random.Generator) -> ThresholdVector:
    k = L if Player(player) is Player.DEFENDER else 2 * L
    return ThresholdVector(player, rademacher(rng, k))


def learn_best_response(cfg: GameConfig, obs: ObservationModel, player, opponent,
                        own_mixed, h: TfpHyper, rng: np.random.Generator) -> ThresholdVector:
    """Approximate best response by SPSA from a random +-1 start.

    For the defender the opponent mixture is also its belief model and
    ``own_mixed`` is the defender mixture the attacker's thresholds refer to;
    for the attacker ``own_mixed`` is the announced attacker mixture that drives
    the defender's beliefs.
    """
    player = Player(player)
    opponent, own_mixed = as_mixture(opponent), as_mixture(own_mixed)
    theta0 = initial_theta(player, cfg.L, rng)
    factory = _objective_factory(cfg, obs, player, opponent, own_mixed, h, rng)
    return ThresholdVector(player, spsa_ascent(factory, theta0.theta, h, rng))


@dataclass(frozen=True)
class TfpRecord:
    iteration: int
    exploitability: float
    exploitability_mc: float
    exploitability_mc_se: float
    J_D: float
    mean_episode_len: float
    mean_intrusion_len: float
    defender_atoms: int
    attacker_atoms: int


@dataclass
class TfpHistory:
    records: list[TfpRecord] = field(default_factory=list)
    converged: bool = False

    def __len__(self):
        return len(self.records)

    @property
    def exploitability(self) -> np.ndarray:
        return np.array([r.exploitability for r in self.records])

    def as_rows(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def _mixture(buffer, d_floor):
    return MixedThresholdStrategy.uniform(buffer, d_floor)


def tfp_run(cfg: GameConfig, obs: ObservationModel, h: TfpHyper = TfpHyper(), seed=0,
            grid: BeliefGrid | None = None,
            on_iteration: Callable[[int, MixedThresholdStrategy, MixedThresholdStrategy,
                                    TfpRecord], None] | None = None):
    """Alternate best responses and average them until exploitability < h.delta.

    The stopping test uses the grid-oracle exploitability; the Monte Carlo
    estimate is recorded alongside it.

    Each outer iteration learns the defender's response and then the attacker's
    response against the mixtures of the previous iteration, appends both to
    their buffers and rebuilds uniform mixtures.
    """
    rng = np.random.default_rng(seed)
    grid = grid or BeliefGrid(h.grid_K)
    buf_d = [initial_theta(Player.DEFENDER, cfg.L, rng)]
    buf_a = [initial_theta(Player.ATTACKER, cfg.L, rng)]
    mix_d, mix_a = _mixture(buf_d, h.d_floor), _mixture(buf_a, h.d_floor)
    hist = TfpHistory()
    for it in range(1, h.max_outer + 1):
        br_d = learn_best_response(cfg, obs, Player.DEFENDER, mix_a, mix_d, h, rng)
        br_a = learn_best_response(cfg, obs, Player.ATTACKER, mix_d, mix_a, h, rng)
        buf_d.append(br_d)
        buf_a.append(br_a)
        mix_d, mix_a = _mixture(buf_d, h.d_floor), _mixture(buf_a, h.d_floor)

        eval_seed = int(rng.integers(2 ** 63))
        brs = None
        if h.learned_br_exploitability:
            ld = learn_best_response(cfg, obs, Player.DEFENDER, mix_a, mix_d, h, rng)
            la = learn_best_response(cfg, obs, Player.ATTACKER, mix_d, mix_a, h, rng)
            brs = (as_mixture(ld), BoundAttacker(MixedThresholdStrategy((la,), d_floor=h.d_floor), mix_d))
        rep = exploitability(cfg, obs, mix_d, mix_a, grid, h.eval_episodes, eval_seed,
                             h.fallback, best_responses=brs)
        rec = TfpRecord(it, rep.delta_grid, rep.delta, rep.std_error, rep.j_d.mean,
                        rep.mean_episode_len, rep.mean_intrusion_len, len(buf_d), len(buf_a))
        hist.records.append(rec)
        logger.info("iteration %d: exploitability %.4f (Monte Carlo %.4f), J_D %.4f",
                    it, rec.exploitability, rec.exploitability_mc, rec.J_D)
        if on_iteration is not None:
            on_iteration(it, mix_d, mix_a, rec)
        if rec.exploitability < h.delta:
            hist.converged = True
            break
    return mix_d, mix_a, hist
