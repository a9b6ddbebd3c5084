"""Belief-grid dynamic programming: best responses, exploitability, approximate game value.

Beliefs live on a uniform grid of [0, 1]; next-step beliefs are mapped back
onto it by linear interpolation, so every Bellman operator below becomes a
dense K x K linear map per stop count.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .game import GameConfig
from .observation import ObservationModel
from .simulator import ObjectiveEstimate, estimate_objective
from .strategies import (BoundAttacker, GridStrategy, MixedThresholdStrategy, Player,
                         as_mixture, interp_weights)

logger = logging.getLogger(__name__)

DEFAULT_K = 201
DEFAULT_TOL = 1e-6
DEFAULT_MAX_SWEEPS = 10_000
TIE_TOL = 1e-9


@dataclass(frozen=True)
class BeliefGrid:
    K: int = DEFAULT_K

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 11:
            raise ValueError(f"belief grid needs K >= 11 points, got {self.K!r}")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.K)


@dataclass(frozen=True, eq=False)
class GridValues:
    """Values per (l, k) for the defender problem or (s, l, k) for the attacker problem."""

    values: np.ndarray
    residual: float
    converged: bool
    iterations: int = 0


# -- shared kinematics --------------------------------------------------------

def next_beliefs(b: np.ndarray, p0: np.ndarray, p1: np.ndarray, phi: float,
                 obs: ObservationModel, fallback: str = "likelihood"):
    """Posterior b'(o) and joint mass P(o, live) for every grid point and symbol.

    Where the model gives an observation zero mass, b'(o) follows the same
    fallback rule as the simulator (it matters when the true attacker deviates
    from the model).
    """
    m0 = (1.0 - b) * (1.0 - p0)
    m1 = (1.0 - b) * p0 + b * (1.0 - p1) * (1.0 - phi)
    j0 = m0[:, None] * obs.pmf0[None, :]
    j1 = m1[:, None] * obs.pmf1[None, :]
    norm = j0 + j1
    f = obs.pmf0 + obs.pmf1
    if fallback == "likelihood":
        with np.errstate(invalid="ignore", divide="ignore"):
            lik = np.where(f > 0, obs.pmf1 / f, np.nan)
        alt = np.where(np.isnan(lik)[None, :], b[:, None], lik[None, :])
    elif fallback in ("carry", "raise"):
        alt = np.broadcast_to(b[:, None], norm.shape)
    else:
        raise ValueError(f"unknown fallback mode {fallback!r}")
    with np.errstate(invalid="ignore", divide="ignore"):
        bp = np.where(norm > 0, np.minimum(j1 / norm, 1.0), alt)
    return bp, norm


def interp_matrix(bp: np.ndarray, weights: np.ndarray, K: int) -> np.ndarray:
    """W[k, j] = sum_o weights[k, o] * hat_j(bp[k, o]) with linear hat functions."""
    i, w = interp_weights(bp, K)
    rows = np.broadcast_to(np.arange(bp.shape[0])[:, None], bp.shape)
    flat = np.concatenate([(rows * K + i).ravel(), (rows * K + i + 1).ravel()])
    vals = np.concatenate([(weights * (1 - w)).ravel(), (weights * w).ravel()])
    return np.bincount(flat, vals, minlength=bp.shape[0] * K).reshape(bp.shape[0], K)


def _attacker_grid(attacker, points):
    P = np.asarray(attacker.stop_prob_grid(points), dtype=float)
    if P.ndim != 3 or P.shape[0] != 2:
        raise ValueError("attacker strategy must give stop probabilities per (s, l, b)")
    return P


def _defender_grid(defender, points):
    if not hasattr(defender, "stop_prob_grid"):
        raise TypeError(f"{type(defender).__name__} has no belief-indexed stop probabilities")
    return np.asarray(defender.stop_prob_grid(points), dtype=float)


# -- optimal stopping / MDP solvers --------------------------------------------

def _solve_stopping(r_c, M, q_s, tol, max_iter, method):
    """Solve V = max(r_c + M V, q_s); returns (V, residual, converged, iterations)."""
    K = r_c.size
    if method == "vi":
        V = np.maximum(q_s, r_c)
        for it in range(1, max_iter + 1):
            Vn = np.maximum(r_c + M @ V, q_s)
            res = float(np.max(np.abs(Vn - V)))
            V = Vn
            if res < tol:
                return V, res, True, it
        return V, res, False, max_iter
    stop = np.ones(K, dtype=bool)
    V = q_s.copy()
    eye = np.eye(K)
    for it in range(1, max_iter + 1):
        c = ~stop
        V = q_s.copy()
        if c.any():
            A = eye[np.ix_(c, c)] - M[np.ix_(c, c)]
            rhs = r_c[c] + M[np.ix_(c, stop)] @ q_s[stop]
            V[c] = np.linalg.solve(A, rhs)
        q_c = r_c + M @ V
        new_stop = np.where(stop, q_s >= q_c - 1e-12, q_s > q_c + 1e-12)
        if np.array_equal(new_stop, stop):
            break
        stop = new_stop
    res = float(np.max(np.abs(np.maximum(r_c + M @ V, q_s) - V)))
    return V, res, res < tol, it


def _solve_mdp(r, P, tol, max_iter, method):
    """Maximise over per-state choices: V = max_a (r[a] + P[a] V). r: (A, n), P: (A, n, n)."""
    A, n = r.shape
    if method == "vi":
        V = np.max(r, axis=0)
        for it in range(1, max_iter + 1):
            Vn = np.max(r + P @ V, axis=0)
            res = float(np.max(np.abs(Vn - V)))
            V = Vn
            if res < tol:
                return V, res, True, it
        return V, res, False, max_iter
    pol = np.argmax(r, axis=0)
    idx = np.arange(n)
    for it in range(1, max_iter + 1):
        V = np.linalg.solve(np.eye(n) - P[pol, idx], r[pol, idx])
        Q = r + P @ V
        best = np.max(Q, axis=0)
        keep = Q[pol, idx] >= best - 1e-12
        new = np.where(keep, pol, np.argmax(Q, axis=0))
        if np.array_equal(new, pol):
            break
        pol = new
    res = float(np.max(np.abs(np.max(r + P @ V, axis=0) - V)))
    return V, res, res < tol, it


# -- best responses -----------------------------------------------------------

def defender_br_vi(cfg: GameConfig, obs: ObservationModel, attacker, grid: BeliefGrid = BeliefGrid(),
                   tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS,
                   method: str = "pi") -> tuple[GridStrategy, GridValues]:
    """Defender best response to a fixed attacker over (l, b).

    The attacker strategy also drives the belief update. ``method`` selects
    policy iteration (default, exact linear solves) or plain value iteration;
    both return the same fixed point. Ties go to Continue.
    """
    b = grid.points
    K = grid.K
    P = _attacker_grid(attacker, b)
    V = np.zeros((cfg.L, K))
    table = np.zeros((cfg.L, K))
    worst, ok, iters = 0.0, True, 0
    for l in range(1, cfg.L + 1):
        p0, p1 = P[0, l - 1], P[1, l - 1]
        bp, joint = next_beliefs(b, p0, p1, cfg.phi[l - 1], obs)
        M = cfg.gamma * interp_matrix(bp, joint, K)
        r_c = b * (1 - p1) * cfg.r_int
        q_s = (1 - b) * cfg.r_cost / l + b * (1 - p1) * cfg.r_st / l
        if l > 1:
            q_s = q_s + M @ V[l - 2]
        V[l - 1], res, conv, it = _solve_stopping(r_c, M, q_s, tol, max_sweeps, method)
        q_c = r_c + M @ V[l - 1]
        table[l - 1] = (q_s > q_c + TIE_TOL).astype(float)
        worst, ok, iters = max(worst, res), ok and conv, iters + it
    if not ok:
        logger.warning("defender best response: residual %.3g above tol %.3g", worst, tol)
    return GridStrategy(Player.DEFENDER, table), GridValues(V, worst, ok, iters)


def attacker_br_vi(cfg: GameConfig, obs: ObservationModel, defender, defender_belief_model,
                   grid: BeliefGrid = BeliefGrid(), tol: float = DEFAULT_TOL,
                   max_sweeps: int = DEFAULT_MAX_SWEEPS, method: str = "pi",
                   fallback: str = "likelihood") -> tuple[GridStrategy, GridValues]:
    """Attacker best response to a fixed defender over (s, l, b), in the attacker's sign.

    ``defender_belief_model`` is the attacker strategy the defender uses in its
    belief update; ``fallback`` sets the belief after observations that model
    deems impossible. Ties go to Continue in state 0 and Stop in state 1.
    """
    b = grid.points
    K = grid.K
    d_all = _defender_grid(defender, b)
    Pm = _attacker_grid(defender_belief_model, b)
    V = np.zeros((2, cfg.L, K))
    table = np.zeros((2, cfg.L, K))
    worst, ok, iters = 0.0, True, 0
    g = cfg.gamma
    for l in range(1, cfg.L + 1):
        d = d_all[l - 1]
        ph = cfg.phi[l - 1]
        bp, _ = next_beliefs(b, Pm[0, l - 1], Pm[1, l - 1], ph, obs, fallback)
        U0 = interp_matrix(bp, np.broadcast_to(obs.pmf0, bp.shape), K)
        U1 = interp_matrix(bp, np.broadcast_to(obs.pmf1, bp.shape), K)
        if l > 1:
            c0 = g * d * (U0 @ V[0, l - 2])
            c1 = g * d * (U1 @ V[1, l - 2])
        else:
            c0 = c1 = np.zeros(K)
        base0 = -d * cfg.r_cost / l
        r1c = -(d * cfg.r_st / l + (1 - d) * cfg.r_int)
        stay = g * (1 - d)[:, None]
        # unknowns x = [V0; V1]; choices: 0 = continue, 1 = stop
        r = np.empty((2, 2 * K))
        Pt = np.zeros((2, 2 * K, 2 * K))
        r[0, :K] = base0 + c0
        Pt[0, :K, :K] = stay * U0
        r[1, :K] = base0 + c1
        Pt[1, :K, K:] = stay * U1
        r[0, K:] = r1c + (1 - ph) * c1
        Pt[0, K:, K:] = (1 - ph) * stay * U1
        r[1, K:] = 0.0
        x, res, conv, it = _solve_mdp(r, Pt, tol, max_sweeps, method)
        V[0, l - 1], V[1, l - 1] = x[:K], x[K:]
        Q = r + Pt @ x
        table[0, l - 1] = (Q[1, :K] > Q[0, :K] + TIE_TOL).astype(float)
        table[1, l - 1] = (Q[1, K:] >= Q[0, K:] - TIE_TOL).astype(float)
        worst, ok, iters = max(worst, res), ok and conv, iters + it
    if not ok:
        logger.warning("attacker best response: residual %.3g above tol %.3g", worst, tol)
    return GridStrategy(Player.ATTACKER, table), GridValues(V, worst, ok, iters)


# -- exploitability -----------------------------------------------------------

@dataclass(frozen=True)
class ExploitabilityReport:
    """Exploitability of a strategy pair.

    ``delta`` sums the Monte Carlo gains of both grid best responses (common
    random numbers across the two terms); ``delta_grid`` is the same quantity
    read off the oracle value tables at the initial state.
    """

    delta: float
    std_error: float
    j_d: ObjectiveEstimate
    j_d_vs_br_defender: ObjectiveEstimate
    j_d_vs_br_attacker: ObjectiveEstimate
    delta_grid: float
    defender_gain: float
    attacker_gain: float
    mean_episode_len: float = math.nan
    mean_intrusion_len: float = math.nan
    convention: str = "defender belief driven by the announced attacker mixture in both terms"

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.delta - 1.96 * self.std_error, self.delta + 1.96 * self.std_error)


def exploitability(cfg: GameConfig, obs: ObservationModel, mix_d, mix_a,
                   grid: BeliefGrid = BeliefGrid(), eval_episodes: int = 2000, seed=0,
                   fallback: str = "likelihood", tol: float = DEFAULT_TOL,
                   best_responses=None, with_baseline: bool = True) -> ExploitabilityReport:
    """delta = J_D(BR_D, pi_A) + J_A(pi_D, BR_A).

    ``mix_a`` may be a threshold mixture (bound to ``mix_d``) or an attacker grid
    strategy. ``best_responses`` can supply precomputed (BR_D, BR_A) strategies,
    e.g. learned ones, in place of the grid oracles.
    """
    if isinstance(mix_d, MixedThresholdStrategy) or hasattr(mix_d, "theta"):
        mix_d = as_mixture(mix_d)
    att = mix_a
    if not isinstance(mix_a, (BoundAttacker, GridStrategy)):
        att = BoundAttacker(as_mixture(mix_a), mix_d)
    if best_responses is None:
        br_d, vd = defender_br_vi(cfg, obs, att, grid, tol)
        br_a, va = attacker_br_vi(cfg, obs, mix_d, att, grid, tol, fallback=fallback)
        delta_grid = float(vd.values[cfg.L - 1, 0] + va.values[0, cfg.L - 1, 0])
    else:
        br_d, br_a = best_responses
        delta_grid = math.nan
    est_d, res_d = estimate_objective(cfg, obs, br_d, att, att, eval_episodes, seed,
                                      fallback, return_batch=True)
    est_a, res_a = estimate_objective(cfg, obs, mix_d, br_a, att, eval_episodes, seed,
                                      fallback, return_batch=True)
    diff = res_d.returns - res_a.returns
    n = diff.size
    se = float(np.std(diff, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    ep_len = intr_len = math.nan
    if with_baseline:
        base, res_b = estimate_objective(cfg, obs, mix_d, att, att, eval_episodes, seed,
                                         fallback, return_batch=True)
        ep_len = float(np.mean(res_b.lengths))
        intr_len = float(np.mean(res_b.intrusion_length))
    else:
        base = ObjectiveEstimate(math.nan, math.nan, 0)
    return ExploitabilityReport(
        delta=float(np.mean(diff)), std_error=se, j_d=base,
        j_d_vs_br_defender=est_d, j_d_vs_br_attacker=est_a, delta_grid=delta_grid,
        defender_gain=est_d.mean - base.mean, attacker_gain=base.mean - est_a.mean,
        mean_episode_len=ep_len, mean_intrusion_len=intr_len)


# -- approximate game value ----------------------------------------------------

ATTACKER_RULES = ((0, 0), (0, 1), (1, 0), (1, 1))  # (action in state 0, action in state 1)


def solve_2xn(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and maximiser's row-1 probability of zero-sum games with 2 rows.

    ``M`` has shape (..., 2, n); the row player maximises. The maximum of the
    concave lower envelope is attained at x in {0, 1} or where two columns cross.
    """
    M = np.asarray(M, dtype=float)
    a, c = M[..., 0, :], M[..., 1, :]  # payoff at x=0 and x=1
    n = M.shape[-1]
    cands = [np.zeros(M.shape[:-2]), np.ones(M.shape[:-2])]
    for j in range(n):
        for k in range(j + 1, n):
            num = a[..., j] - a[..., k]
            den = num - (c[..., j] - c[..., k])
            with np.errstate(invalid="ignore", divide="ignore"):
                x = np.where(den != 0, num / den, 0.0)
            cands.append(np.clip(x, 0.0, 1.0))
    X = np.stack(cands, axis=-1)  # (..., m)
    vals = np.min(a[..., None, :] + X[..., :, None] * (c - a)[..., None, :], axis=-1)
    best = np.argmax(vals, axis=-1)
    v = np.take_along_axis(vals, best[..., None], axis=-1)[..., 0]
    x = np.take_along_axis(X, best[..., None], axis=-1)[..., 0]
    return v, x


def game_value_vi(cfg: GameConfig, obs: ObservationModel, grid: BeliefGrid = BeliefGrid(),
                  tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS
                  ) -> GridValues:
    """Approximate minimax value per (l, k).

    Each grid point plays a 2 x 4 stage game: defender Continue/Stop against the
    four state-conditioned attacker rules, with Bayes' rule applied under the
    column's rule and continuation values interpolated on the grid. This is a
    simplification of the exact one-sided operator, meant for qualitative checks.
    """
    b = grid.points
    K = grid.K
    V = np.zeros((cfg.L, K))
    worst, ok, iters = 0.0, True, 0
    for l in range(1, cfg.L + 1):
        ph = cfg.phi[l - 1]
        Ms, r_c, r_s = [], [], []
        for a0, a1 in ATTACKER_RULES:
            bp, joint = next_beliefs(b, np.full(K, float(a0)), np.full(K, float(a1)), ph, obs)
            Ms.append(cfg.gamma * interp_matrix(bp, joint, K))
            r_c.append(b * (1 - a1) * cfg.r_int)
            r_s.append((1 - b) * cfg.r_cost / l + b * (1 - a1) * cfg.r_st / l)
        stop_row = np.stack([r_s[j] + (Ms[j] @ V[l - 2] if l > 1 else 0.0) for j in range(4)], -1)
        cont_r = np.stack(r_c, -1)
        v = np.zeros(K)
        conv = False
        for it in range(1, max_sweeps + 1):
            cont = cont_r + np.stack([Ms[j] @ v for j in range(4)], -1)
            vn, _ = solve_2xn(np.stack([cont, stop_row], axis=-2))
            res = float(np.max(np.abs(vn - v)))
            v = vn
            if res < tol:
                conv = True
                break
        V[l - 1] = v
        worst, ok, iters = max(worst, res), ok and conv, iters + it
    if not ok:
        logger.warning("game value iteration: residual %.3g above tol %.3g", worst, tol)
    return GridValues(V, worst, ok, iters)


# -- threshold structure --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ThresholdReport:
    """Boundary index per row (index K means an empty region) and out-of-place cells.

    For attacker tables ``thresholds`` has shape (2, L): row 0 gives where the
    state-0 continue region starts, row 1 where the state-1 stop region starts,
    both in the (d, b) ordering of the grid points when d is supplied.
    """

    thresholds: np.ndarray
    flagged: dict = field(default_factory=dict)
    violations: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


def upper_interval(indicator):
    """Best split tau for a 0/1 sequence that should read 0...0 1...1.

    Returns (tau, misplaced indices); among splits with the fewest misplaced
    cells the largest tau is chosen.
    """
    x = np.asarray(indicator, dtype=bool)
    n = x.size
    ones_before = np.concatenate([[0], np.cumsum(x)])
    zeros_after = np.concatenate([np.cumsum((~x)[::-1])[::-1], [0]])
    cost = ones_before + zeros_after
    tau = int(n - np.argmin(cost[::-1]))
    bad = [i for i in range(n) if (i < tau) == bool(x[i])]
    return tau, bad


def extract_thresholds(gs: GridStrategy, tolerance_cells: int = 0, d=None,
                       det_tol: float = 0.01) -> ThresholdReport:
    """Check the stop region of every row is an interval and return its boundary.

    Defender rows: stop region must be an upper interval in b. Attacker rows
    are ordered by (d, b) when the defender stop probabilities ``d`` (shape
    (L, K)) are given: the state-1 stop region and the state-0 continue region
    must be upper intervals. Up to ``tolerance_cells`` misplaced cells per row
    are flagged but tolerated.
    """
    t = gs.table
    if np.any(np.minimum(t, 1 - t) > det_tol):
        raise ValueError("extract_thresholds needs near-deterministic tables")
    flagged, violations = {}, {}

    def handle(key, ind):
        tau, bad = upper_interval(ind)
        if bad:
            (flagged if len(bad) <= tolerance_cells else violations)[key] = bad
        return tau

    if gs.player is Player.DEFENDER:
        th = np.array([handle(l + 1, t[l] >= 0.5) for l in range(gs.L)])
        return ThresholdReport(th, flagged, violations)
    th = np.zeros((2, gs.L), dtype=int)
    b = gs.points
    for l in range(gs.L):
        order = np.arange(gs.K) if d is None else np.lexsort((b, np.asarray(d)[l]))
        th[0, l] = handle((0, l + 1), t[0, l][order] < 0.5)
        th[1, l] = handle((1, l + 1), t[1, l][order] >= 0.5)
    return ThresholdReport(th, flagged, violations)
