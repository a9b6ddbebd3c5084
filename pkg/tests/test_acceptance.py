"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

Criteria 5 and 9 train threshold fictitious play on the desk instance and are
marked slow. Their runs are stored under ``acceptance_runs/`` keyed by a hash
of the solver sources and settings, so a rerun with unchanged code reuses them.
"""
import hashlib
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from stopgame import io as sio
from stopgame.game import GameConfig, belief_update, reward, transition_row
from stopgame.observation import (ObservationModel, fit_gmm_em, gaussian_model, kl_divergence,
                                  tp2_check)
from stopgame.oracle import (BeliefGrid, attacker_br_vi, defender_br_vi, exploitability,
                             extract_thresholds, game_value_vi)
from stopgame.simulator import estimate_objective
from stopgame.strategies import (BaselineStrategy, BoundAttacker, GridStrategy,
                                 MixedThresholdStrategy, Player, ThresholdVector,
                                 constant_attacker)
from stopgame.tfp import TfpHyper, spsa_ascent, spsa_gradient, tfp_run

from conftest import random_tp2

RESULTS: list[str] = []
ROOT = Path(__file__).resolve().parents[1]


def verdict(n: int, ok: bool, detail: str, runtime: float | None = None) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}: {detail}"
    if runtime is not None:
        line += f" [{runtime:.1f} s]"
    RESULTS.append(line)
    print(line)


def note(n: int, detail: str) -> None:
    line = f"criterion {n}: info: {detail}"
    RESULTS.append(line)
    print(line)


# -- 1. model consistency --------------------------------------------------------

def _paper_reward(s, ad, aa, l, cfg):
    """Reward table written out cell by cell."""
    table = {
        (0, 0, 0): 0.0, (0, 0, 1): 0.0,
        (0, 1, 0): cfg.r_cost / l, (0, 1, 1): cfg.r_cost / l,
        (1, 0, 0): cfg.r_int, (1, 0, 1): 0.0,
        (1, 1, 0): cfg.r_st / l, (1, 1, 1): 0.0,
    }
    return table[(s, ad, aa)]


def test_criterion_1_model_consistency():
    t0 = time.time()
    cfg = GameConfig()
    worst_kernel = max(abs(transition_row(s, ad, aa, l, cfg).sum() - 1.0)
                       for s, ad, aa, l in itertools.product(range(3), (0, 1), (0, 1), range(1, 8)))
    cells = 0
    reward_ok = True
    for l in (1, 4, 7):
        for s, ad, aa in itertools.product((0, 1), (0, 1), (0, 1)):
            reward_ok &= reward(s, ad, aa, l, cfg) == _paper_reward(s, ad, aa, l, cfg)
            cells += 1
        for ad, aa in itertools.product((0, 1), (0, 1)):
            reward_ok &= reward(2, ad, aa, l, cfg) == 0.0
            cells += 1

    rng = np.random.default_rng(1)

    class Model:
        def __init__(self, p0, p1):
            self.p = (p0, p1)

        def stop_prob(self, l, b, s=None):
            return self.p[s]

    worst_norm = 0.0
    obs = random_tp2(rng, 10)
    for _ in range(10_000):
        b, p0, p1 = rng.random(3)
        l = int(rng.integers(2, 8))
        o = int(rng.integers(10))
        b1 = belief_update(b, 0, o, Model(p0, p1), l, obs, cfg)
        # independent evaluation of both posterior components
        phi = cfg.phi[l - 1]
        w0 = ((1 - b) * (1 - p0)) * obs.pmf0[o]
        w1 = ((1 - b) * p0 + b * (1 - p1) * (1 - phi)) * obs.pmf1[o]
        worst_norm = max(worst_norm, abs(b1 + w0 / (w0 + w1) - 1.0))

    mono_ok = True
    for _ in range(20):
        obs = random_tp2(rng, 12)
        m = Model(*rng.random(2))
        for b in rng.random(5):
            post = [belief_update(b, 0, o, m, 3, obs, cfg) for o in range(12)]
            mono_ok &= bool(np.all(np.diff(post) >= -1e-12))
    ok = worst_kernel <= 1e-12 and reward_ok and cells == 36 and worst_norm <= 1e-9 and mono_ok
    verdict(1, ok, f"kernel row error {worst_kernel:.1e}; reward cells {cells} match={reward_ok}; "
                   f"normalisation error {worst_norm:.1e} over 1e4 updates; "
                   f"monotone in o over 20 TP-2 models={mono_ok}", time.time() - t0)
    assert ok


# -- 2. threshold structure ------------------------------------------------------

def test_criterion_2_threshold_structure():
    t0 = time.time()
    cfg = GameConfig(L=3)
    grid = BeliefGrid(201)
    rng = np.random.default_rng(2)
    n = 20
    d_shape = d_order = a_shape = 0
    for _ in range(n):
        obs = random_tp2(rng, 20)
        # defender side: random attacker threshold strategy, bound to a random defender
        bind = MixedThresholdStrategy((ThresholdVector(Player.DEFENDER, rng.normal(0, 2, 3)),))
        att = BoundAttacker(MixedThresholdStrategy(
            (ThresholdVector(Player.ATTACKER, rng.normal(0, 2, 6)),)), bind)
        gs, _ = defender_br_vi(cfg, obs, att, grid)
        rep = extract_thresholds(gs, tolerance_cells=1)
        th = rep.thresholds
        d_shape += rep.ok
        d_order += rep.ok and th[1] <= th[0] + 1 and th[2] <= th[1] + 1
        # attacker side: random monotone defender, pi_D(S | 1) = 1
        dm = MixedThresholdStrategy((ThresholdVector(Player.DEFENDER, rng.normal(0, 2, 3)),))
        model = BoundAttacker(MixedThresholdStrategy(
            (ThresholdVector(Player.ATTACKER, rng.normal(0, 2, 6)),)), dm)
        ga, _ = attacker_br_vi(cfg, obs, dm, model, grid)
        a_shape += extract_thresholds(ga, tolerance_cells=1, d=dm.stop_prob_grid(grid.points)).ok
    ok = d_shape == n and d_order == n and a_shape == n
    verdict(2, ok, f"defender BR threshold form {d_shape}/{n}, with ordered thresholds "
                   f"{d_order}/{n}; attacker BR interval form in d {a_shape}/{n}", time.time() - t0)

    # same checks against opponents that ignore the belief, for context
    d_shape = d_order = a_shape = 0
    for _ in range(n):
        obs = random_tp2(rng, 20)
        att = constant_attacker(3, rng.random(), 0.5 * rng.random(), K=201)
        gs, _ = defender_br_vi(cfg, obs, att, grid)
        rep = extract_thresholds(gs, tolerance_cells=1)
        th = rep.thresholds
        d_shape += rep.ok
        d_order += rep.ok and th[1] <= th[0] + 1 and th[2] <= th[1] + 1
        table = np.zeros((3, grid.K))
        for l, a in enumerate(np.sort(rng.integers(5, 195, 3))[::-1]):
            table[l, a:] = 1
        ga, _ = attacker_br_vi(cfg, obs, GridStrategy(Player.DEFENDER, table),
                               constant_attacker(3, rng.random(), 0.5 * rng.random()), grid)
        a_shape += extract_thresholds(ga, tolerance_cells=1, d=table).ok
    note(2, f"belief-independent attackers: defender threshold form {d_shape}/{n}, ordered "
            f"{d_order}/{n}; deterministic threshold defenders: attacker interval form {a_shape}/{n}")
    assert ok


# -- 3. lemmas ---------------------------------------------------------------------

def test_criterion_3_lemmas():
    t0 = time.time()
    cfg = GameConfig(L=3)
    grid = BeliefGrid(201)
    rng = np.random.default_rng(3)
    min_value = math.inf
    anti = mono_l = 0.0
    lemma5 = 0
    pairs = 10
    for _ in range(pairs):
        obs = random_tp2(rng, 20)
        theta = rng.normal(0, 1.5, 3)
        lo = MixedThresholdStrategy((ThresholdVector(Player.DEFENDER, theta),))
        hi = MixedThresholdStrategy((ThresholdVector(Player.DEFENDER, theta - np.abs(rng.normal(0, 1, 3))),))
        model = constant_attacker(3, rng.random(), 0.5 * rng.random())
        g_hi, v_hi = attacker_br_vi(cfg, obs, hi, model, grid)
        g_lo, v_lo = attacker_br_vi(cfg, obs, lo, model, grid)
        for gs in (g_hi, g_lo):
            lemma5 += int(np.sum((gs.table[1] == 1) & (gs.table[0] == 1)))
        min_value = min(min_value, v_hi.values.min(), v_lo.values.min())
        anti = max(anti, float(np.max(v_hi.values[1] - v_lo.values[1])))
        for v in (v_hi, v_lo):
            mono_l = max(mono_l, float(np.max(v.values[1, :-1] - v.values[1, 1:])))
    ok1 = min_value >= -1e-6
    ok2 = anti <= 1e-6 and mono_l <= 1e-6
    ok5 = lemma5 == 0
    ok = ok1 and ok2 and ok5
    verdict(3, ok, f"lemma 1 min value {min_value:.2e}; lemma 2 anti-order slack {anti:.2e}, "
                   f"l-monotonicity slack {mono_l:.3g} (need <= 1e-6); "
                   f"lemma 5 stop-in-1 and stop-in-0 cells {lemma5}", time.time() - t0)
    slack = 0.0
    for _ in range(pairs):
        obs = random_tp2(rng, 20)
        flat = MixedThresholdStrategy((ThresholdVector(Player.DEFENDER, [rng.normal(0, 1.5)] * 3),))
        _, v = attacker_br_vi(cfg, obs, flat, constant_attacker(3, rng.random(), 0.5 * rng.random()), grid)
        slack = max(slack, float(np.max(v.values[1, :-1] - v.values[1, 1:])))
    note(3, f"l-monotonicity slack with the same threshold at every l: {slack:.3g}")
    assert ok


# -- 4. value function ---------------------------------------------------------------

def test_criterion_4_value_function():
    t0 = time.time()
    cfg = GameConfig()
    obs = gaussian_model(2.5, 6.5, 1.5, 10)
    assert tp2_check(obs)[0]
    vals = game_value_vi(cfg, obs, BeliefGrid(201))
    V = vals.values
    top = float(V.max())
    at_one = float(np.max(np.abs(V[:, -1])))
    second = np.diff(V, 2, axis=1)
    convex = float(second.min())
    arg = np.argmin(V, axis=1)
    interior = bool(np.all((arg > 0) & (arg < V.shape[1] - 1)))
    ok = top <= 1e-6 and at_one <= 1e-3 and convex >= -1e-2 * cfg.r_st and interior and vals.converged
    verdict(4, ok, f"max V {top:.2e}; max |V_l(1)| {at_one:.2e}; min second difference {convex:.3g} "
                   f"(bound {-1e-2 * cfg.r_st}); argmin interior for all l={interior}",
            time.time() - t0)
    assert ok


# -- 5 and 9. T-FP on the desk instance ------------------------------------------------

DESK_SEEDS = (0, 1, 2, 3)
SOLVER_FILES = ("game.py", "observation.py", "strategies.py", "simulator.py", "_kernels.py",
                "oracle.py", "tfp.py")


def desk_instance():
    return GameConfig(L=3), gaussian_model(2.5, 6.5, 1.5, 10), TfpHyper()


def _run_key(cfg, obs, h) -> str:
    src = ROOT / "src" / "stopgame"
    hsh = hashlib.sha256()
    for name in SOLVER_FILES:
        hsh.update((src / name).read_bytes())
    hsh.update(json.dumps([sio.game_config_to_dict(cfg), obs.pmf0.tolist(), obs.pmf1.tolist(),
                           repr(h), DESK_SEEDS]).encode())
    return hsh.hexdigest()[:16]


def _train(cfg, obs, h, seed, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    mix_d, mix_a, hist = tfp_run(cfg, obs, h, seed=seed)
    sio.write_learning_curve(out / "learning_curve.csv", hist)
    (out / "history.json").write_text(json.dumps({"converged": hist.converged,
                                                  "records": hist.as_rows()}) + "\n")
    sio.save_strategy(out / "defender_final.json", mix_d)
    sio.save_strategy(out / "attacker_final.json", mix_a)


@pytest.fixture(scope="module")
def desk_runs():
    cfg, obs, h = desk_instance()
    base = ROOT / "acceptance_runs" / _run_key(cfg, obs, h)
    runs = {}
    t0 = time.time()
    for seed in DESK_SEEDS:
        out = base / f"seed_{seed}"
        if not (out / "history.json").is_file():
            _train(cfg, obs, h, seed, out)
        hist = json.loads((out / "history.json").read_text())
        runs[seed] = {
            "delta": np.array([r["exploitability"] for r in hist["records"]]),
            "defender": sio.load_strategy(out / "defender_final.json"),
            "attacker": sio.load_strategy(out / "attacker_final.json"),
        }
    return runs, time.time() - t0, base


@pytest.mark.slow
def test_criterion_5_tfp_convergence(desk_runs):
    runs, elapsed, base = desk_runs
    n = max(len(r["delta"]) for r in runs.values())
    # runs that stopped early keep their final value for the rest of the horizon
    traj = np.array([np.concatenate([r["delta"], np.full(n - len(r["delta"]), r["delta"][-1])])
                     for r in runs.values()])
    med = np.median(traj, axis=0)
    q = max(1, n // 4)
    first, last = float(med[:q].mean()), float(med[-q:].mean())
    finals = [float(r["delta"][-1]) for r in runs.values()]
    final = float(np.median(finals))
    ok = last < first and final <= 0.2
    verdict(5, ok, f"median grid exploitability first quartile {first:.3f}, final quartile "
                   f"{last:.3f}; median final {final:.3f} (target 0.2, hard-fail line 0.5: "
                   f"{'above' if final > 0.5 else 'below'}); per-seed final "
                   f"{[round(x, 3) for x in finals]} after {[len(r['delta']) for r in runs.values()]} "
                   f"iterations; runs in {base.relative_to(ROOT)}", elapsed)
    assert ok


@pytest.mark.slow
def test_criterion_9_baseline_degradation(desk_runs):
    t0 = time.time()
    runs, _, _ = desk_runs
    cfg, obs, h = desk_instance()
    mix_d, mix_a = runs[0]["defender"], runs[0]["attacker"]
    att = BoundAttacker(mix_a, mix_d)
    n = 10_000
    learned = estimate_objective(cfg, obs, mix_d, att, att, n, seed=9)
    alert = estimate_objective(cfg, obs, BaselineStrategy("alert-threshold", 1), att, att, n, seed=9)
    pooled = math.hypot(learned.std_error, alert.std_error)
    margin = learned.mean - alert.mean
    ok = margin > 3 * pooled
    verdict(9, ok, f"J_D learned {learned.mean:.4f} vs alert-threshold {alert.mean:.4f}; margin "
                   f"{margin:.4f} vs 3 pooled std errors {3 * pooled:.4f}", time.time() - t0)
    assert ok


# -- 6. SPSA ---------------------------------------------------------------------

def _spsa_success(h: TfpHyper, runs: int = 100) -> int:
    target = np.array([1.0, -2.0, 0.5])
    f = lambda t: -float(np.sum((t - target) ** 2))
    hits = 0
    for seed in range(runs):
        rng = np.random.default_rng(seed)
        with np.errstate(over="ignore", invalid="ignore"):
            theta = spsa_ascent(lambda: f, rng.normal(size=3), h, rng)
        hits += bool(np.all(np.isfinite(theta)) and np.linalg.norm(theta - target) <= 0.1)
    return hits


def test_criterion_6_spsa():
    t0 = time.time()
    hits = _spsa_success(TfpHyper(N=1000))
    rng = np.random.default_rng(6)
    target = np.array([1.0, -2.0, 0.5])
    f = lambda t: -float(np.sum((t - target) ** 2))
    worst = 0.0
    for _ in range(10):
        theta = rng.normal(0, 2, 3)
        est = np.mean([spsa_gradient(f, theta, 1.0, rng) for _ in range(10_000)], axis=0)
        exact = -2 * (theta - target)
        worst = max(worst, float(np.linalg.norm(est - exact) / np.linalg.norm(exact)))
    ok = hits >= 90 and worst <= 0.05
    verdict(6, ok, f"published gains reach ||theta_N - theta*|| <= 0.1 in {hits}/100 runs; "
                   f"worst relative gradient error {worst:.3f} over 10 points", time.time() - t0)
    note(6, f"with the gain exponents exchanged: {_spsa_success(TfpHyper(N=1000, swap_exponents=True))}/100 runs")
    assert ok


# -- 7. observation model -----------------------------------------------------------

def _tp2_bruteforce(f0, f1, tol=1e-12) -> bool:
    n = len(f0)
    return all(f0[i] * f1[j] - f0[j] * f1[i] >= -tol for i in range(n) for j in range(i + 1, n))


def test_criterion_7_observation_model():
    t0 = time.time()
    rng = np.random.default_rng(7)
    n = 20_000
    comp = rng.random(n) < 0.7
    x = np.where(comp, rng.normal(100, 30, n), rng.normal(800, 30, n))
    params, _ = fit_gmm_em(x, 2, alphabet_size=1000)
    w_err = float(np.max(np.abs(params.weights - [0.7, 0.3])))
    m_err = float(np.max(np.abs(params.means - [100, 800])))
    agree = 0
    for _ in range(100):
        size = int(rng.integers(2, 65))
        if rng.random() < 0.5:
            m = random_tp2(rng, size)
            f0, f1 = m.pmf0, m.pmf1
        else:
            f0, f1 = rng.dirichlet(np.ones(size)), rng.dirichlet(np.ones(size))
        agree += tp2_check(ObservationModel(f0, f1))[0] == _tp2_bruteforce(f0, f1)
    kl_min = min(kl_divergence(rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k)))
                 for k in rng.integers(2, 50, 1000))
    ok = w_err <= 0.05 and m_err <= 10 and agree == 100 and kl_min >= 0
    verdict(7, ok, f"EM weight error {w_err:.4f}, mean error {m_err:.3f}; TP-2 agreement "
                   f"{agree}/100; min KL {kl_min:.2e}", time.time() - t0)
    assert ok


# -- 8. pure equilibrium ------------------------------------------------------------------

def test_criterion_8_pure_equilibrium():
    t0 = time.time()
    cfg = GameConfig(L=3)
    obs = ObservationModel([1.0, 0.0], [0.0, 1.0])  # observation reveals the state
    grid = BeliefGrid(201)
    d = np.ones((cfg.L, grid.K))
    d[:, 0] = 0.0  # stop iff b(1) > 0
    a = np.zeros((2, cfg.L, grid.K))
    a[1] = 1.0  # continue in state 0, stop in state 1
    rep = exploitability(cfg, obs, GridStrategy(Player.DEFENDER, d), GridStrategy(Player.ATTACKER, a),
                         grid, eval_episodes=4000, seed=8)
    ok = rep.delta_grid <= 0.1
    verdict(8, ok, f"grid exploitability {rep.delta_grid:.4f}; Monte Carlo {rep.delta:.4f} "
                   f"(std error {rep.std_error:.4f})", time.time() - t0)
    assert ok
