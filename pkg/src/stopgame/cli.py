"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric failure.
Non-convergence is reported as a warning and exits 0 unless --strict is given.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from .game import FALLBACK_MODES, DegenerateBeliefError
from .observation import (DEFAULT_ALPHABET, ObservationModel, fit_gmm_em, kl_divergence,
                          rank_metrics, tp2_check)
from .strategies import (BaselineKind, BaselineStrategy, BoundAttacker, GridStrategy,
                         Player, as_mixture)

logger = logging.getLogger("stopgame")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing(path: str) -> str:
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")
    return path


def _load_game(args):
    cfg, ref = sio.load_game_config(_existing(args.game))
    obs_path = args.obs or ref
    if obs_path is None:
        raise UsageError("no observation model: pass --obs or set observation_model in the game file")
    return cfg, sio.load_observation_model(_existing(obs_path)), obs_path


def _flag_convergence(args, what: str, ok: bool):
    if ok:
        return
    msg = f"{what} did not converge"
    if args.strict:
        args.numeric_failure = msg
    else:
        logger.warning(msg)


def _attacker_handle(strategy, defender):
    if isinstance(strategy, GridStrategy):
        if strategy.player is not Player.ATTACKER:
            raise ValueError("attacker file holds a defender strategy")
        return strategy
    mix = as_mixture(strategy)
    if mix.player is not Player.ATTACKER:
        raise ValueError("attacker file holds a defender strategy")
    if isinstance(defender, BaselineStrategy):
        raise ValueError("threshold attackers need a belief-indexed defender to bind to")
    return BoundAttacker(mix, defender)


def _defender_handle(strategy):
    if isinstance(strategy, (GridStrategy, BaselineStrategy)):
        if getattr(strategy, "player", Player.DEFENDER) is not Player.DEFENDER:
            raise ValueError("defender file holds an attacker strategy")
        return strategy
    mix = as_mixture(strategy)
    if mix.player is not Player.DEFENDER:
        raise ValueError("defender file holds an attacker strategy")
    return mix


def _manifest_for(args, argv, config_paths: dict, seeds: dict | None = None) -> sio.RunManifest:
    return sio.RunManifest(command=["stopgame", *argv], config_paths=config_paths,
                           seeds=seeds or {})


# -- subcommands ----------------------------------------------------------------

def cmd_fit_obs(args, argv):
    samples = sio.load_samples(_existing(args.samples))
    try:
        k0, k1 = (int(x) for x in args.components.split(","))
    except ValueError:
        raise UsageError("--components takes two integers, e.g. 2,3") from None
    if args.metric is None:
        ranking = rank_metrics(
            {m: (np.clip(np.rint(a), 0, args.alphabet - 1).astype(int),
                 np.clip(np.rint(b), 0, args.alphabet - 1).astype(int))
             for m, (a, b) in samples.items()}, args.alphabet, smoothing=1.0)
        metric = ranking[0][0]
        for name, kl in ranking:
            print(f"metric {name}: KL={kl:.6g}")
    else:
        metric = args.metric
        if metric not in samples:
            raise UsageError(f"metric {metric!r} not in samples")
    x0, x1 = samples[metric]
    p0_params, pmf0 = fit_gmm_em(x0, k0, args.alphabet)
    p1_params, pmf1 = fit_gmm_em(x1, k1, args.alphabet)
    model = ObservationModel(pmf0.probs, pmf1.probs)
    man = _manifest_for(args, argv, {"samples": args.samples})
    man.add_output(args.out)
    sio.save_observation_model(args.out, model)
    ok, viol = tp2_check(model)
    print(f"metric: {metric}")
    print(f"TP-2: {'yes' if ok else f'no (first violating minor {viol})'}")
    print(f"KL(pmf0 || pmf1) = {kl_divergence(pmf0, pmf1):.10g}")
    _flag_convergence(args, "EM fit", p0_params.converged and p1_params.converged)
    return man


def cmd_train(args, argv):
    from .tfp import TfpHyper, tfp_run

    cfg, obs, obs_path = _load_game(args)
    hyper = {}
    if args.hyper:
        hyper = json.loads(Path(_existing(args.hyper)).read_text() or "{}")
    for key in ("br_episodes", "eval_episodes", "d_floor"):
        if getattr(args, key) is not None:
            hyper[key] = getattr(args, key)
    if args.iters is not None:
        hyper["max_outer"] = args.iters
    hyper["grid_K"] = args.grid
    hyper["fallback"] = args.fallback
    if args.learned_br:
        hyper["learned_br_exploitability"] = True
    try:
        h = TfpHyper(**hyper)
    except TypeError as e:
        raise ValueError(f"hyperparameters: {e}") from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = _manifest_for(args, argv, {"game": args.game, "obs": obs_path}, {"seed": args.seed})
    curve = man.add_output(out / "learning_curve.csv")
    hist_json = man.add_output(out / "history.json")
    final_d = man.add_output(out / "defender_final.json")
    final_a = man.add_output(out / "attacker_final.json")
    man_path = out / "manifest.json"
    man.write(man_path)  # before the long computation

    def checkpoint(it, mix_d, mix_a, rec):
        if args.checkpoint_every and it % args.checkpoint_every == 0:
            sio.save_strategy(man.add_output(out / f"defender_{it:04d}.json"), mix_d)
            sio.save_strategy(man.add_output(out / f"attacker_{it:04d}.json"), mix_a)
            man.write(man_path)
        print(f"iter {it}: exploitability {rec.exploitability:.4f} "
              f"(Monte Carlo {rec.exploitability_mc:.4f}), J_D {rec.J_D:.4f}", flush=True)

    mix_d, mix_a, hist = tfp_run(cfg, obs, h, seed=args.seed, on_iteration=checkpoint)
    sio.write_learning_curve(curve, hist)
    Path(hist_json).write_text(json.dumps({"converged": hist.converged,
                                           "records": hist.as_rows()}, indent=2) + "\n")
    sio.save_strategy(final_d, mix_d)
    sio.save_strategy(final_a, mix_a)
    if not hist.converged:
        man.notes.append(f"exploitability stayed >= {h.delta} for {len(hist)} iterations")
    _flag_convergence(args, "T-FP", hist.converged)
    man.manifest_path = str(man_path)
    return man


def cmd_exploit(args, argv):
    from .oracle import BeliefGrid, exploitability

    cfg, obs, _ = _load_game(args)
    d = _defender_handle(sio.load_strategy(_existing(args.defender)))
    if isinstance(d, BaselineStrategy):
        raise ValueError("exploitability needs a belief-indexed defender strategy")
    a = _attacker_handle(sio.load_strategy(_existing(args.attacker)), d)
    rep = exploitability(cfg, obs, d, a, BeliefGrid(args.grid), args.episodes, args.seed,
                         args.fallback)
    lo, hi = rep.ci95
    print(f"exploitability {rep.delta:.6f}  95% CI [{lo:.6f}, {hi:.6f}]  "
          f"(std error {rep.std_error:.6f}, {args.episodes} episodes per term)")
    print(f"grid-value exploitability {rep.delta_grid:.6f}")
    print(f"J_D {rep.j_d.mean:.6f}; defender gain {rep.defender_gain:.6f}; "
          f"attacker gain {rep.attacker_gain:.6f}")
    print(f"convention: {rep.convention}")
    return None


def cmd_value(args, argv):
    from .oracle import BeliefGrid, game_value_vi

    cfg, obs, obs_path = _load_game(args)
    grid = BeliefGrid(args.grid)
    vals = game_value_vi(cfg, obs, grid)
    man = _manifest_for(args, argv, {"game": args.game, "obs": obs_path})
    sio.write_value_table(man.add_output(args.out), vals.values, grid.points)
    print(f"value iteration residual {vals.residual:.3g} after {vals.iterations} sweeps")
    _flag_convergence(args, "game value iteration", vals.converged)
    return man


def cmd_simulate(args, argv):
    from .simulator import episode_stats, run_episodes, write_traces

    cfg, obs, obs_path = _load_game(args)
    d = _defender_handle(sio.load_strategy(_existing(args.defender)))
    bind_to = d if not isinstance(d, BaselineStrategy) else None
    if args.bind_defender:
        bind_to = _defender_handle(sio.load_strategy(_existing(args.bind_defender)))
    a = _attacker_handle(sio.load_strategy(_existing(args.attacker)), bind_to)
    model = a
    if args.belief_model:
        model = _attacker_handle(sio.load_strategy(_existing(args.belief_model)), bind_to)
    traces = run_episodes(cfg, obs, d, a, model, args.episodes, args.seed, args.fallback)
    stats = episode_stats(traces)
    man = _manifest_for(args, argv, {"game": args.game, "obs": obs_path,
                                     "defender": args.defender, "attacker": args.attacker},
                        {"seed": args.seed})
    write_traces(man.add_output(args.out), traces)
    summary = {"n_episodes": stats.n_episodes, "mean_return": stats.mean_return,
               "mean_intrusion_length": stats.mean_intrusion_length,
               "mean_episode_length": stats.mean_episode_length,
               "stop_time_histogram": {str(k): v for k, v in stats.stop_time_histogram.items()},
               "terminal_reasons": stats.reasons,
               "degenerate_updates": int(sum(t.degenerate_updates for t in traces))}
    Path(man.add_output(f"{args.out}.summary.json")).write_text(json.dumps(summary, indent=2) + "\n")
    print(f"mean reward {stats.mean_return:.6f}; mean intrusion length "
          f"{stats.mean_intrusion_length:.4f}; mean episode length {stats.mean_episode_length:.4f}")
    if summary["degenerate_updates"]:
        logger.warning("%d degenerate belief updates (fallback: %s)",
                       summary["degenerate_updates"], args.fallback)
    return man


def cmd_baseline(args, argv):
    bl = BaselineStrategy(BaselineKind(args.name), args.threshold)
    sio.save_strategy(args.out, bl)
    print(f"wrote {args.name} baseline to {args.out}")
    man = _manifest_for(args, argv, {})
    man.add_output(args.out)
    return man


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stopgame", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--strict", action="store_true",
                        help="exit 3 instead of warning when a solver does not converge")
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def game_args(sp):
        sp.add_argument("--game", required=True, help="game config file")
        sp.add_argument("--obs", help="observation-model file (overrides the game file)")

    def fallback_arg(sp):
        sp.add_argument("--fallback", choices=FALLBACK_MODES, default="likelihood",
                        help="belief after an observation the model deems impossible")

    sp = sub.add_parser("fit-obs", parents=[common], help="fit observation pmfs from samples")
    sp.add_argument("--samples", required=True)
    sp.add_argument("--components", required=True, help="mixture sizes for states 0,1 e.g. 2,3")
    sp.add_argument("--alphabet", type=int, default=DEFAULT_ALPHABET)
    sp.add_argument("--metric", help="metric to fit (default: highest KL divergence)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit_obs)

    sp = sub.add_parser("train", parents=[common], help="run threshold fictitious play")
    game_args(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--iters", type=int, help="maximum outer iterations")
    sp.add_argument("--hyper", help="JSON file with T-FP hyperparameters")
    sp.add_argument("--grid", type=int, default=201)
    sp.add_argument("--br-episodes", type=int)
    sp.add_argument("--eval-episodes", type=int)
    sp.add_argument("--d-floor", type=float)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--learned-br", action="store_true",
                    help="measure exploitability with learned instead of grid best responses")
    fallback_arg(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("exploit", parents=[common], help="exploitability of a strategy pair")
    game_args(sp)
    sp.add_argument("--defender", required=True)
    sp.add_argument("--attacker", required=True)
    sp.add_argument("--grid", type=int, default=201)
    sp.add_argument("--episodes", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    fallback_arg(sp)
    sp.set_defaults(func=cmd_exploit)

    sp = sub.add_parser("value", parents=[common], help="approximate game value table")
    game_args(sp)
    sp.add_argument("--grid", type=int, default=201)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_value)

    sp = sub.add_parser("simulate", parents=[common], help="simulate episodes and write traces")
    game_args(sp)
    sp.add_argument("--defender", required=True)
    sp.add_argument("--attacker", required=True)
    sp.add_argument("--belief-model", help="attacker strategy assumed by the defender "
                                           "(default: the actual attacker)")
    sp.add_argument("--bind-defender", help="defender strategy that threshold attackers "
                                            "refer to (default: --defender)")
    sp.add_argument("--episodes", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    fallback_arg(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("baseline", parents=[common], help="write a baseline defender strategy")
    sp.add_argument("--name", required=True, choices=[k.value for k in BaselineKind])
    sp.add_argument("--threshold", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_baseline)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("stopgame: error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        import numba
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    man = None
    args.numeric_failure = None
    try:
        man = args.func(args, argv)
        code = EXIT_OK
        if args.numeric_failure:
            print(f"stopgame: numeric failure: {args.numeric_failure}", file=sys.stderr)
            code = EXIT_NUMERIC
    except UsageError as e:
        print(f"stopgame: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateBeliefError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"stopgame: numeric failure: {e}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (ValueError, TypeError, KeyError) as e:
        print(f"stopgame: validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"stopgame: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if man is not None:
        man.status = "ok" if code == EXIT_OK else "failed"
        path = getattr(man, "manifest_path", None) or f"{man.outputs[0]}.manifest.json"
        man.write(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
