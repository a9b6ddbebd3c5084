"""Config, model, strategy and table files.

Structured files are JSON. Floats are written with ``repr`` (shortest
round-trip form), so reading a file back reproduces every value bit for bit.
"""
from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .game import GameConfig
from .observation import ObservationModel
from .strategies import (D_FLOOR, BaselineKind, BaselineStrategy, GridStrategy,
                         MixedThresholdStrategy, Player, ThresholdVector)


class ConfigError(ValueError):
    """A file could not be parsed or failed validation."""


def _load_json(path) -> dict:
    text = Path(path).read_text()
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _dump_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, allow_nan=False) + "\n")


def _check_keys(where: str, data: dict, allowed) -> None:
    extra = sorted(set(data) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(extra)}")


# -- game config ----------------------------------------------------------------

GAME_FIELDS = ("L", "r_st", "r_cost", "r_int", "gamma", "phi", "t_max")


def game_config_from_dict(data: dict, where: str = "game") -> GameConfig:
    _check_keys(where, data, GAME_FIELDS)
    kwargs = dict(data)
    if kwargs.get("phi") is not None:
        kwargs["phi"] = tuple(kwargs["phi"])
    try:
        return GameConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def game_config_to_dict(cfg: GameConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["phi"] = list(cfg.phi)
    return d


def load_game_config(path) -> tuple[GameConfig, str | None]:
    """Read a game file: ``{"game": {...}, "observation_model": "path"}``.

    Missing fields take the published defaults; an empty file is valid. The
    observation-model reference is resolved relative to the file.
    """
    data = _load_json(path)
    _check_keys(str(path), data, ("game", "observation_model"))
    cfg = game_config_from_dict(data.get("game", {}), f"{path}: game")
    ref = data.get("observation_model")
    if ref is not None:
        ref = str((Path(path).parent / ref)) if not os.path.isabs(ref) else ref
    return cfg, ref


def save_game_config(path, cfg: GameConfig, observation_model: str | None = None) -> None:
    data = {"game": game_config_to_dict(cfg)}
    if observation_model is not None:
        data["observation_model"] = observation_model
    _dump_json(path, data)


# -- observation model ----------------------------------------------------------

def load_observation_model(path) -> ObservationModel:
    data = _load_json(path)
    _check_keys(str(path), data, ("alphabet_size", "pmf0", "pmf1"))
    try:
        model = ObservationModel(np.array(data["pmf0"], float), np.array(data["pmf1"], float))
    except KeyError as e:
        raise ConfigError(f"{path}: missing field {e.args[0]}") from None
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    if "alphabet_size" in data and data["alphabet_size"] != model.alphabet_size:
        raise ConfigError(f"{path}: alphabet_size {data['alphabet_size']} does not match "
                          f"pmf length {model.alphabet_size}")
    return model


def save_observation_model(path, model: ObservationModel) -> None:
    _dump_json(path, {"alphabet_size": model.alphabet_size,
                      "pmf0": model.pmf0.tolist(), "pmf1": model.pmf1.tolist()})


def load_samples(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Raw measurements: delimited text with columns metric_name, state, value."""
    out: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"metric_name", "state", "value"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ConfigError(f"{path}: expected columns metric_name,state,value")
        for n, row in enumerate(reader, start=2):
            try:
                s = int(row["state"])
                v = float(row["value"])
            except (TypeError, ValueError):
                raise ConfigError(f"{path}:{n}: malformed row {row!r}") from None
            if s not in (0, 1):
                raise ConfigError(f"{path}:{n}: state must be 0 or 1")
            out.setdefault(row["metric_name"], ([], []))[s].append(v)
    if not out:
        raise ConfigError(f"{path}: no samples")
    return {k: (np.array(a), np.array(b)) for k, (a, b) in out.items()}


# -- strategies -------------------------------------------------------------------

def strategy_to_dict(strategy) -> dict:
    if isinstance(strategy, ThresholdVector):
        return {"kind": "threshold", "player": strategy.player.value, "L": strategy.L,
                "atoms": [{"theta": strategy.theta.tolist(), "weight": 1.0}]}
    if isinstance(strategy, MixedThresholdStrategy):
        return {"kind": "mixed", "player": strategy.player.value, "L": strategy.L,
                "d_floor": strategy.d_floor,
                "atoms": [{"theta": a.theta.tolist(), "weight": float(w)}
                          for a, w in zip(strategy.atoms, strategy.weights)]}
    if isinstance(strategy, GridStrategy):
        return {"kind": "grid", "player": strategy.player.value, "L": strategy.L,
                "grid": {"K": strategy.K}, "table": strategy.table.tolist()}
    if isinstance(strategy, BaselineStrategy):
        return {"kind": "baseline", "player": "defender",
                "baseline": {"name": strategy.kind.value, "threshold": strategy.threshold}}
    raise TypeError(f"cannot serialise {type(strategy).__name__}")


def strategy_from_dict(data: dict, where: str = "strategy"):
    try:
        kind = data["kind"]
        player = Player(data.get("player", "defender"))
        if kind in ("threshold", "mixed"):
            atoms = [ThresholdVector(player, a["theta"]) for a in data["atoms"]]
            weights = [a.get("weight", 1.0) for a in data["atoms"]]
            if kind == "threshold":
                if len(atoms) != 1:
                    raise ConfigError(f"{where}: threshold strategies have exactly one atom")
                out = atoms[0]
            else:
                out = MixedThresholdStrategy(tuple(atoms), np.array(weights, float),
                                             data.get("d_floor", D_FLOOR))
        elif kind == "grid":
            out = GridStrategy(player, np.array(data["table"], float))
            if "grid" in data and data["grid"].get("K", out.K) != out.K:
                raise ConfigError(f"{where}: grid.K does not match the table")
        elif kind == "baseline":
            bl = data["baseline"]
            return BaselineStrategy(BaselineKind(bl["name"]), int(bl.get("threshold", 1)))
        else:
            raise ConfigError(f"{where}: unknown strategy kind {kind!r}")
    except KeyError as e:
        raise ConfigError(f"{where}: missing field {e.args[0]}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{where}: {e}") from None
    if "L" in data and data["L"] != out.L:
        raise ConfigError(f"{where}: L={data['L']} does not match the parameters (L={out.L})")
    return out


def load_strategy(path):
    return strategy_from_dict(_load_json(path), str(path))


def save_strategy(path, strategy) -> None:
    _dump_json(path, strategy_to_dict(strategy))


# -- tables -------------------------------------------------------------------------

LEARNING_CURVE_COLUMNS = ("iteration", "exploitability", "J_D", "mean_episode_len",
                          "mean_intrusion_len")


def write_learning_curve(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEARNING_CURVE_COLUMNS)
        for r in history.records:
            w.writerow([r.iteration, repr(r.exploitability), repr(r.J_D),
                        repr(r.mean_episode_len), repr(r.mean_intrusion_len)])


def write_value_table(path, values: np.ndarray, points: np.ndarray,
                      stop_prob: np.ndarray | None = None) -> None:
    """Rows l[,s],b,value[,stop_prob]; values shaped (L, K) or (2, L, K)."""
    values = np.asarray(values)
    with_s = values.ndim == 3
    head = ["l"] + (["s"] if with_s else []) + ["b", "value"]
    if stop_prob is not None:
        head.append("stop_prob")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        L = values.shape[-2]
        for l in range(L):
            for s in (range(2) if with_s else [None]):
                for k, b in enumerate(points):
                    v = values[s, l, k] if with_s else values[l, k]
                    row = [l + 1] + ([s] if with_s else []) + [repr(float(b)), repr(float(v))]
                    if stop_prob is not None:
                        p = stop_prob[s, l, k] if with_s else stop_prob[l, k]
                        row.append(repr(float(p)))
                    w.writerow(row)


# -- manifest -----------------------------------------------------------------------

@dataclass
class RunManifest:
    command: list[str]
    config_paths: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    start_time: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())
    version: str = __version__
    status: str = "running"
    notes: list[str] = field(default_factory=list)

    def add_output(self, path) -> str:
        p = str(path)
        if p not in self.outputs:
            self.outputs.append(p)
        return p

    def write(self, path) -> None:
        _dump_json(path, dataclasses.asdict(self))

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**_load_json(path))
