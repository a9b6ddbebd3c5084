import numpy as np
import pytest

from stopgame import io as sio
from stopgame.game import GameConfig
from stopgame.observation import gaussian_model
from stopgame.strategies import (BaselineStrategy, MixedThresholdStrategy, Player, ThresholdVector,
                                 constant_attacker)


def test_empty_config_defaults(tmp_path):
    p = tmp_path / "game.json"
    p.write_text("")
    cfg, ref = sio.load_game_config(p)
    assert cfg == GameConfig() and ref is None


def test_invalid_gamma(tmp_path):
    p = tmp_path / "game.json"
    p.write_text('{"game": {"gamma": 1.2}}')
    with pytest.raises(sio.ConfigError, match="gamma"):
        sio.load_game_config(p)


def test_unknown_field_and_syntax(tmp_path):
    p = tmp_path / "game.json"
    p.write_text('{"game": {"gama": 0.9}}')
    with pytest.raises(sio.ConfigError, match="gama"):
        sio.load_game_config(p)
    p.write_text('{"game": {\n "gamma": }')
    with pytest.raises(sio.ConfigError, match=":2:"):
        sio.load_game_config(p)


def test_config_round_trip(tmp_path):
    cfg = GameConfig(L=4, gamma=0.9123456789012345, r_st=17.3)
    p = tmp_path / "game.json"
    sio.save_game_config(p, cfg, "obs.json")
    back, ref = sio.load_game_config(p)
    assert back == cfg and ref == str(tmp_path / "obs.json")


def test_observation_round_trip(tmp_path):
    obs = gaussian_model(2.5, 6.5, 1.5, 10)
    p = tmp_path / "obs.json"
    sio.save_observation_model(p, obs)
    back = sio.load_observation_model(p)
    assert np.array_equal(back.pmf0, obs.pmf0) and np.array_equal(back.pmf1, obs.pmf1)


def test_strategy_round_trips(tmp_path, rng):
    mix = MixedThresholdStrategy(tuple(ThresholdVector(Player.ATTACKER, rng.normal(size=4))
                                       for _ in range(3)), rng.dirichlet(np.ones(3)), d_floor=0.2)
    for s in (mix, ThresholdVector(Player.DEFENDER, [0.1, 0.2]), constant_attacker(2, 0.3, 0.1),
              BaselineStrategy("alert-threshold", 3)):
        p = tmp_path / "s.json"
        sio.save_strategy(p, s)
        back = sio.load_strategy(p)
        assert sio.strategy_to_dict(back) == sio.strategy_to_dict(s)


def test_strategy_L_mismatch():
    d = {"kind": "threshold", "player": "defender", "L": 3, "atoms": [{"theta": [0.0, 1.0]}]}
    with pytest.raises(sio.ConfigError, match="L=3"):
        sio.strategy_from_dict(d)


def test_samples(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("metric_name,state,value\nalerts,0,3\nalerts,1,9\n")
    assert sio.load_samples(p)["alerts"][1].tolist() == [9.0]
    p.write_text("metric_name,state,value\nalerts,2,3\n")
    with pytest.raises(sio.ConfigError, match=":2:"):
        sio.load_samples(p)


def test_value_table(tmp_path):
    p = tmp_path / "v.csv"
    sio.write_value_table(p, np.zeros((2, 3)), np.linspace(0, 1, 3))
    lines = p.read_text().splitlines()
    assert lines[0] == "l,b,value" and len(lines) == 7


def test_manifest_round_trip(tmp_path):
    m = sio.RunManifest(command=["stopgame", "value"], seeds={"seed": 3})
    m.add_output("a.csv")
    m.write(tmp_path / "m.json")
    assert sio.RunManifest.read(tmp_path / "m.json") == m
