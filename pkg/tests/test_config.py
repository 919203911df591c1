from pathlib import Path

import pytest

from dogseg.config import FULL_SCALE, SCHEMA, ConfigError, RunConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_and_text_round_trip():
    cfg = RunConfig()
    assert cfg["dog.levels"] == 4 and cfg["fusion.strategy"] == "bconvlstm"
    back = RunConfig.from_text(cfg.to_text())
    assert back.to_dict() == cfg.to_dict()
    assert set(cfg.to_dict()) == set(SCHEMA)


def test_parsing_and_errors():
    cfg = RunConfig.from_text("encoder.blocks = 8:2, 16:1  # comment\n\ndog.enabled = no\nweak.bbox_mode = union\n")
    assert cfg["encoder.blocks"] == ((8, 2), (16, 1))
    assert cfg["dog.enabled"] is False and cfg["weak.bbox_mode"] == "union"
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_text("dog.sigma = 2")
    with pytest.raises(ConfigError, match=":1:"):
        RunConfig.from_text("fusion.strategy = max")
    with pytest.raises(ConfigError):
        RunConfig.from_text("just words")
    with pytest.raises(ConfigError):
        RunConfig.from_text("dog.enabled = maybe")


def test_resolution_order(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("episode.seed = 3\ntrain.total_episodes = 10\ntrain.lr_decay_every = 10\n")
    cfg = RunConfig.resolve(path, {"train.total_episodes": "20", "episode.fold": None}, env={})
    assert cfg["episode.seed"] == 3 and cfg["train.total_episodes"] == 20 and cfg["episode.fold"] == 0
    cfg = RunConfig.resolve(path, env={"DOGSEG_SEED": "9"})
    assert cfg["episode.seed"] == 9


def test_derived_configs():
    cfg = RunConfig.from_text("dog.enabled = false\nepisode.shots = 5\nweak.bbox_mode = component\nweak.train = true")
    mc = cfg.model_config((64, 64))
    assert mc.use_dog is False and mc.shots == 5 and mc.encoder.input_size == (64, 64)
    tc = cfg.train_config()
    assert tc.shots == 5 and tc.weak == "component"
    assert cfg.synth_config().images_per_class == 50


def test_shipped_configs_parse():
    for name in ("bench.cfg", "desk.cfg", "full.cfg"):
        cfg = RunConfig.resolve(CONFIGS / name, env={})
        cfg.train_config()
        cfg.model_config((64, 64))
    full = RunConfig.resolve(CONFIGS / "full.cfg", env={})
    assert all(full[k] == v for k, v in FULL_SCALE.items())
