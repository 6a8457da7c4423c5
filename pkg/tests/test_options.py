import pytest

from outlierflow.core.errors import ConfigurationError
from outlierflow.core.options import (
    FULL_SCALE_PRESETS,
    CoverageConfig,
    RunConfig,
    Toy2DConfig,
    load_config,
    save_config,
)


def test_defaults_are_valid():
    config = RunConfig()
    assert config.grid_unit == 4
    assert config.lam == config.loss_weights["jsd"]
    assert config.temperature == config.temperatures["jsd"]
    assert config.temperature_for("unknown") == 1.0


def test_partial_dicts_extend_defaults():
    config = RunConfig.from_dict({"loss_kind": "kl", "loss_weights": {"kl": 0.5}, "temperatures": {"msp": 3.0}})
    assert config.lam == 0.5
    assert config.loss_weights["jsd"] == RunConfig().loss_weights["jsd"]
    assert config.temperature_for("msp") == 3.0
    assert config.temperature_for("jsd") == 2.0


def test_nested_configs_from_dict():
    config = RunConfig.from_dict({"toy2d": {"joint_steps": 3}, "coverage": {"modes": 4}})
    assert isinstance(config.toy2d, Toy2DConfig) and config.toy2d.joint_steps == 3
    assert isinstance(config.coverage, CoverageConfig) and config.coverage.modes == 4


def test_replace_keeps_other_fields():
    config = RunConfig(seed=1, batch_size=3)
    changed = config.replace(seed=9)
    assert changed.seed == 9 and changed.batch_size == 3
    assert config.seed == 1


@pytest.mark.parametrize(
    "changes",
    [
        {"num_classes": 1},
        {"image_size": 62},
        {"crop_size": 30},
        {"patch_min": 0},
        {"patch_min": 40, "patch_max": 20},
        {"loss_kind": "hinge"},
        {"score_kind": "energy"},
        {"generator": "vae"},
        {"loss_weights": {"jsd": 0.0}},
        {"loss_weights": {"tv": 1.0}},
        {"temperatures": {"msp": -1.0}},
        {"tpr": 0.0},
        {"batch_size": 0},
    ],
)
def test_invalid_values_rejected(changes):
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(changes)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"toy2d": {"points": 10}})


def test_nested_validation():
    with pytest.raises(ConfigurationError):
        Toy2DConfig(lam=0.0)
    with pytest.raises(ConfigurationError):
        CoverageConfig(modes=0)


def test_yaml_round_trip(tmp_path):
    config = RunConfig(seed=5, loss_kind="rkl", toy2d=Toy2DConfig(n_points=10))
    loaded = load_config(save_config(config, tmp_path / "run" / "config.yaml"))
    assert loaded == config


def test_yaml_errors(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_config(path)
    path.write_text("seed: [1\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_presets():
    road = RunConfig.preset("road")
    assert road.image_size == FULL_SCALE_PRESETS["road"]["image_size"]
    assert RunConfig.preset("aerial", seed=2).seed == 2
    with pytest.raises(ConfigurationError):
        RunConfig.preset("indoor")
