import numpy as np
import pytest

from carml import artifacts
from carml.config import ConfigError, RunConfig, build_config, config_to_dict, parse_config, serialize_config
from conftest import tiny_config


def test_empty_config_gives_defaults():
    cfg = parse_config("", environ={})
    assert cfg == RunConfig()
    assert cfg.reward.lam == 0.99
    assert cfg.reward.window == 10
    assert cfg.policy.clip_ratio == 0.2 and cfg.policy.value_coef == 0.1
    assert cfg.policy.episodes_per_trial == 4
    assert cfg.env.horizon == 32 and cfg.env.obs_mode == "rays" and cfg.env.n_rays == 12
    c = cfg.curriculum
    assert (c.outer_iterations, c.policy_updates_per_iteration, c.tasks_per_update, c.reservoir_capacity) == \
        (5, 60, 16, 500)
    assert cfg.scaffold.n_components == 8


def test_out_of_range_lambda_names_the_key():
    with pytest.raises(ConfigError, match=r"reward\.lambda"):
        parse_config("[reward]\nlambda = 1.5\n", environ={})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="reward.lamda"):
        parse_config("[reward]\nlamda = 0.5\n", environ={})
    with pytest.raises(ConfigError, match="rewards"):
        parse_config("[rewards]\nlambda = 0.5\n", environ={})


def test_type_errors_rejected():
    with pytest.raises(ConfigError, match="policy.hidden_size"):
        parse_config('[policy]\nhidden_size = "big"\n', environ={})
    with pytest.raises(ConfigError, match="malformed"):
        parse_config("[policy\n", environ={})


def test_round_trip():
    cfg = tiny_config(seed=7, reward={"lam": 0.3})
    assert parse_config(serialize_config(cfg), environ={}) == cfg
    assert build_config(config_to_dict(cfg)) == cfg


def test_file_source(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 4\n[env]\nhorizon = 12\n")
    cfg = parse_config(p, environ={})
    assert cfg.seed == 4 and cfg.env.horizon == 12


def test_environment_overrides():
    env = {"CARML__REWARD__LAMBDA": "0.5", "CARML__SEED": "9", "CARML__ENV__OBS_MODE": "pose",
           "CARML__CURRICULUM__ENCODER_WARM_START": "false", "UNRELATED": "x"}
    cfg = parse_config("[reward]\nlambda = 0.2\n", environ=env)
    assert cfg.reward.lam == 0.5 and cfg.seed == 9 and cfg.env.obs_mode == "pose"
    assert cfg.curriculum.encoder_warm_start is False
    with pytest.raises(ConfigError, match=r"reward\.lambda"):
        parse_config("", environ={"CARML__REWARD__LAMBDA": "2"})


def test_versioned_artifacts_reject_other_versions(tmp_path):
    rec = artifacts.dumps_record("scaffold", {"a": 1})
    assert artifacts.loads_record(rec, "scaffold")["a"] == 1
    with pytest.raises(artifacts.ArtifactVersionError):
        artifacts.loads_record(rec.replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(ValueError):
        artifacts.loads_record(rec, "metrics")
    p = tmp_path / "x.npz"
    artifacts.save_npz(p, {"w": np.arange(3.0)}, {"k": 1})
    arrays, meta = artifacts.load_npz(p)
    assert np.array_equal(arrays["w"], np.arange(3.0)) and meta == {"k": 1}
    np.savez(p, format_version=np.array(2), meta=np.array("{}"))
    with pytest.raises(artifacts.ArtifactVersionError):
        artifacts.load_npz(p)
