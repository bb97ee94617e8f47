import json

import pytest

from statevalue.config import DEFAULTS, RunConfig, load_config, read_config_file
from statevalue.errors import ConfigError
from statevalue.synth import number_chain


def test_defaults_resolve():
    cfg = RunConfig.from_dict({})
    r = cfg.resolved()
    assert r["hista"] == {"alpha": 0.7, "phi": 5, "delta": 50, "k": 66, "eps_dist": 1e-6,
                          "metric": "euclidean"}
    assert r["sveb"]["filter_lo"] == 0.1 and r["sveb"]["filter_hi"] == 0.8
    assert cfg.reference() == "exact"


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"hista": {"beta": 1}},
    {"env": {"prompt": 3}},
    {"sveb": {"n_ref": 3}},
    {"hista": 3},
])
def test_unknown_keys_rejected(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


@pytest.mark.parametrize("raw", [
    {"seed": -1},
    {"seed": "1"},
    {"threads": -2},
    {"hista": {"phi": 0}},
    {"hista": {"k": 1.5}},
    {"numca": {"patterns": ["roman"]}},
    {"sveb": {"reference": "grpo"}},
    {"sveb": {"filter_lo": 0.9, "filter_hi": 0.1}},
    {"normalize": 1},
])
def test_invalid_values_rejected(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(raw)


def test_toml_and_json(tmp_path):
    (tmp_path / "a.toml").write_text('seed = 4\n[hista]\nk = 10\n[sveb]\nreference = "mcs"\n')
    cfg = load_config(tmp_path / "a.toml")
    assert cfg.seed == 4 and cfg.hista_params().k == 10 and cfg.reference() == "mcs@20"
    (tmp_path / "b.json").write_text(json.dumps({"env": {"prompts": 3}}))
    assert load_config(tmp_path / "b.json").env["prompts"] == 3
    (tmp_path / "bad.toml").write_text("seed = = 1")
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "bad.toml")
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "missing.toml")


def test_env_config_builds_chain_with_seed():
    cfg = RunConfig.from_dict({"seed": 9, "env": {"n_latent": 4}})
    env = cfg.env_config()
    ref = number_chain(n_latent=4, seed=9)
    assert env.to_dict() == ref.to_dict()


def test_explicit_env_tables():
    cfg = RunConfig.from_dict({"env": {
        "n_latent": 2, "transition": [[0.5, 0.5], [0.5, 0.5]], "vocab": ["a", "7", "<eos>"],
        "emit": [[0.5, 0.3, 0.2], [0.5, 0.3, 0.2]], "target_number": "7"}})
    assert cfg.env_config().vocab == ["a", "7", "<eos>"]
    partial = RunConfig.from_dict({"env": {"vocab": ["a", "<eos>"]}})
    with pytest.raises(ConfigError, match="explicit env"):
        partial.env_config()


def test_write_resolved_is_stable(tmp_path):
    cfg = RunConfig.from_dict({"seed": 2})
    p = cfg.write_resolved(tmp_path)
    first = p.read_bytes()
    cfg.write_resolved(tmp_path)
    assert p.read_bytes() == first
    assert json.loads(first)["seed"] == 2


def test_defaults_not_mutated():
    cfg = RunConfig.from_dict({"hista": {"k": 3}})
    cfg.hista["k"] = 4
    assert DEFAULTS["hista"]["k"] == 66
