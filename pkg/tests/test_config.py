import json

import pytest

from goce import checkpoint as ckpt
from goce.config import ConfigError, apply_overrides, from_dict, load
from goce.model import ModelConfig, init_params


def test_defaults_and_round_trip():
    run = from_dict({})
    assert run.model == ModelConfig() and run.seed == 0
    assert from_dict(run.to_dict()).to_dict() == run.to_dict()


def test_overrides_and_coercion(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"d": 16, "lr": 1}, "seed": 2}))
    run = load(path, ["model.n_heads=2", "gate.T0=0.5", "model.mask_mode=causal-full"], seed=9)
    assert run.model.d == 16 and run.model.n_heads == 2 and run.model.mask_mode == "causal-full"
    assert isinstance(run.model.lr, float) and run.gate.T0 == 0.5
    assert run.seed == 9 and run.model.seed == 9


@pytest.mark.parametrize(
    "obj",
    [
        {"model": {"bogus": 1}},
        {"extra": {}},
        {"model": {"d": "wide"}},
        {"model": {"d": 2.5}},
        {"seed": "x"},
        {"gate": {"gamma": 1.5}},
        {"model": {"k": 9}},
    ],
)
def test_bad_configs_raise(obj):
    with pytest.raises(ConfigError):
        from_dict(obj)


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["model.d"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["d=3"])


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  oops\n}")
    with pytest.raises(ConfigError, match="line 2"):
        load(bad)


def test_checkpoint_rejects_unknown_config_key(tmp_path):
    cfg = ModelConfig(d=4, n_heads=1, d_k=2, n_experts=1, d_ff=2, d_edge=2, d_readout=2, n_layers=1)
    obj = ckpt.to_dict(cfg, init_params(cfg))
    obj["config"]["mystery"] = 1
    with pytest.raises(ckpt.CheckpointError):
        ckpt.from_dict(obj)
    obj = ckpt.to_dict(cfg, init_params(cfg))
    obj["format_version"] = 99
    with pytest.raises(ckpt.CheckpointError):
        ckpt.from_dict(obj)
