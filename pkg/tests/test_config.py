import json

import pytest

from stgr.config import HEADS, RunConfig, load_config, preset
from stgr.errors import ConfigError
from stgr.synth import PhantomConfig


def test_defaults():
    cfg = RunConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.epochs) == (1e-4, 0.01, 16, 50)
    assert (cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout) == (16, 32.0, 0.05)
    assert (cfg.tau_sel, cfg.tau_nce, cfg.match_threshold) == (0.5, 0.07, 0.5)
    assert (cfg.lambda_ce, cfg.lambda_nce, cfg.lambda_reg) == (1.0, 0.5, 0.5)
    assert cfg.lr_floor == pytest.approx(1e-6)
    assert cfg.proj_width == 2 * cfg.d_v


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="learning_rate"):
        RunConfig.from_dict({"learning_rate": 0.1})


def test_aliases_and_duplicates():
    assert RunConfig.from_dict({"lambda_align": 0.2}).lambda_nce == 0.2
    assert RunConfig.from_dict({"lambda_2": 0.3}).lambda_reg == 0.3
    with pytest.raises(ConfigError, match="twice"):
        RunConfig.from_dict({"lambda_1": 0.2, "lambda_nce": 0.4})


@pytest.mark.parametrize("bad", [{"head": "mlp"}, {"d_v": 7, "graph_heads": 7}, {"tau_sel": 1.5},
                                 {"tau_nce": 0.0}, {"lr": -1.0}, {"folds": 1}, {"epochs": -1}])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_roundtrip_and_presets():
    for name in ("default", "overfit", "benchmark", "tiny"):
        cfg = preset(name)
        assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg
    assert preset("overfit").epochs == 200
    with pytest.raises(ConfigError):
        preset("huge")
    assert set(HEADS) == {"stgr", "linear", "cosine"}


def test_load_config_with_preset_and_phantom_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "tiny", "lr": 0.01, "phantom": {"rho": 0.3}}))
    cfg = load_config(path)
    assert cfg.lr == 0.01 and cfg.d_v == 8
    assert cfg.phantom.rho == 0.3 and cfg.phantom.height == 32


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_replace_merges_phantom_fields():
    cfg = RunConfig().replace(phantom={"rho": 0.1})
    assert cfg.phantom == PhantomConfig(rho=0.1)
