"""Configuration: defaults, validation ranges, TOML round trip."""

from __future__ import annotations

import pytest

from fpengine.config import ConfigError, EngineConfig


def test_stock_defaults():
    cfg = EngineConfig()
    assert cfg.runs == 5
    assert cfg.gamma == 0.6
    assert cfg.tau_sim == 0.75
    assert cfg.budget == 2000
    assert cfg.alpha == 1.0
    assert cfg.tau_h_quantile == 0.8
    assert cfg.tau_ann == 0.5
    assert cfg.dedup_hamming == 5
    assert cfg.tfidf_cos == 0.90
    assert cfg.plateau_eps == 0.005
    assert cfg.patience == 1
    assert (cfg.k_min, cfg.k_max) == (2, 20)
    assert cfg.fusion_lambda == 1.0


def test_roundtrip_identity():
    cfg = EngineConfig().with_overrides(seed=42, budget=123, model="http://models.internal:9000", tau_sim=0.8)
    assert EngineConfig.loads(cfg.dumps()) == cfg


def test_roundtrip_through_file(tmp_path):
    cfg = EngineConfig().with_overrides(seed=9, alpha=2.0, route_override="adopt_oracle")
    path = tmp_path / "c.toml"
    cfg.save(path)
    assert EngineConfig.load(path) == cfg


def test_env_var_fallback(tmp_path, monkeypatch):
    cfg = EngineConfig().with_overrides(seed=31)
    path = tmp_path / "engine.toml"
    cfg.save(path)
    monkeypatch.setenv("FPE_CONFIG", str(path))
    assert EngineConfig.load() == cfg


@pytest.mark.parametrize(
    "field,value",
    [
        ("gamma", 1.0),
        ("gamma", -0.1),
        ("tau_sim", 1.0),
        ("runs", 0),
        ("alpha", -1.0),
        ("tau_ann", 1.5),
        ("dedup_hamming", 65),
        ("tfidf_cos", 1.2),
        ("patience", 0),
        ("k_min", 1),
        ("fusion_lambda", -0.5),
        ("route_override", "sideways"),
        ("sampling_strategy", "alphabetical"),
        ("annotation_tasks", "karaoke"),
    ],
)
def test_out_of_range_rejected(field, value):
    with pytest.raises(ConfigError):
        EngineConfig().with_overrides(**{field: value})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        EngineConfig.loads("[constants]\nwarp_factor = 9\n")


def test_k_range_array():
    cfg = EngineConfig.loads("[constants]\nk_range = [3, 12]\n")
    assert (cfg.k_min, cfg.k_max) == (3, 12)
