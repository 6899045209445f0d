from __future__ import annotations

import pytest
import yaml

from kgroute.config import ConfigError, RunConfig, build_config, load_config, with_section


def test_defaults_resolve():
    cfg = build_config()
    assert cfg.model.input_dim == cfg.embedder.dimension
    assert cfg.train.seed == cfg.model.init_seed == cfg.scenario.seed == 0
    assert cfg.sweep.k[-1] == 24


@pytest.mark.parametrize("data,match", [
    ({"modle": {}}, "top-level"),
    ({"model": {"hiden": 64}}, "model"),
    ({"train": {"lr": -1.0}}, "train"),
    ({"model": 3}, "mapping"),
    ({"model": {"input_dim": 32}}, "input_dim"),
])
def test_bad_config_is_rejected(data, match):
    with pytest.raises(ConfigError, match=match):
        build_config(data)


@pytest.mark.parametrize("key", ["model.bogus", "nowhere.x", "vote.k.deeper"])
def test_bad_override_is_rejected(key):
    with pytest.raises(ConfigError):
        build_config({"vote": {"k": 3}}, {key: 1})


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"vote": {"k": 5, "theta": 0.5}, "train": {"epochs": 3}}))
    cfg = load_config(path, {"vote.k": 2, "train.temperature": 0.5})
    assert (cfg.vote.k, cfg.vote.theta, cfg.train.epochs, cfg.train.temperature) == (2, 0.5, 3, 0.5)


def test_seed_propagation():
    cfg = build_config({"seed": 7, "train": {"seed": 3}})
    assert cfg.model.init_seed == cfg.scenario.seed == cfg.embedder.seed == 7
    assert cfg.train.seed == 3
    # an explicit --seed resets every section seed
    cfg = build_config({"seed": 7, "train": {"seed": 3}}, {"seed": 11})
    assert cfg.train.seed == cfg.model.init_seed == 11


def test_hash_ignores_jobs_and_root_only():
    a = build_config({"jobs": 1, "run_root": "x"})
    b = build_config({"jobs": 4, "run_root": "y"})
    c = build_config({}, {"vote.theta": 0.6})
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 12
    assert a.run_dir().name == a.config_hash()


def test_snapshot_round_trips(tmp_path):
    cfg = build_config({"seed": 3, "sweep": {"k": [1, 2]}}, {"model.hidden": 64})
    out = cfg.write_snapshot(tmp_path)
    again = load_config(out)
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(tmp_path / "list.yaml")


def test_llm_mode_needs_endpoint():
    with pytest.raises(ConfigError):
        build_config({"agents": {"mode": "llm"}})
    cfg = build_config({"agents": {"mode": "llm", "endpoint": "http://x", "model": "m"}})
    assert cfg.agents.mode == "llm"


def test_with_section():
    cfg = with_section(RunConfig(), "vote", k=3)
    assert cfg.vote.k == 3
