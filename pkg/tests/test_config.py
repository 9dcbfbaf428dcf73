"""YAML run-config loading, validation, and fingerprints."""

import pytest

from dentdet.config import ENV_CONFIG, RunConfig, load_config


def test_defaults_without_file(monkeypatch):
    monkeypatch.delenv(ENV_CONFIG, raising=False)
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.schedule.timesteps == 1000
    assert cfg.train.lr == 2e-3
    assert cfg.model.scale == 2.0


def test_partial_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train:\n  lr: 0.01\n  seed: 9\nschedule:\n  steps: 4\n")
    cfg = load_config(path)
    assert cfg.train.lr == 0.01
    assert cfg.train.seed == 9
    assert cfg.schedule.steps == 4
    assert cfg.train.batch_size == RunConfig().train.batch_size


def test_env_var_fallback(tmp_path, monkeypatch):
    path = tmp_path / "env.yaml"
    path.write_text("data:\n  count: 5\n")
    monkeypatch.setenv(ENV_CONFIG, str(path))
    assert load_config().data.count == 5


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("training:\n  lr: 0.01\n")
    with pytest.raises(ValueError, match="unknown config sections"):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("train:\n  learning_rate: 0.01\n")
    with pytest.raises(ValueError, match="unknown config keys"):
        load_config(path)


def test_non_mapping_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- a\n- b\n")
    with pytest.raises(ValueError):
        load_config(path)


def test_value_validation(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("schedule:\n  steps: 20\n")
    with pytest.raises(ValueError, match="1..8"):
        load_config(path)


def test_fingerprint_tracks_content(tmp_path):
    a = load_config()
    path = tmp_path / "run.yaml"
    path.write_text("train:\n  lr: 0.01\n")
    b = load_config(path)
    assert a.fingerprint() != b.fingerprint()
    assert a.fingerprint() == RunConfig().fingerprint()
    assert len(a.fingerprint()) == 16
