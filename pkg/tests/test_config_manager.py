"""Tests for configuration manager module."""

import json
import os
import tempfile

import numpy as np
import pytest

from src import numeric_core as nc
from src.config_manager import ConfigManager
from src.utils.exceptions import ConfigurationError


class TestConfigManager:
    """Test cases for ConfigManager class."""

    @pytest.fixture
    def temp_config_dir(self):
        """Create temporary config directory for testing."""
        with tempfile.TemporaryDirectory() as temp_dir:
            yield temp_dir

    @pytest.fixture
    def manager(self, temp_config_dir, monkeypatch):
        for key in ("HSTU_SEED", "HSTU_LOG_INTERVAL", "HSTU_PRECISION", "HSTU_THREADS"):
            monkeypatch.delenv(key, raising=False)
        return ConfigManager(temp_config_dir)

    def write_config(self, directory, name, data):
        path = os.path.join(directory, f"{name}.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f)
        return path

    def test_init(self, manager, temp_config_dir):
        """Test ConfigManager initialization."""
        assert manager.config_dir == temp_config_dir

    def test_defaults_are_valid(self, manager):
        config = manager.load_config()
        assert config["train"]["mode"] == "streaming"
        assert config["train"]["epochs"] == 1
        assert config["model"] == {"preset": "desk"}
        assert config["bench"]["history_tokens"] < 128

    def test_file_overrides_defaults(self, manager, temp_config_dir):
        self.write_config(temp_config_dir, "run", {"seed": 9, "train": {"batch_size": 4}})
        config = manager.load_config("run")
        assert config["seed"] == 9
        assert config["train"]["batch_size"] == 4
        assert config["train"]["learning_rate"] == 1e-3

    def test_load_by_path(self, manager, temp_config_dir):
        path = self.write_config(temp_config_dir, "other", {"seed": 2})
        assert manager.load_config(path)["seed"] == 2

    def test_environment_beats_file(self, manager, temp_config_dir, monkeypatch):
        self.write_config(temp_config_dir, "run", {"seed": 9})
        monkeypatch.setenv("HSTU_SEED", "11")
        monkeypatch.setenv("HSTU_LOG_INTERVAL", "0")
        config = manager.load_config("run")
        assert config["seed"] == 11
        assert config["train"]["log_interval"] == 1

    def test_non_integer_environment_is_ignored(self, manager, monkeypatch):
        monkeypatch.setenv("HSTU_SEED", "many")
        assert manager.load_config()["seed"] == 0

    def test_flags_beat_everything(self, manager, monkeypatch):
        monkeypatch.setenv("HSTU_SEED", "11")
        config = manager.apply_overrides(manager.load_config(), {"seed": 5, "train.batch_size": 2, "train.epochs": None})
        assert config["seed"] == 5
        assert config["train"]["batch_size"] == 2
        assert config["train"]["epochs"] == 1

    def test_missing_file(self, manager):
        with pytest.raises(ConfigurationError, match="not found"):
            manager.load_config("nope")

    def test_invalid_json(self, manager, temp_config_dir):
        path = os.path.join(temp_config_dir, "broken.json")
        with open(path, "w") as f:
            f.write("{ not json")
        with pytest.raises(ConfigurationError, match="Failed to load"):
            manager.load_config("broken")

    def test_schema_error_names_field(self, manager, temp_config_dir):
        self.write_config(temp_config_dir, "bad", {"synthetic": {"train_fraction": 1.5}})
        with pytest.raises(ConfigurationError, match="synthetic.train_fraction") as info:
            manager.load_config("bad")
        assert info.value.error_code == "CONFIG_SCHEMA"

    def test_streaming_with_shuffle_is_rejected(self, manager, temp_config_dir):
        self.write_config(temp_config_dir, "bad", {"train": {"epochs": 1, "shuffle": True}})
        with pytest.raises(ConfigurationError, match="streaming mode requires"):
            manager.load_config("bad")

    def test_multi_epoch_allows_shuffle(self, manager, temp_config_dir):
        self.write_config(temp_config_dir, "ok", {"train": {"mode": "multi_epoch", "epochs": 3, "shuffle": True}})
        assert manager.load_config("ok")["train"]["epochs"] == 3

    def test_task_weights_must_match_action_bits(self, manager, temp_config_dir):
        self.write_config(temp_config_dir, "bad", {"train": {"task_weights": [1.0, 1.0, 1.0]}})
        with pytest.raises(ConfigurationError, match="action bits"):
            manager.load_config("bad")

    def test_override_through_a_value(self, manager):
        with pytest.raises(ConfigurationError, match="not a section"):
            manager.apply_overrides(manager.load_config(), {"seed.value": 1})

    def test_run_manifest_replays_its_config(self, manager, temp_config_dir):
        run = manager.apply_overrides(manager.load_config(), {"seed": 42, "train.batch_size": 3})
        self.write_config(temp_config_dir, "manifest", {"manifest_version": 1, "command": "train", "config": run})
        assert manager.load_config("manifest") == run

    def test_cache(self, manager, temp_config_dir):
        self.write_config(temp_config_dir, "run", {"seed": 1})
        first = manager.load_config("run")
        first["seed"] = 99
        assert manager.load_config("run")["seed"] == 1

    def test_save_and_reload(self, manager, temp_config_dir):
        config = manager.load_config()
        path = os.path.join(temp_config_dir, "nested", "saved.json")
        manager.save_config(config, path)
        assert manager.load_config(path) == config

    def test_presets(self, manager):
        assert manager.get_preset("model", "ml1m_small")["d_model"] == 50
        assert manager.get_preset("synthetic", "full")["num_records"] == 1000000
        with pytest.raises(ConfigurationError):
            manager.get_preset("model", "enormous")
        with pytest.raises(ConfigurationError):
            manager.get_preset("optimizer", "adam")

    def test_merge_configs(self, manager):
        merged = manager.merge_configs({"a": {"b": 1, "c": 2}, "d": 1}, {"a": {"b": 3}, "e": 4})
        assert merged == {"a": {"b": 3, "c": 2}, "d": 1, "e": 4}

    def test_app_config(self, manager, monkeypatch):
        monkeypatch.setenv("HSTU_THREADS", "4")
        monkeypatch.setenv("HSTU_PRECISION", "float32")
        try:
            app = manager.apply_app_config()
            assert app["threads"] == 4
            assert nc.get_dtype() == np.float32
        finally:
            nc.set_precision("float64")

    def test_bad_precision(self, manager, monkeypatch):
        monkeypatch.setenv("HSTU_PRECISION", "float16")
        with pytest.raises(ConfigurationError, match="HSTU_PRECISION"):
            manager.get_app_config()

    def test_shipped_configs_load(self):
        manager = ConfigManager("config")
        for name in ("default_config", "movielens_1m", "ranking_desk"):
            assert manager.load_config(name)["version"] == "1.0"
