"""Configuration management: defaults, presets, JSON files, environment and CLI overrides."""

import copy
import json
import os
from typing import Any, Dict, Optional
import logging
from dotenv import load_dotenv

from .numeric_core import set_precision
from .recommender_model import MODEL_PRESETS, ModelConfig
from .synthetic_data import DPConfig
from .utils.exceptions import ConfigurationError, ValidationError
from .utils.validation import validate_config_structure

logger = logging.getLogger(__name__)

SYNTHETIC_PRESETS = ("desk", "full")


class ConfigManager:
    """Builds run configurations with precedence defaults < file < environment < flags."""

    def __init__(self, config_dir: str = "config") -> None:
        """Initialize configuration manager."""
        self.config_dir = config_dir
        self._config_cache: Dict[str, Dict[str, Any]] = {}
        self._load_environment()

    def _load_environment(self) -> None:
        """Load environment variables from .env files."""
        try:
            env_file = os.path.join(os.getcwd(), ".env")
            if os.path.exists(env_file):
                load_dotenv(env_file)
                logger.debug("Loaded environment from .env file")

            env = os.getenv("ENVIRONMENT", "development")
            env_specific_file = os.path.join(self.config_dir, f"{env}.env")
            if os.path.exists(env_specific_file):
                load_dotenv(env_specific_file)
                logger.debug(f"Loaded environment from {env_specific_file}")

        except OSError as e:
            logger.warning(f"Failed to load environment configuration: {e}")

    def get_default_config(self) -> Dict[str, Any]:
        """Full RunConfig with desk-scale defaults."""
        return {
            "version": "1.0",
            "seed": 0,
            "paths": {
                "data": "runs/synthetic.jsonl",
                "test_data": None,
                "events": None,
                "ratings": None,
                "checkpoint": "runs/model.ckpt",
                "reports": "runs/reports",
                "length_histogram": None,
            },
            "model": {"preset": "desk"},
            "train": {
                "mode": "streaming",
                "epochs": 1,
                "shuffle": False,
                "batch_size": 16,
                "learning_rate": 1e-3,
                "embedding_learning_rate": None,
                "beta1": 0.9,
                "beta2": 0.98,
                "embedding_beta1": 0.9,
                "embedding_beta2": 0.999,
                "eps": 1e-8,
                "weight_decay": 0.0,
                "num_negatives": 128,
                "positive_mask": 1,
                "task_weights": None,
                "emission": "every_record",
                "emission_rate": 1.0,
                "log_interval": 100,
            },
            "stochastic_length": {
                "enabled": False,
                "alpha": 1.7,
                "max_length": 1024,
                "method": "feature_weighted",
            },
            "synthetic": {"preset": "desk"},
            "serving": {
                "microbatch_size": 16,
                "cache_mode": "request",
                "session_ttl_seconds": 1800.0,
                "max_sessions": 1024,
            },
            "bench": {
                "history_tokens": 96,
                "num_candidates": 32,
                "microbatch_sizes": [1, 4, 16, 64],
                "repetitions": 3,
                "plot": False,
            },
            "evaluation": {
                "ks": [10, 50, 200],
                "protocol": "synthetic",
                "min_history": 2,
                "min_positive_rating": 1.0,
            },
            "sl_report": {
                "alphas": [1.6, 1.7, 1.8, 1.9],
                "max_lengths": [1024, 2048, 4096, 8192],
                "plot": False,
            },
        }

    def get_preset(self, kind: str, name: str) -> Dict[str, Any]:
        """Section values of a named ``model`` or ``synthetic`` preset."""
        if kind == "model":
            if name not in MODEL_PRESETS:
                raise ConfigurationError(f"Unknown model preset '{name}'. Valid: {sorted(MODEL_PRESETS)}")
            return {"preset": name, **MODEL_PRESETS[name]}
        if kind == "synthetic":
            if name not in SYNTHETIC_PRESETS:
                raise ConfigurationError(f"Unknown synthetic preset '{name}'. Valid: {list(SYNTHETIC_PRESETS)}")
            values = DPConfig.full().to_dict() if name == "full" else DPConfig.desk().to_dict()
            values.pop("seed", None)
            return {"preset": name, **values}
        raise ConfigurationError(f"Unknown preset kind '{kind}'")

    def _resolve_path(self, path_or_name: str) -> str:
        if os.path.exists(path_or_name):
            return path_or_name
        candidate = os.path.join(self.config_dir, f"{path_or_name}.json")
        if os.path.exists(candidate):
            return candidate
        raise ConfigurationError(f"Configuration file not found: {path_or_name}")

    def load_config(self, path_or_name: Optional[str] = None) -> Dict[str, Any]:
        """Defaults merged with a JSON file, validated, with environment overrides.

        ``None`` yields the defaults alone. Results are cached by name.
        """
        cache_key = path_or_name or "<defaults>"
        if cache_key in self._config_cache:
            return copy.deepcopy(self._config_cache[cache_key])

        config = self.get_default_config()
        if path_or_name is not None:
            config_file = self._resolve_path(path_or_name)
            try:
                with open(config_file, "r", encoding="utf-8") as file:
                    overrides = json.load(file)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"Failed to load configuration '{path_or_name}': {e}")
            except OSError as e:
                raise ConfigurationError(f"Failed to read configuration '{path_or_name}': {e}")
            if not isinstance(overrides, dict):
                raise ConfigurationError(f"Configuration '{path_or_name}' must be a JSON object")
            if "manifest_version" in overrides:
                # a run manifest carries the full config it ran with
                overrides = overrides.get("config") or {}
            config = self.merge_configs(config, overrides)

        try:
            validate_config_structure(config)
        except ValidationError as e:
            raise ConfigurationError(e.message, error_code=e.error_code)
        config = self._apply_environment_overrides(config)
        self.validate_runtime_config(config)

        self._config_cache[cache_key] = config
        logger.info(f"Loaded configuration: {cache_key}")
        return copy.deepcopy(config)

    def save_config(self, config: Dict[str, Any], path: str) -> None:
        """Write a validated configuration as UTF-8 JSON."""
        try:
            validate_config_structure(config)
        except ValidationError as e:
            raise ConfigurationError(e.message, error_code=e.error_code)
        try:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "w", encoding="utf-8") as file:
                json.dump(config, file, indent=2, ensure_ascii=False, sort_keys=True)
        except OSError as e:
            raise ConfigurationError(f"Failed to save configuration '{path}': {e}")
        logger.info(f"Saved configuration: {path}")

    def _apply_environment_overrides(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """``HSTU_SEED`` and ``HSTU_LOG_INTERVAL`` override the file values."""
        config["seed"] = self._get_env_int("HSTU_SEED", config["seed"])
        train = config["train"]
        train["log_interval"] = max(1, self._get_env_int("HSTU_LOG_INTERVAL", train["log_interval"]))
        return config

    def apply_overrides(self, config: Dict[str, Any], flags: Dict[str, Any]) -> Dict[str, Any]:
        """Apply CLI flags given as dotted keys (``train.epochs``); ``None`` values are skipped."""
        updated = copy.deepcopy(config)
        for dotted, value in flags.items():
            if value is None:
                continue
            section = updated
            parts = dotted.split(".")
            for part in parts[:-1]:
                section = section.setdefault(part, {})
                if not isinstance(section, dict):
                    raise ConfigurationError(f"Cannot override '{dotted}': '{part}' is not a section")
            section[parts[-1]] = value
        try:
            validate_config_structure(updated)
        except ValidationError as e:
            raise ConfigurationError(e.message, error_code=e.error_code)
        self.validate_runtime_config(updated)
        return updated

    def _get_env_bool(self, key: str, default: bool) -> bool:
        """Get boolean value from environment variable."""
        value = os.getenv(key, str(default)).lower()
        return value in ("true", "1", "yes", "on")

    def _get_env_int(self, key: str, default: int) -> int:
        """Get integer value from environment variable."""
        try:
            return int(os.getenv(key, str(default)))
        except (ValueError, TypeError):
            logger.warning(f"Ignoring non-integer {key}={os.getenv(key)!r}")
            return default

    def _get_env_str(self, key: str, default: str) -> str:
        """Get string value from environment variable."""
        return os.getenv(key, default)

    def get_app_config(self) -> Dict[str, Any]:
        """Process-wide settings that do not belong to a run."""
        precision = self._get_env_str("HSTU_PRECISION", "float64")
        if precision not in ("float32", "float64"):
            raise ConfigurationError(f"HSTU_PRECISION must be float32 or float64, got '{precision}'")
        return {
            "log_level": self._get_env_str("LOG_LEVEL", "INFO"),
            "verbose_logging": self._get_env_bool("VERBOSE_LOGGING", True),
            "threads": max(1, self._get_env_int("HSTU_THREADS", 1)),
            "precision": precision,
            "environment": self._get_env_str("ENVIRONMENT", "development"),
        }

    def apply_app_config(self) -> Dict[str, Any]:
        """Apply the process precision; returns the app config."""
        app = self.get_app_config()
        set_precision(app["precision"])
        return app

    def merge_configs(self, base_config: Dict[str, Any], override_config: Dict[str, Any]) -> Dict[str, Any]:
        """Merge two configurations with override taking precedence."""
        merged = copy.deepcopy(base_config)
        for key, value in override_config.items():
            if key in merged and isinstance(merged[key], dict) and isinstance(value, dict):
                merged[key] = self.merge_configs(merged[key], value)
            else:
                merged[key] = copy.deepcopy(value)
        return merged

    def validate_runtime_config(self, config: Dict[str, Any]) -> None:
        """Cross-field checks the schema cannot express."""
        train = config.get("train", {})
        if train.get("mode", "streaming") == "streaming":
            if train.get("epochs", 1) != 1 or train.get("shuffle", False):
                raise ConfigurationError(
                    "train: streaming mode requires epochs=1 and shuffle=false "
                    f"(got epochs={train.get('epochs')}, shuffle={train.get('shuffle')})"
                )

        try:
            model = ModelConfig.from_dict(config.get("model", {}))
        except ConfigurationError as e:
            raise ConfigurationError(f"model: {e.message}", error_code=e.error_code)
        task_weights = train.get("task_weights")
        if task_weights is not None and len(task_weights) != model.num_action_bits:
            raise ConfigurationError(
                f"train.task_weights has {len(task_weights)} entries for {model.num_action_bits} action bits"
            )

        DPConfig.from_dict(config.get("synthetic", {}))
