"""JSON schema for run configurations and schema validation helpers."""

from typing import Any, Dict

from jsonschema import Draft7Validator
from jsonschema import ValidationError as JsonSchemaValidationError

from .exceptions import ValidationError

_POSITIVE_INT = {"type": "integer", "minimum": 1}
_NONNEGATIVE_INT = {"type": "integer", "minimum": 0}
_FRACTION = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_OPTIONAL_PATH = {"type": ["string", "null"]}

MODEL_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {
            "type": ["string", "null"],
            "enum": [None, "desk", "ml1m_small", "ml1m_large", "ranking_industrial", "retrieval_industrial"],
        },
        "task": {"type": "string", "enum": ["ranking", "retrieval", "next_content"]},
        "num_item_rows": _POSITIVE_INT,
        "num_action_bits": {"type": "integer", "minimum": 1, "maximum": 32},
        "num_contextual_rows": _POSITIVE_INT,
        "learned_positions": {"type": "boolean"},
        "embedding_init_std": {"type": "number", "exclusiveMinimum": 0},
        "d_model": _POSITIVE_INT,
        "num_heads": _POSITIVE_INT,
        "d_qk": _POSITIVE_INT,
        "d_v": _POSITIVE_INT,
        "num_layers": _NONNEGATIVE_INT,
        "max_seq_len": _POSITIVE_INT,
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "architecture": {"type": "string", "enum": ["hstu", "transformer"]},
        "attention": {"type": "string", "enum": ["pointwise", "softmax"]},
        "norm_mode": {"type": "string", "enum": ["max_seq_len", "valid_count", "none"]},
        "num_position_buckets": _POSITIVE_INT,
        "num_time_buckets": _POSITIVE_INT,
        "rab_positional": {"type": "boolean"},
        "rab_temporal": {"type": "boolean"},
        "d_ff": {"type": ["integer", "null"], "minimum": 1},
        "init_seed": _NONNEGATIVE_INT,
    },
}

TRAIN_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"type": "string", "enum": ["streaming", "multi_epoch"]},
        "epochs": _POSITIVE_INT,
        "shuffle": {"type": "boolean"},
        "batch_size": _POSITIVE_INT,
        "learning_rate": {"type": "number", "minimum": 0},
        "embedding_learning_rate": {"type": ["number", "null"], "minimum": 0},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "embedding_beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "embedding_beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "num_negatives": _POSITIVE_INT,
        "positive_mask": _POSITIVE_INT,
        "task_weights": {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}},
        "emission": {"type": "string", "enum": ["every_record", "generative"]},
        "emission_rate": {"type": "number", "exclusiveMinimum": 0},
        "log_interval": _POSITIVE_INT,
    },
}

RUN_CONFIG_SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "RunConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "version": {"type": "string"},
        "seed": _NONNEGATIVE_INT,
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "data": _OPTIONAL_PATH,
                "test_data": _OPTIONAL_PATH,
                "events": _OPTIONAL_PATH,
                "ratings": _OPTIONAL_PATH,
                "checkpoint": _OPTIONAL_PATH,
                "reports": {"type": "string"},
                "length_histogram": _OPTIONAL_PATH,
            },
        },
        "model": MODEL_SCHEMA,
        "train": TRAIN_SCHEMA,
        "stochastic_length": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "alpha": {"type": "number", "exclusiveMinimum": 1, "maximum": 2},
                "max_length": _POSITIVE_INT,
                "method": {"type": "string", "enum": ["greedy", "random", "feature_weighted"]},
            },
        },
        "synthetic": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"type": ["string", "null"], "enum": [None, "desk", "full"]},
                "num_items": _POSITIVE_INT,
                "num_categories": _POSITIVE_INT,
                "num_records": _POSITIVE_INT,
                "record_length": _POSITIVE_INT,
                "train_fraction": _FRACTION,
                "initial_available_fraction": _FRACTION,
                "categories_per_record_max": _POSITIVE_INT,
                "alpha_min": {"type": "number", "exclusiveMinimum": 0},
                "alpha_max": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "serving": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "microbatch_size": _POSITIVE_INT,
                "cache_mode": {"type": "string", "enum": ["off", "request", "session"]},
                "session_ttl_seconds": {"type": "number", "exclusiveMinimum": 0},
                "max_sessions": _POSITIVE_INT,
            },
        },
        "bench": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "history_tokens": _POSITIVE_INT,
                "num_candidates": _POSITIVE_INT,
                "microbatch_sizes": {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
                "repetitions": _NONNEGATIVE_INT,
                "plot": {"type": "boolean"},
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ks": {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
                "protocol": {"type": "string", "enum": ["synthetic", "leave_one_out"]},
                "min_history": _POSITIVE_INT,
                "min_positive_rating": {"type": "number"},
            },
        },
        "sl_report": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alphas": {
                    "type": "array",
                    "items": {"type": "number", "exclusiveMinimum": 1, "maximum": 2},
                    "minItems": 1,
                },
                "max_lengths": {"type": "array", "items": _POSITIVE_INT, "minItems": 1},
                "plot": {"type": "boolean"},
            },
        },
    },
}


def _field_path(error: JsonSchemaValidationError) -> str:
    return ".".join(str(part) for part in error.absolute_path) or "<root>"


def validate_config_structure(config: Dict[str, Any]) -> None:
    """Validate a full run configuration against ``RUN_CONFIG_SCHEMA``.

    Reports the first error in schema order so messages are stable.
    """
    errors = sorted(Draft7Validator(RUN_CONFIG_SCHEMA).iter_errors(config), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        first = errors[0]
        raise ValidationError(
            f"Invalid run configuration at {_field_path(first)}: {first.message}",
            error_code="CONFIG_SCHEMA",
        )
