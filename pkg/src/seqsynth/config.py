"""Run configuration: JSON document schema, defaults, and the resolved-config
echo written next to every run's outputs. Unknown keys are rejected at every
nesting level so typos fail loudly before any work starts.
"""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from .scenario import DEFAULT_CHANNEL_NAMES

_SCHEDULE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "tier_epochs": {"type": "integer", "minimum": 1},
        "uniform_after": {"type": "integer", "minimum": 0},
        "total_epochs": {"type": "integer", "minimum": 1},
        "mode": {"enum": ["CL", "RS"]},
    },
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "cache_dir": {"type": ["string", "null"]},
                "root": {"type": ["string", "null"]},
                "channel_names": {
                    "type": "array",
                    "items": {"type": "string"},
                    "minItems": 2,
                },
                "train_patients": {
                    "type": ["array", "null"], "items": {"type": "string"}
                },
                "val_patients": {
                    "type": ["array", "null"], "items": {"type": "string"}
                },
                "test_patients": {
                    "type": ["array", "null"], "items": {"type": "string"}
                },
            },
        },
        "preprocessing": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "size": {"type": "integer", "minimum": 8},
                "threshold": {"type": "number"},
                "workers": {"type": "integer", "minimum": 1},
            },
        },
        "generator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "depth": {"type": "integer", "minimum": 2},
                "widths": {
                    "type": ["array", "null"],
                    "items": {"type": "integer", "minimum": 1},
                },
                "final_activation": {"enum": ["relu", "linear"]},
                "dropout_p": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "discriminator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_blocks": {"type": "integer", "minimum": 1},
                "base_width": {"type": "integer", "minimum": 1},
                "input_noise_sigma": {"type": "number", "minimum": 0},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lam": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "d_loss_scale": {"type": "number", "exclusiveMinimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "adam_betas": {
                    "type": "array",
                    "items": {"type": "number"},
                    "minItems": 2,
                    "maxItems": 2,
                },
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "ic_enabled": {"type": "boolean"},
                "imputation": {"enum": ["zeros", "noise", "average"]},
                "schedule": _SCHEDULE_SCHEMA,
                "mode": {"enum": ["MIMO", "MISO"]},
                "miso_target": {"type": ["integer", "null"], "minimum": 0},
                "checkpoint_every": {"type": "integer", "minimum": 1},
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scenarios": {
                    "type": ["array", "null"], "items": {"type": "string"}
                },
                "renormalize": {"type": "boolean"},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
    },
}


def default_config() -> dict:
    """Paper-regimen MIMO defaults; every field overridable from JSON."""
    return {
        "dataset": {
            "cache_dir": None,
            "root": None,
            "channel_names": list(DEFAULT_CHANNEL_NAMES),
            "train_patients": None,
            "val_patients": None,
            "test_patients": None,
        },
        "preprocessing": {"size": 256, "threshold": 0.0, "workers": 1},
        "generator": {
            "depth": 8,
            "widths": None,
            "final_activation": "relu",
            "dropout_p": 0.5,
        },
        "discriminator": {"n_blocks": 4, "base_width": 64, "input_noise_sigma": 0.0},
        "training": {
            "lam": 0.9,
            "d_loss_scale": 0.5,
            "lr": 2e-4,
            "adam_betas": [0.5, 0.999],
            "batch_size": 4,
            "epochs": 60,
            "ic_enabled": True,
            "imputation": "zeros",
            "schedule": {
                "tier_epochs": 10,
                "uniform_after": 30,
                "total_epochs": 60,
                "mode": "CL",
            },
            "mode": "MIMO",
            "miso_target": None,
            "checkpoint_every": 5,
        },
        "evaluation": {"scenarios": None, "renormalize": True},
        "seed": 0,
        "output_dir": "runs/latest",
    }


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def validate_config(doc: dict) -> None:
    """Raises jsonschema.ValidationError on unknown keys or bad types."""
    jsonschema.validate(doc, RUN_CONFIG_SCHEMA)


def load_config(path: str | Path, overrides: dict | None = None) -> dict:
    """Read a config file, validate it, merge defaults, validate the result."""
    raw = json.loads(Path(path).read_text())
    validate_config(raw)
    merged = _deep_merge(default_config(), raw)
    if overrides:
        merged = _deep_merge(merged, overrides)
    validate_config(merged)
    return merged


def write_resolved_config(config: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(config, indent=2, sort_keys=True))
    return path
