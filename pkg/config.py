#!/usr/bin/env python3
"""
Configuration for the Poisson free-energy toolkit.

Module-level constants hold the defaults (the full-scale training setup).
``resolve_config`` layers them as

    defaults < preset < config file < command-line flags

and ``format_config`` writes a resolved configuration back out in the same
INI grammar that ``load_config_file`` reads.
"""

import configparser
import os
from copy import deepcopy
from typing import Any, Dict, List, Optional

# Directory paths
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
LOG_DIR = os.getenv("PVFE_LOG_DIR", os.path.join(BASE_DIR, "logs"))
RESULTS_DIR = os.path.join(BASE_DIR, "results")

# Processing parameters
N_THREADS = int(os.getenv("PVFE_THREADS", "0")) or None  # None = auto-detect (CPU count - 1)

# Logging
LOG_LEVEL = os.getenv("PVFE_LOG_LEVEL", "INFO")  # DEBUG, INFO, WARNING, ERROR

# Model
MODEL_FAMILIES = ("pvae", "grelu")
N_LATENTS = 512

# Training (Adamax, warmup + cosine schedule)
LEARNING_RATE = 0.005
BATCH_SIZE = 1000
EPOCHS = 3000
WARMUP_EPOCHS = 5
GRAD_CLIP = 500.0
BETA = 1.0
ADAMAX_BETA1 = 0.9
ADAMAX_BETA2 = 0.999
ADAMAX_EPS = 1e-8
CHECKPOINT_FRACTION = 0.1
RANDOM_SEED = 0

# Data and preprocessing
PATCH_SIDE = 16
WHITEN_F0 = 0.5
WHITEN_EXPONENT = 4.0
LCN_KERNEL = 13
LCN_SIGMA = 0.5
VALID_FRACTION = 0.1
SYNTH_ALPHA = 2.0
SYNTH_FIELD_SCALE = 4

# Evaluation
N_SAMPLES_PER_DATUM = 8

# Sweep grid
K_GRID = (64, 128, 192, 256, 384, 512, 1024, 2048)
BETA_GRID = (0.01, 0.1, 0.5, 1.0, 1.5, 2.0, 4.0, 8.0)
SEEDS = (0,)

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "model": {
        "family": "pvae",
        "k": N_LATENTS,
    },
    "train": {
        "lr": LEARNING_RATE,
        "batch_size": BATCH_SIZE,
        "epochs": EPOCHS,
        "warmup_epochs": WARMUP_EPOCHS,
        "grad_clip": GRAD_CLIP,
        "beta": BETA,
        "seed": RANDOM_SEED,
        "beta1": ADAMAX_BETA1,
        "beta2": ADAMAX_BETA2,
        "eps": ADAMAX_EPS,
        "checkpoint_fraction": CHECKPOINT_FRACTION,
    },
    "data": {
        "path": "",
        "valid_path": "",
        "side": PATCH_SIDE,
        "f0": WHITEN_F0,
        "n_exp": WHITEN_EXPONENT,
        "lcn_kernel": LCN_KERNEL,
        "lcn_sigma": LCN_SIGMA,
        "valid_fraction": VALID_FRACTION,
        "n_patches": 10000,
        "alpha": SYNTH_ALPHA,
        "field_scale": SYNTH_FIELD_SCALE,
        "raw": False,
    },
    "eval": {
        "n_samples_per_datum": N_SAMPLES_PER_DATUM,
        "checkpoint": "",
    },
    "check": {
        "quick": False,
    },
    "sweep": {
        "families": list(MODEL_FAMILIES),
        "k_grid": list(K_GRID),
        "beta_grid": list(BETA_GRID),
        "seeds": list(SEEDS),
        "workers": N_THREADS or 0,
    },
    "output": {
        "out": RESULTS_DIR,
        "results": "",
        "render": False,
        "verbose": False,
    },
}

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "full": {},
    "desk": {
        "train": {"epochs": 300, "batch_size": 128},
        "sweep": {
            "k_grid": [64, 128],
            "beta_grid": [0.01, 0.5, 1.0, 2.0, 8.0],
            "seeds": [0, 1],
        },
    },
}

# Command-line flag -> (section, key)
FLAG_KEYS = {
    "model": ("model", "family"),
    "k": ("model", "k"),
    "beta": ("train", "beta"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "lr"),
    "batch": ("train", "batch_size"),
    "seed": ("train", "seed"),
    "data": ("data", "path"),
    "out": ("output", "out"),
    "verbose": ("output", "verbose"),
    "side": ("data", "side"),
    "n_patches": ("data", "n_patches"),
    "alpha": ("data", "alpha"),
    "field_scale": ("data", "field_scale"),
    "valid_fraction": ("data", "valid_fraction"),
    "raw": ("data", "raw"),
    "checkpoint": ("eval", "checkpoint"),
    "n_samples": ("eval", "n_samples_per_datum"),
    "workers": ("sweep", "workers"),
    "results": ("output", "results"),
    "render": ("output", "render"),
    "quick": ("check", "quick"),
}


def _parse_value(raw: str, default: Any) -> Any:
    """Convert an INI string to the type of the matching default."""
    raw = raw.strip()
    if isinstance(default, bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, list):
        items = [item.strip() for item in raw.split(",") if item.strip()]
        element = default[0] if default else ""
        return [_parse_value(item, element) for item in items]
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def load_config_file(path: str) -> Dict[str, Dict[str, Any]]:
    """
    Read an INI config file into typed overrides.

    Unknown sections or keys raise ``ValueError`` naming them, so typos never
    silently fall back to defaults.
    """
    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)

    overrides: Dict[str, Dict[str, Any]] = {}
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ValueError(f"unknown config section [{section}] in {path}")
        for key, raw in parser.items(section):
            if key not in DEFAULTS[section]:
                raise ValueError(f"unknown config key '{key}' in section [{section}]")
            try:
                value = _parse_value(raw, DEFAULTS[section][key])
            except ValueError as exc:
                raise ValueError(f"[{section}] {key}: {exc}") from exc
            overrides.setdefault(section, {})[key] = value
    return overrides


def _merge(target: Dict[str, Dict[str, Any]], overrides: Dict[str, Dict[str, Any]]) -> None:
    for section, values in overrides.items():
        target.setdefault(section, {}).update(deepcopy(values))


def resolve_config(
    preset: Optional[str] = None,
    config_path: Optional[str] = None,
    flags: Optional[Dict[str, Any]] = None
) -> Dict[str, Dict[str, Any]]:
    """
    Resolve the full configuration.

    Parameters
    ----------
    preset : str, optional
        Name of a preset in PRESETS
    config_path : str, optional
        INI file with section overrides
    flags : dict, optional
        Flag name -> value (None values are ignored); names follow FLAG_KEYS

    Returns
    -------
    dict
        section -> key -> typed value
    """
    resolved = deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset '{preset}' (choose from {sorted(PRESETS)})")
        _merge(resolved, PRESETS[preset])
    if config_path:
        _merge(resolved, load_config_file(config_path))
    for name, value in (flags or {}).items():
        if value is None:
            continue
        if name not in FLAG_KEYS:
            raise ValueError(f"unknown flag '--{name}'")
        section, key = FLAG_KEYS[name]
        resolved[section][key] = value

    family = resolved["model"]["family"]
    if family not in MODEL_FAMILIES:
        raise ValueError(f"--model: unknown family '{family}' (choose from {list(MODEL_FAMILIES)})")
    for fam in resolved["sweep"]["families"]:
        if fam not in MODEL_FAMILIES:
            raise ValueError(f"[sweep] families: unknown family '{fam}'")
    return resolved


def format_config(resolved: Dict[str, Dict[str, Any]]) -> str:
    """Render a resolved configuration in the INI grammar."""
    lines: List[str] = []
    for section, values in resolved.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)
