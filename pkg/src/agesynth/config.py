"""Run configuration files, presets and seed derivation.

Config files are YAML mappings with optional sections ``train`` (including
``network`` and ``loss_weights``), ``phantom``, ``predictor`` and ``data``
(``slices``: axial positions to load). CLI flags
override file values; every command writes the fully resolved result next to
its outputs as ``resolved_config.yaml``.

Seed splitting: a single ``--seed S`` yields one independent seed per
component, ``derive_seed(S, name) = SeedSequence([S, COMPONENTS[name]])``'s
first 32-bit word.
"""
from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import yaml

COMPONENTS = {"network": 0, "train": 1, "phantom": 2, "predictor": 3, "evaluation": 4}

# Desk-scale settings used by the phantom smoke runs: narrow networks, a short
# warm-up and a larger step size so a 2000-update budget fits a CPU.
SMOKE_PRESET = {
    "train": {
        "batch_size": 16,
        "warmup_epochs": 1,
        "learning_rate": 1e-3,
        "network": {"widths": [4, 8, 16, 32]},
    },
    "predictor": {"epochs": 30},
}

PRESETS = {"paper": {}, "smoke": SMOKE_PRESET}


class ConfigFileError(ValueError):
    pass


def derive_seed(seed: int, component: str) -> int:
    return int(np.random.SeedSequence([int(seed), COMPONENTS[component]]).generate_state(1)[0])


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigFileError(f"{path}: top level must be a mapping")
    unknown = set(data) - {"seed", "preset", "train", "phantom", "predictor", "data"}
    if unknown:
        raise ConfigFileError(f"{path}: unknown sections {sorted(unknown)}")
    return data


def resolve(file_cfg: dict | None, preset: str | None = None, overrides: dict | None = None) -> dict:
    file_cfg = file_cfg or {}
    name = preset or file_cfg.get("preset") or "paper"
    if name not in PRESETS:
        raise ConfigFileError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = deep_merge(PRESETS[name], {k: v for k, v in file_cfg.items() if k != "preset"})
    cfg = deep_merge(cfg, overrides or {})
    cfg["preset"] = name
    return cfg


def write_resolved(cfg: dict, out_dir) -> Path:
    path = Path(out_dir) / "resolved_config.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(_plain(cfg), sort_keys=True))
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj
