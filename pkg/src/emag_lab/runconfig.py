"""Run configuration: one JSON document, strict keys, canonical hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields
from pathlib import Path
from typing import Any

from .combinators import GuidanceConfig, GuidanceConfigError
from .diffusion import NoiseSchedule
from .model import ModelConfig


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 2)."""


SECTIONS = ("model", "train", "schedule", "guidance", "sample", "metrics", "sweep")
MODEL_KEYS = {f.name for f in fields(ModelConfig)} | {"checkpoint", "weak_checkpoint"}
TRAIN_KEYS = {"steps", "seed", "batch_size", "lr", "log_every", "dataset_size", "dataset_seed"}
SCHEDULE_KEYS = {"kind", "steps", "beta_start", "beta_end"}
SAMPLE_KEYS = {"seed", "n", "classes", "dump_trajectory"}
METRICS_KEYS = {"reference_n", "reference_seed", "k"}
SWEEP_KEYS = {"grid"}

TRAIN_DEFAULTS = {"steps": 5000, "seed": 0, "batch_size": 64, "lr": 2e-3, "log_every": 250,
                  "dataset_size": 4096, "dataset_seed": 1}
SAMPLE_DEFAULTS = {"seed": 0, "n": 64, "classes": [0, 1], "dump_trajectory": True}
METRICS_DEFAULTS = {"reference_n": 512, "reference_seed": 12345, "k": 5}

# Toy-scale presets: conditional and unconditional EMAG defaults.
PRESETS = {
    "conditional": {"mode": "emag", "w_cfg": 3.0, "w_e": 1.75, "beta": 0.988, "lam": 1.0},
    "unconditional": {"mode": "emag", "w_e": 5.125, "beta": 0.988, "lam": 1.0},
}


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def load_config(path: str | Path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(cfg) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    for name, keys in (("model", MODEL_KEYS), ("train", TRAIN_KEYS), ("schedule", SCHEDULE_KEYS),
                       ("sample", SAMPLE_KEYS), ("metrics", METRICS_KEYS), ("sweep", SWEEP_KEYS)):
        if name in cfg:
            _check_keys(name, cfg[name], keys)
    if "guidance" in cfg:
        guidance_config(cfg)


def model_config(cfg: dict) -> ModelConfig:
    model = dict(cfg.get("model", {}))
    if "mode" not in model:
        raise ConfigError("missing required key 'mode' in section 'model'")
    model.pop("checkpoint", None)
    model.pop("weak_checkpoint", None)
    try:
        return ModelConfig(**model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def train_options(cfg: dict) -> dict:
    return {**TRAIN_DEFAULTS, **cfg.get("train", {})}


def sample_options(cfg: dict) -> dict:
    return {**SAMPLE_DEFAULTS, **cfg.get("sample", {})}


def metrics_options(cfg: dict) -> dict:
    return {**METRICS_DEFAULTS, **cfg.get("metrics", {})}


def schedule_from(cfg: dict, model: ModelConfig) -> NoiseSchedule:
    s = cfg.get("schedule", {})
    kind = s.get("kind", "vp" if model.mode == "eps" else "flow")
    steps = s.get("steps", model.T if kind == "vp" else 26)
    extra = {k: s[k] for k in ("beta_start", "beta_end") if k in s}
    try:
        return NoiseSchedule(kind, int(steps), **extra)
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from exc


def guidance_config(cfg: dict, t_max: int | None = None) -> GuidanceConfig:
    raw = dict(cfg.get("guidance", {}))
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown guidance preset {preset!r}")
        raw = {**PRESETS[preset], **raw}
    try:
        g = GuidanceConfig.from_dict(raw)
        # an explicit window must be non-empty here; empty windows are an API-level no-op only
        if g.window is not None and g.window.empty:
            raise ConfigError(f"guidance: window needs tau_e < tau_s, got tau_e={g.window.tau_e}, "
                              f"tau_s={g.window.tau_s}")
        if t_max is not None and g.is_emag:
            g.resolved_window(t_max).validate(t_max)
    except (GuidanceConfigError, ValueError, TypeError) as exc:
        raise ConfigError(f"guidance: {exc}") from exc
    return g


def set_dotted(cfg: dict, dotted: str, value: Any) -> dict:
    out = copy.deepcopy(cfg)
    node = out
    *head, last = dotted.split(".")
    for key in head:
        node = node.setdefault(key, {})
    node[last] = value
    return out


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict, seed_path: tuple[str, str] | None = None, extra: str = "") -> str:
    """sha256 of the canonical config with the seed removed, plus ``extra``."""
    c = copy.deepcopy(cfg)
    if seed_path is not None:
        c.get(seed_path[0], {}).pop(seed_path[1], None)
    c.pop("sweep", None)
    return hashlib.sha256((canonical_json(c) + extra).encode()).hexdigest()
