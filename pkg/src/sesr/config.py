"""Run configuration: a JSON document validated against a schema before any
stage runs.

Resolution order, highest first: command-line flags, ``SESR_*`` environment
variables, the config file, the built-in preset.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import replace
from pathlib import Path

import jsonschema

from .dsp import StftConfig
from .mixing import CATEGORIES, DEFAULT_SNRS
from .training import ALL_STAGES, ModelConfig, StageConfig


class ConfigError(ValueError):
    pass


ENV_VARS = {
    "SESR_CONFIG": "config file path",
    "SESR_SEED": "global seed (int)",
    "SESR_WORKDIR": "working directory",
    "SESR_NOISE_TYPE": "noise,music,babble or all",
    "SESR_SNR": "comma-separated SNR list in dB",
    "SESR_PRESET": "full or desk",
}

_STAGE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr_init": {"type": "number", "exclusiveMinimum": 0},
        "lr_decay_per_epoch": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "steps_per_epoch": {"type": ["integer", "null"], "minimum": 1},
        "crop_frames": {"type": "integer", "minimum": 16},
        "ce_reduction": {"enum": ["mean", "sum"]},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["preset", "seed", "workdir", "stft", "stages", "noise_types", "snrs", "metrics"],
    "properties": {
        "preset": {"enum": ["full", "desk"]},
        "seed": {"type": "integer", "minimum": 0},
        "workdir": {"type": "string", "minLength": 1},
        "clean_root": {"type": ["string", "null"]},
        "noise_root": {"type": ["string", "null"]},
        "stft": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "window_ms": {"type": "number", "exclusiveMinimum": 0},
                "hop_ms": {"type": "number", "exclusiveMinimum": 0},
                "fft_size": {"type": "integer", "minimum": 16},
            },
        },
        "stages": {
            "type": "object",
            "additionalProperties": False,
            "properties": {s: _STAGE_SCHEMA for s in ALL_STAGES},
        },
        "noise_types": {
            "type": "array",
            "minItems": 1,
            "uniqueItems": True,
            "items": {"enum": list(CATEGORIES)},
        },
        "snrs": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "test_per_speaker": {"type": "integer", "minimum": 0},
        "metrics": {
            "type": "array",
            "uniqueItems": True,
            "items": {"enum": ["top1", "top5", "eer", "dcf", "stoi", "pesq"]},
        },
    },
}

_DESK_STAGE = {"batch_size": 16, "steps_per_epoch": 20, "crop_frames": 64}

PRESETS = {
    "full": {
        "preset": "full",
        "seed": 0,
        "workdir": "sesr-work",
        "clean_root": None,
        "noise_root": None,
        "stft": {"window_ms": 25.0, "hop_ms": 10.0, "fft_size": 512},
        "stages": {s: {"epochs": 10, "batch_size": 32, "crop_frames": 300} for s in ALL_STAGES},
        "noise_types": list(CATEGORIES),
        "snrs": list(DEFAULT_SNRS),
        "test_per_speaker": 2,
        "metrics": ["top1", "top5", "eer", "dcf", "stoi", "pesq"],
    },
    "desk": {
        "preset": "desk",
        "seed": 0,
        "workdir": "sesr-work",
        "clean_root": None,
        "noise_root": None,
        "stft": {"window_ms": 25.0, "hop_ms": 10.0, "fft_size": 512},
        "stages": {
            "step1_independent": {"epochs": 10, **_DESK_STAGE},
            "step1_joint": {"epochs": 5, **_DESK_STAGE},
            "step2": {"epochs": 6, **_DESK_STAGE},
            "sid": {"epochs": 15, **_DESK_STAGE},
        },
        "noise_types": list(CATEGORIES),
        "snrs": list(DEFAULT_SNRS),
        "test_per_speaker": 2,
        "metrics": ["top1", "top5", "eer", "dcf", "stoi", "pesq"],
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_snrs(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad SNR list {text!r}") from None


def parse_noise_type(text: str) -> list[str]:
    if text == "all":
        return list(CATEGORIES)
    types = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in types if t not in CATEGORIES]
    if bad or not types:
        raise ConfigError(f"unknown noise type(s) {bad or text!r}; choose from {', '.join(CATEGORIES)} or all")
    return types


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from None
    try:
        StftConfig(**doc["stft"])
    except ValueError as e:
        raise ConfigError(f"config invalid at stft: {e}") from None


def resolve(path=None, preset: str | None = None, overrides: dict | None = None, env=None) -> "RunConfig":
    """Build and validate the effective configuration.

    ``overrides`` holds flag values (``seed``, ``workdir``, ``noise_types``,
    ``snrs``, ...); None entries are ignored.
    """
    env = os.environ if env is None else env
    path = path or env.get("SESR_CONFIG")
    file_doc = {}
    if path:
        try:
            file_doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(file_doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    name = preset or env.get("SESR_PRESET") or file_doc.get("preset") or "desk"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    doc = _merge(PRESETS[name], file_doc)
    doc["preset"] = name

    env_doc = {}
    if "SESR_SEED" in env:
        try:
            env_doc["seed"] = int(env["SESR_SEED"])
        except ValueError:
            raise ConfigError(f"SESR_SEED must be an integer, got {env['SESR_SEED']!r}") from None
    if "SESR_WORKDIR" in env:
        env_doc["workdir"] = env["SESR_WORKDIR"]
    if "SESR_NOISE_TYPE" in env:
        env_doc["noise_types"] = parse_noise_type(env["SESR_NOISE_TYPE"])
    if "SESR_SNR" in env:
        env_doc["snrs"] = parse_snrs(env["SESR_SNR"])
    doc = _merge(doc, env_doc)
    doc = _merge(doc, {k: v for k, v in (overrides or {}).items() if v is not None})
    validate(doc)
    return RunConfig(doc)


class RunConfig:
    """Validated configuration document with typed accessors."""

    def __init__(self, doc: dict):
        validate(doc)
        self.doc = doc

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def workdir(self) -> Path:
        return Path(self.doc["workdir"])

    @property
    def stft(self) -> StftConfig:
        return StftConfig(**self.doc["stft"])

    @property
    def noise_types(self) -> list[str]:
        return list(self.doc["noise_types"])

    @property
    def snrs(self) -> list[float]:
        return [float(s) for s in self.doc["snrs"]]

    @property
    def metrics(self) -> list[str]:
        return list(self.doc["metrics"])

    def stage(self, name: str) -> StageConfig:
        params = self.doc["stages"].get(name, {})
        return StageConfig(stage=name, seed=self.seed, **params)

    def model(self, n_speakers: int) -> ModelConfig:
        base = getattr(ModelConfig, self.doc["preset"])(n_speakers)
        return replace(base, enhancer=replace(base.enhancer, n_bins=self.stft.n_bins))

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True)
