"""Run configuration: one YAML/JSON file with sections ``preprocess``, ``model``,
``loss``, ``train``, ``synth`` and ``eval`` plus a top-level ``threads``.

Precedence (lowest first): built-in defaults, config file, environment
variables ``SMPLGAIT_<SECTION>__<KEY>`` (value parsed as YAML, e.g.
``SMPLGAIT_TRAIN__LR=0.01``), command-line flags. Unknown keys are rejected.
The model's input size is taken from ``preprocess``.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import TEST_FRAME_CAP, PreprocessConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .synth import SynthConfig
from .trainer import TrainConfig

ENV_PREFIX = "SMPLGAIT_"


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats such as ``1e-3``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)[eE][-+]?\d+$"),
    list("-+0123456789."),
)


def parse_value(text):
    return yaml.load(text, Loader=_Loader)


@dataclass(frozen=True)
class EvalConfig:
    test_frac: float = 1.0
    max_frames: int = TEST_FRAME_CAP
    exclude_same_camera: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.test_frac <= 1:
            raise ConfigError(f"test_frac {self.test_frac} outside (0, 1]")
        if self.max_frames < 1:
            raise ConfigError("max_frames must be positive")


_SECTIONS = {
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
}
_EXCLUDED = {"model": {"input_size"}, "loss": {"num_classes"}}


def section_keys(name):
    return [f.name for f in dataclasses.fields(_SECTIONS[name]) if f.name not in _EXCLUDED.get(name, ())]


@dataclass(frozen=True)
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    threads: int = 1

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            obj = getattr(self, name)
            d = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
            out[name] = {k: _plain(d[k]) for k in section_keys(name)}
        out["threads"] = self.threads
        return out

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _plain(v):
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    return v


def build(raw: dict) -> RunConfig:
    """Construct a validated RunConfig from a nested dict of overrides."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"threads"})
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    values = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        bad = sorted(set(section) - set(section_keys(name)))
        if bad:
            raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(bad)}")
        values[name] = dict(section)
    try:
        pre = PreprocessConfig(**values["preprocess"])
        model = ModelConfig(input_size=pre.size, **values["model"])
        cfg = RunConfig(
            preprocess=pre,
            model=model,
            loss=LossConfig(**values["loss"]),
            train=TrainConfig(**values["train"]),
            synth=SynthConfig(**values["synth"]),
            eval=EvalConfig(**values["eval"]),
            threads=int(raw.get("threads", 1)),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def merge(base: dict, overrides: dict) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = {**out[key], **value}
        else:
            out[key] = value
    return out


def set_dotted(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    if len(parts) == 1:
        d[parts[0]] = value
    elif len(parts) == 2:
        d.setdefault(parts[0], {})[parts[1]] = value
    else:
        raise ConfigError(f"bad config key {dotted!r}")


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key, text in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
        set_dotted(out, dotted, parse_value(text))
    return out


def read_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        doc = parse_value(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return doc or {}


def load_run_config(path=None, overrides=None, environ=None) -> RunConfig:
    raw = read_config_file(path) if path else {}
    raw = merge(raw, env_overrides(environ))
    raw = merge(raw, overrides or {})
    return build(raw)
