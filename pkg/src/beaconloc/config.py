"""Run configuration: one YAML file, every key defaulted, unknown keys rejected.

Sections mirror the library's config objects::

    seed: 0
    env: world10
    noise:   {...}   # MotionNoiseConfig
    data:    {...}   # dataset sizes and location
    model:   {...}   # ModelSpec
    train:   {...}   # TrainConfig
    filter:  {...}   # PF / MKF settings
    paths:   {...}   # checkpoint, history, report

``--set section.key=value`` overrides win over the file.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .cells import ModelSpec
from .errors import ConfigError, LocalizationError
from .simulator import MotionNoiseConfig
from .training import TrainConfig

DATA_DIR_ENV = "BEACONLOC_DATA_DIR"


def default_data_dir():
    return os.environ.get(DATA_DIR_ENV, "data")


@dataclass(frozen=True)
class DataConfig:
    dir: str = ""
    train: int = 200
    val: int = 50
    test: int = 100
    n_steps: int = 100


@dataclass(frozen=True)
class FilterConfig:
    kind: str = "pf"
    particles: int = 200
    exact_init: bool = False
    jitter_sigma: float = 0.02


@dataclass(frozen=True)
class PathsConfig:
    checkpoint: str = "model.ckpt"
    history: str = "history.csv"
    report: str = "report.json"
    predictions: str = ""


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    model: str = "checkpoint"
    n_traj: int = 0


SECTIONS = {
    "noise": MotionNoiseConfig,
    "data": DataConfig,
    "model": ModelSpec,
    "train": TrainConfig,
    "filter": FilterConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}
TOP_LEVEL = {"seed": 0, "threads": 1, "env": "world10"}
TUPLE_KEYS = {("model", "env_channels"), ("model", "grid_shape")}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    env: str = "world10"
    noise: MotionNoiseConfig = field(default_factory=MotionNoiseConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def data_dir(self):
        return self.data.dir or default_data_dir()

    def to_dict(self):
        d = {k: getattr(self, k) for k in TOP_LEVEL}
        for name in SECTIONS:
            obj = getattr(self, name)
            d[name] = obj.to_dict() if isinstance(obj, ModelSpec) else asdict(obj)
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def key_reference():
    """Every config key with its default, one per line (used by ``--help``)."""
    lines = [f"  {k} = {v!r}" for k, v in TOP_LEVEL.items()]
    for name, cls in SECTIONS.items():
        obj = cls()
        for f in fields(cls):
            lines.append(f"  {name}.{f.name} = {getattr(obj, f.name)!r}")
    return "\n".join(lines)


# --------------------------------------------------------------------------- parsing


def _key_lines(text):
    """Map key paths like ``("model", "kind")`` to 1-based source lines."""
    out = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = prefix + (k.value,)
                out[path] = k.start_mark.line + 1
                walk(v, path)

    if root is not None:
        walk(root, ())
    return out


def _error(msg, key, lines):
    line = lines.get(key)
    dotted = ".".join(key)
    where = f" (line {line})" if line else ""
    return ConfigError(f"{msg}: {dotted}{where}", key=dotted, line=line)


def parse_config(text, overrides=(), source="<config>"):
    """Build a :class:`RunConfig` from YAML text and ``section.key=value`` overrides."""
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = None if mark is None else mark.line + 1
        raise ConfigError(f"{source}: invalid YAML" + (f" at line {line}" if line else ""), line=line) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping", line=1)
    lines = _key_lines(text)
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for item in overrides:
        apply_override(raw, item)

    top, sections = {}, {}
    for k, v in raw.items():
        if k in TOP_LEVEL:
            top[k] = v
        elif k in SECTIONS:
            if v is None:
                v = {}
            if not isinstance(v, dict):
                raise _error("section must be a mapping", (k,), lines)
            sections[k] = v
        else:
            raise _error("unknown config key", (k,), lines)

    built = {}
    for name, cls in SECTIONS.items():
        values = dict(sections.get(name, {}))
        known = {f.name for f in fields(cls)}
        for k in values:
            if k not in known:
                raise _error("unknown config key", (name, k), lines)
            if (name, k) in TUPLE_KEYS and values[k] is not None:
                values[k] = tuple(values[k])
        try:
            built[name] = cls(**values)
        except LocalizationError as exc:
            key = getattr(exc, "key", None)
            path = (name, key) if key else (name,)
            raise _error(str(exc), path, lines) from exc
        except (TypeError, ValueError) as exc:
            raise _error(f"bad value ({exc})", (name,), lines) from exc
    for k in ("seed", "threads"):
        if k in top and not isinstance(top[k], int):
            raise _error("expected an integer", (k,), lines)
    return RunConfig(**top, **built)


def apply_override(raw, item):
    """Apply one ``key=value`` or ``section.key=value`` override to a raw dict."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value", key=item)
    key, _, value = item.partition("=")
    value = yaml.safe_load(value) if value.strip() else ""
    parts = key.strip().split(".")
    if len(parts) == 1:
        raw[parts[0]] = value
    elif len(parts) == 2:
        sec = raw.setdefault(parts[0], {})
        if not isinstance(sec, dict):
            raise ConfigError(f"cannot override {key}: {parts[0]} is not a section", key=key)
        sec[parts[1]] = value
    else:
        raise ConfigError(f"override key {key!r} is nested too deeply", key=key)


def load_config(path=None, overrides=()):
    if path is None:
        return parse_config("", overrides)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides, source=str(path))


def with_seed(cfg, seed):
    return cfg if seed is None else replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
