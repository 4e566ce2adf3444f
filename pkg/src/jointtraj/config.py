"""Experiment configuration: nested dataclasses loaded from JSON with strict key checks."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .recon import UnrolledConfig
from .train import TrainConfig
from .trajectory import HardwareLimits

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectorySpec:
    """Initial trajectory: a generator or a trajectory file."""

    kind: str = "radial"  # radial | spiral | file
    shots: int = 16
    samples: int = 1280
    inout: bool = True
    density: float = 1.0
    turns: float | None = None
    path: str | None = None
    fov: float = 0.22
    grid_n: int = 320

    def __post_init__(self):
        if self.kind not in ("radial", "spiral", "file"):
            raise ConfigError(f"trajectory.kind must be radial, spiral or file, got {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("trajectory.path is required when kind='file'")
        if self.shots < 1 or self.samples < 3:
            raise ConfigError("trajectory needs shots >= 1 and samples >= 3")


@dataclass(frozen=True)
class DataSpec:
    """Image source and acquisition simulation."""

    source: str = "phantoms"  # "phantoms" or a directory of images
    n_images: int = 60
    seed: int = 0
    fractions: tuple = (0.6, 0.2, 0.2)
    ncoils: int = 4
    coil_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ConfigError("data.fractions must be three numbers summing to 1")
        if self.ncoils < 1 or self.n_images < 1:
            raise ConfigError("data.ncoils and data.n_images must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    limits: HardwareLimits = field(default_factory=HardwareLimits)
    data: DataSpec = field(default_factory=DataSpec)
    unrolled: UnrolledConfig = field(default_factory=UnrolledConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "out"

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def from_dict(data):
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    return _build(ExperimentConfig, data, "")


def parse_override(text):
    """``a.b=value`` -> (["a", "b"], value); the value is JSON if it parses."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data, overrides):
    data = json.loads(json.dumps(data))
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for key in path[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[path[-1]] = value
    return data


def load_config(path=None, overrides=()):
    """Read a JSON config (defaults when ``path`` is None), apply ``--set`` overrides, validate."""
    data = {}
    if path is not None:
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    return from_dict(apply_overrides(data, overrides))
