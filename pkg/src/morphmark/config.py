"""Pipeline configuration with a flat ``data.*`` / ``stage1.*`` / ``stage2.*``
JSON namespace (nested objects are accepted too)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .c2t import C2TConfig
from .regnet import RegnetConfig
from .stage1 import Stage1Config
from .synthbench import SyntheticSpec


@dataclass
class PipelineConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: C2TConfig = field(default_factory=C2TConfig)
    seed: int = 0

    @classmethod
    def desk(cls, **kw) -> "PipelineConfig":
        """Schedules sized for a single CPU core (see ``Stage1Config.desk`` and ``C2TConfig.desk``)."""
        return cls(stage1=Stage1Config.desk(), stage2=C2TConfig.desk(), **kw)

    def to_flat(self) -> dict:
        out = {"seed": self.seed}
        for name in ("data", "stage1", "stage2"):
            _flatten(getattr(self, name), name, out)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=1, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    def update(self, values: dict) -> "PipelineConfig":
        """Apply dotted (``stage1.regnet.d_model``) or nested overrides in place."""
        for key, value in _iter_flat(values):
            if key == "seed":
                self.seed = int(value)
                continue
            parts = key.split(".")
            obj = self
            for p in parts[:-1]:
                if not hasattr(obj, p):
                    raise KeyError(f"unknown config key {key!r}")
                obj = getattr(obj, p)
            leaf = parts[-1]
            if not is_dataclass(obj) or leaf not in {f.name for f in fields(obj)}:
                raise KeyError(f"unknown config key {key!r}")
            current = getattr(obj, leaf)
            setattr(obj, leaf, _coerce(value, current))
        return self

    @classmethod
    def load(cls, path, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        """Read a JSON config; keys it omits keep the values of ``base`` (default: ``cls()``)."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return (base or cls()).update(json.loads(path.read_text()))

    def validate(self) -> "PipelineConfig":
        self.data.validate()
        self.stage1.validate()
        self.stage2.validate()
        return self


def _flatten(obj, prefix, out):
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}.{f.name}"
        if is_dataclass(v):
            _flatten(v, key, out)
        else:
            out[key] = list(v) if isinstance(v, tuple) else v


def _iter_flat(values: dict, prefix=""):
    for k, v in values.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _iter_flat(v, key + ".")
        else:
            yield key, v


def _coerce(value, current):
    if isinstance(current, tuple):
        return tuple(value)
    if isinstance(current, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(current, int) and not isinstance(current, bool) and float(value).is_integer():
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


__all__ = ["PipelineConfig", "RegnetConfig"]
