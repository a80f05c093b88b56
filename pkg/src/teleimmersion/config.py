"""Dotted-key configuration shared by every CLI subcommand.

Each section is one of the modules' parameter dataclasses; every scalar
field is addressable as ``section.field`` (nested dataclasses add further
dots, e.g. ``scene.intrinsics.fx``). Files are ASCII ``key = value`` lines.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError, FormatError
from .segmentation import PotentialParams
from .server import SessionConfig
from .sim.client import PipelineParams
from .sim.experiments import AccuracyConfig, BenchConfig
from .sim.scene import SyntheticScene
from .tracking import TrackerParams

_SCALAR = (bool, int, float, str)


@dataclass(frozen=True)
class AppConfig:
    segmentation: PotentialParams = field(default_factory=PotentialParams)
    tracking: TrackerParams = field(default_factory=TrackerParams)
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    scene: SyntheticScene = field(default_factory=SyntheticScene)
    server: SessionConfig = field(default_factory=SessionConfig)
    accuracy: AccuracyConfig = field(default_factory=AccuracyConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        _flatten(self, "", out)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.flat().items())

    def with_overrides(self, overrides: Mapping[str, str], source: str = "override") -> "AppConfig":
        known = self.flat()
        for key in overrides:
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r}")
        parsed = {k: parse_value(v, known[k], f"{source}: {k}") for k, v in overrides.items()}
        try:
            return _rebuild(self, "", parsed)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{source}: {exc}") from exc

    @classmethod
    def from_text(cls, text: str, source: str = "<config>", base: "AppConfig" = None) -> "AppConfig":
        return (base or cls()).with_overrides(parse_lines(text.splitlines(), source), source)

    @classmethod
    def load(cls, path, base: "AppConfig" = None) -> "AppConfig":
        try:
            text = Path(path).read_text(encoding="ascii")
        except (OSError, UnicodeDecodeError) as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path), base)


def _is_scalar_field(value) -> bool:
    if isinstance(value, _SCALAR):
        return True
    return isinstance(value, tuple) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)


def _flatten(obj, prefix: str, out: dict) -> None:
    for f in dataclasses.fields(obj):
        if f.name.startswith("_"):
            continue
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            _flatten(value, key + ".", out)
        elif _is_scalar_field(value):
            out[key] = value
        # structured fields (seat poses, object catalog) live in their own files


def _rebuild(obj, prefix: str, values: Mapping[str, Any]):
    changes = {}
    for f in dataclasses.fields(obj):
        key = f"{prefix}{f.name}"
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            if any(k.startswith(key + ".") for k in values):
                changes[f.name] = _rebuild(value, key + ".", values)
        elif key in values:
            changes[f.name] = values[key]
    return dataclasses.replace(obj, **changes) if changes else obj


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str, default, where: str = "value"):
    t = text.strip()
    try:
        if isinstance(default, bool):
            low = t.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {t!r}")
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float):
            return float(t)
        if isinstance(default, tuple):
            parts = [p for p in t.replace(",", " ").split()]
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} numbers, got {len(parts)}")
            return tuple(
                int(p) if isinstance(d, int) and not isinstance(d, bool) else float(p)
                for p, d in zip(parts, default)
            )
        return t
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def parse_assignments(items: Iterable[str]) -> dict[str, str]:
    """``KEY=VALUE`` strings from the command line."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out
