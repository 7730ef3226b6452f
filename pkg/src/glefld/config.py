"""Run configuration: an INI-style ``key = value`` file with section headers,
overridden by command-line flags, resolved once and persisted."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .network import ConfigError, NetworkConfig
from .train import OptimizerConfig

RESOLVED_FILE = "resolved.cfg"


def parse_number(text: str) -> float:
    """Float or fraction (``1/8``)."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number: {text!r}") from exc


@dataclass
class DataConfig:
    path: str = ""
    sigma: Optional[float] = None  # None: input_size / 32
    crop: bool = True


@dataclass
class RunSettings:
    out: str = ""
    steps: Optional[int] = None  # None: epochs * steps per epoch
    checkpoint_every: int = 100
    resume: str = ""


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self) -> None:
        self.network.validate()
        self.optimizer.validate()
        if self.data.sigma is not None and not self.data.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.data.sigma}")
        if self.run.steps is not None and self.run.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.run.steps}")
        if self.run.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be at least 1, got {self.run.checkpoint_every}")

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for section, obj in self._sections():
            cp[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def _sections(self):
        return (("network", self.network), ("optimizer", self.optimizer), ("data", self.data), ("run", self.run))


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(current, text: str, name: str, annotation: str):
    text = text.strip()
    if "Optional" in annotation and text == "":
        return None
    if "bool" in annotation:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if "int" in annotation:
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{name}: expected an integer, got {text!r}") from exc
    if "float" in annotation:
        return parse_number(text)
    if "tuple" in annotation:
        return tuple(parse_number(v) for v in text.split(","))
    return text


def _apply(obj, values: dict, section: str):
    kwargs = {}
    known = {f.name: f for f in fields(obj)}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        f = known[key]
        ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        kwargs[key] = _coerce(getattr(obj, key), text, f"[{section}] {key}", ann)
    return type(obj)(**{**{f.name: getattr(obj, f.name) for f in fields(obj)}, **kwargs})


def load_run_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides``
    (``{"section.key": value}`` with already-typed values)."""
    cfg = RunConfig()
    if path:
        cp = configparser.ConfigParser()
        try:
            text = Path(path).read_text(encoding="utf-8")
            cp.read_string(text, source=str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from exc
        sections = dict(cfg._sections())
        for section in cp.sections():
            if section not in sections:
                raise ConfigError(f"{path}: unknown section [{section}]")
        cfg = RunConfig(*(_apply(obj, dict(cp[name]) if cp.has_section(name) else {}, name)
                          for name, obj in cfg._sections()))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, name = key.split(".", 1)
        obj = dict(cfg._sections())[section]
        setattr_frozen = {f.name: getattr(obj, f.name) for f in fields(obj)}
        setattr_frozen[name] = value
        new = type(obj)(**setattr_frozen)
        cfg = RunConfig(**{s: (new if s == section else o) for s, o in cfg._sections()})
    cfg.validate()
    return cfg


def write_resolved(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / RESOLVED_FILE
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path
