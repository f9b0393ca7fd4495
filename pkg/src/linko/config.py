"""Run configuration: INI-style sections, overridable from the command line.

Precedence, lowest to highest: dataclass defaults, the config file, then
``--set section.key=value`` options and dedicated CLI flags.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .cohort import SynthConfig
from .embeddings import EndpointConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .predictor import TrainConfig


@dataclass
class RunSettings:
    seed: int = 0  # root seed for cohort generation
    seeds: list = field(default_factory=lambda: [1, 2, 3])  # training seeds
    split_seed: int = 0
    fold_count: int = 5
    fractions: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])


@dataclass
class EmbedSettings:
    provider: str = "mock"  # or "remote"
    mock_seed: int = 0
    base_url: str = EndpointConfig.base_url
    model: str = EndpointConfig.model
    timeout: float = EndpointConfig.timeout
    max_attempts: int = EndpointConfig.max_attempts
    backoff: float = EndpointConfig.backoff
    parallel: int = EndpointConfig.parallel
    projection_seed: int | None = None


SECTIONS = {
    "run": RunSettings,
    "synth": SynthConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "embed": EmbedSettings,
}


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    embed: EmbedSettings = field(default_factory=EmbedSettings)

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            for f in dataclasses.fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()

    def validate(self):
        self.encoder.validate()
        self.synth.validate()
        if self.embed.provider not in ("mock", "remote"):
            raise ConfigError(f"embed.provider must be mock or remote, got {self.embed.provider!r}")
        if not self.run.seeds:
            raise ConfigError("run.seeds is empty")
        for f in self.run.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigError(f"training fraction {f} outside (0, 1]")
        return self


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dict):
        return ",".join(f"{k}:{v}" for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, like, key: str):
    """Coerce ``raw`` to the type of the default value ``like``."""
    raw = raw.strip()
    try:
        if raw.lower() == "none":
            return None
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, dict):
            out = dict(like)
            for item in filter(None, (p.strip() for p in raw.split(","))):
                k, v = item.split(":", 1)
                out[k.strip()] = type(next(iter(like.values())))(v)
            return out
        if isinstance(like, list):
            if not raw:
                return []
            items = [p.strip() for p in raw.split(",")]
            if like and isinstance(like[0], int):
                return [int(p) for p in items]
            return [float(p) for p in items]
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if like is None:
            # optional numeric settings (projection_seed, gram_hidden)
            return int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def _defaults(section: str) -> dict:
    return {f.name: getattr(SECTIONS[section](), f.name) for f in dataclasses.fields(SECTIONS[section])}


def apply(cfg: RunConfig, section: str, key: str, raw: str):
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    defaults = _defaults(section)
    if key not in defaults:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    if section == "encoder" and key == "taus":
        # one threshold for every level, or one per level
        values = _parse(raw, [0.0], "encoder.taus")
        value = values[0] if values and len(values) == 1 else values
    else:
        value = _parse(raw, defaults[key], f"{section}.{key}")
    setattr(getattr(cfg, section), key, value)


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then ``path`` (if given), then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                apply(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        apply(cfg, section, key, raw)
    return cfg


def endpoint_config(settings: EmbedSettings) -> EndpointConfig:
    return EndpointConfig(
        base_url=settings.base_url, model=settings.model, timeout=settings.timeout,
        max_attempts=settings.max_attempts, backoff=settings.backoff, parallel=settings.parallel,
        projection_seed=settings.projection_seed,
    )
