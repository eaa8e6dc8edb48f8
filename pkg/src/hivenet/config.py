"""Run configuration and its line-oriented ``section.key = value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .centerline import ProximityConfig
from .losses import LossConfig
from .network import PRESETS, NetworkConfig
from .phantom import PhantomConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    decoupled_weight_decay: bool = False
    lr_step: int = 15
    lr_gamma: float = 0.9
    max_epochs: int = 250
    crops_per_epoch: int = 50
    patience: int = 25
    max_iterations: int = 0            # 0 = no cap beyond max_epochs
    augment: bool = True
    data_fraction: float = 1.0
    validation_fraction: float = 0.0   # trailing share of D slices held out; 0 = monitor train JAC
    tta: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.lr0 <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("lr0 and eps must be positive, weight_decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.lr_step < 1 or not 0 < self.lr_gamma <= 1:
            raise ConfigError("lr_step must be >= 1 and lr_gamma in (0, 1]")
        if self.max_epochs < 1 or self.crops_per_epoch < 1 or self.patience < 1:
            raise ConfigError("max_epochs, crops_per_epoch and patience must be >= 1")
        if not 0 < self.data_fraction <= 1:
            raise ConfigError("data_fraction must lie in (0, 1]")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        return self


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    proximity: ProximityConfig = field(default_factory=ProximityConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def validate(self) -> "RunConfig":
        try:
            self.network.validate()
            self.phantom.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        self.train.validate()
        return self


SECTIONS = ("network", "loss", "proximity", "train", "phantom")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        if v and isinstance(v[0], (list, tuple)):
            return "; ".join(_fmt(x) for x in v)
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _parse_scalar(text: str, like, token: str):
    t = text.strip()
    try:
        if isinstance(like, bool):
            if t.lower() in ("true", "1", "yes", "on"):
                return True
            if t.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float):
            return float(t)
        return t
    except ValueError:
        raise ConfigError(f"bad value {text.strip()!r} for {token}") from None


def _parse(text: str, like, token: str):
    if isinstance(like, (list, tuple)):
        if like and isinstance(like[0], (list, tuple)):
            parts = [p for p in text.split(";") if p.strip()]
            return [tuple(_parse(p, like[0], token)) for p in parts]
        item = like[0] if like else 0
        text = text.strip().strip("()[]")
        vals = [_parse_scalar(p, item, token) for p in text.split(",") if p.strip()]
        return tuple(vals) if isinstance(like, tuple) else vals
    return _parse_scalar(text, like, token)


def to_text(cfg: RunConfig) -> str:
    lines = []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            lines.append(f"{sec}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: RunConfig, items) -> RunConfig:
    """Apply ``(token, value_text)`` pairs where token is ``section.key``."""
    parts = {sec: dataclasses.asdict(getattr(cfg, sec)) for sec in SECTIONS}
    for token, value in items:
        sec, _, key = token.partition(".")
        if sec not in parts or key not in parts[sec]:
            raise ConfigError(f"unknown config key {token!r}")
        parts[sec][key] = _parse(value, parts[sec][key], token)
    try:
        return RunConfig(
            network=NetworkConfig(**parts["network"]),
            loss=LossConfig(**parts["loss"]),
            proximity=ProximityConfig(**parts["proximity"]),
            train=TrainConfig(**parts["train"]),
            phantom=PhantomConfig(**parts["phantom"]),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def parse_lines(text: str):
    items = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        items.append((key.strip(), value.strip()))
    return items


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text. Keys not mentioned keep the values of ``base``; a
    ``network.preset = name`` line selects a preset network first."""
    items = parse_lines(text)
    base = base or RunConfig()
    rest = []
    for key, value in items:
        if key == "network.preset":
            if value not in PRESETS:
                raise ConfigError(f"unknown network preset {value!r}; choose from {sorted(PRESETS)}")
            base = dataclasses.replace(base, network=PRESETS[value]())
        else:
            rest.append((key, value))
    return apply_overrides(base, rest)
