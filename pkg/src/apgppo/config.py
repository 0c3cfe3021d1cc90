"""Training configuration and its INI-style text format.

A config file holds ``key = value`` lines grouped in ``[train]``, ``[ppo]``
and ``[apg]`` sections. Keys absent from the file take the defaults of the
chosen environment; unknown keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field

from .diffenv import ENV_NAMES

MODES = ("augmented", "ppo_baseline", "apg_only")

# Per-environment exploration defaults. Pendulum reuses the point-mass row.
_POINT_MASS_ROW = dict(frequency=1, horizon=4, apg_lr=3e-5, gamma=0.95, agents=256, alpha=0.5, apg_epochs=5)
ENV_DEFAULTS = {
    "point_mass": _POINT_MASS_ROW,
    "pendulum": _POINT_MASS_ROW,
    "cartpole": dict(frequency=1, horizon=4, apg_lr=3e-5, gamma=0.95, agents=256, alpha=0.5, apg_epochs=2),
}


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class TrainConfig:
    env: str = field(default="point_mass", metadata={"section": "train"})
    mode: str = field(default="augmented", metadata={"section": "train"})
    iterations: int = field(default=100, metadata={"section": "train"})
    seed: int = field(default=0, metadata={"section": "train"})
    gamma: float = field(default=0.95, metadata={"section": "train"})
    hidden: tuple = field(default=(64, 64), metadata={"section": "train"})
    eval_episodes: int = field(default=8, metadata={"section": "train"})
    wall_clock: bool = field(default=False, metadata={"section": "train"})

    n_envs: int = field(default=64, metadata={"section": "ppo"})
    rollout_len: int = field(default=32, metadata={"section": "ppo"})
    ppo_epochs: int = field(default=4, metadata={"section": "ppo"})
    minibatches: int = field(default=8, metadata={"section": "ppo"})
    ppo_lr: float = field(default=3e-4, metadata={"section": "ppo"})
    clip: float = field(default=0.2, metadata={"section": "ppo"})
    entropy_coef: float = field(default=1e-3, metadata={"section": "ppo"})
    gae_lambda: float = field(default=0.95, metadata={"section": "ppo"})

    frequency: int = field(default=1, metadata={"section": "apg"})
    horizon: int = field(default=4, metadata={"section": "apg"})
    apg_epochs: int = field(default=5, metadata={"section": "apg"})
    agents: int = field(default=256, metadata={"section": "apg"})
    alpha: float = field(default=0.5, metadata={"section": "apg"})
    apg_lr: float = field(default=3e-5, metadata={"section": "apg"})
    apg_max_grad_norm: float = field(default=1.0, metadata={"section": "apg"})

    def __post_init__(self):
        self.validate()

    @classmethod
    def for_env(cls, env: str, **overrides) -> "TrainConfig":
        if env not in ENV_DEFAULTS:
            raise ConfigError(f"unknown env {env!r}; expected one of {', '.join(ENV_NAMES)}")
        values = {**ENV_DEFAULTS[env], **overrides}
        return cls(env=env, **values)

    def validate(self):
        if self.env not in ENV_NAMES:
            raise ConfigError(f"unknown env {self.env!r}; expected one of {', '.join(ENV_NAMES)}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        positive = ("iterations", "n_envs", "rollout_len", "ppo_epochs", "minibatches", "ppo_lr",
                    "clip", "frequency", "horizon", "agents", "apg_lr", "gamma", "eval_episodes",
                    "apg_max_grad_norm")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.apg_epochs < 0:
            raise ConfigError("apg_epochs must be non-negative")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if self.entropy_coef < 0:
            raise ConfigError("entropy_coef must be non-negative")
        if not self.hidden or any(h <= 0 for h in self.hidden):
            raise ConfigError("hidden must list positive layer widths")

    @property
    def n_explore(self) -> int:
        """Exploratory lanes; the remainder lane goes to the primary side."""
        return min(int(self.alpha * self.n_envs), self.n_envs - 1)

    @property
    def n_primary(self) -> int:
        return self.n_envs - self.n_explore

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
SECTIONS = ("train", "ppo", "apg")


def _parse_value(name, raw, line=None):
    ftype = FIELDS[name].type
    raw = raw.strip()
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "tuple":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name} (expected {ftype})", line) from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _key_lines(text):
    """Map (section, key) to the line number it appears on."""
    lines = {}
    section = None
    for num, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = num
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", stripped)
        if m:
            lines[(section, m.group(1).strip().lower())] = num
    return lines


def parse_config(text: str, overrides=None) -> TrainConfig:
    """Parse config text; ``overrides`` is a list of ``key=value`` or ``section.key=value``."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                       inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " "), getattr(exc, "lineno", None)) from None
    lines = _key_lines(text)

    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", lines.get((section, None)))
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in FIELDS:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line)
            if FIELDS[key].metadata["section"] != section:
                raise ConfigError(f"key {key!r} belongs in [{FIELDS[key].metadata['section']}]", line)
            values[key] = _parse_value(key, raw, line)

    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        key = key.strip().lower().split(".")[-1]
        if key not in FIELDS:
            raise ConfigError(f"unknown override key {key!r}")
        values[key] = _parse_value(key, raw)

    if "env" not in values:
        raise ConfigError("missing required key 'env' in [train]", lines.get(("train", None)))
    env = values.pop("env")
    if env not in ENV_DEFAULTS:
        raise ConfigError(f"unknown env {env!r}; expected one of {', '.join(ENV_NAMES)}",
                          lines.get(("train", "env")))
    return TrainConfig.for_env(env, **values)


def serialize_config(cfg: TrainConfig) -> str:
    out = []
    for section in SECTIONS:
        out.append(f"[{section}]")
        for f in dataclasses.fields(cfg):
            if f.metadata["section"] == section:
                out.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
        out.append("")
    return "\n".join(out)


def load_config(path, overrides=None) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read(), overrides)
