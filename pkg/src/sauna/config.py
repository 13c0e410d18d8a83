"""Experiment configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

from .exceptions import ConfigurationError
from .ppo import PpoHyperparams


class Variant(str, Enum):
    PPO_BASELINE = "ppo_baseline"
    SAUNA = "sauna"
    NO_FILTER_AUX = "no_filter_aux"
    RANDOM_FILTER = "random_filter"
    MEAN_INSTEAD_OF_MEDIAN = "mean_instead_of_median"
    EMPIRICAL_VEX_FILTER = "empirical_vex_filter"
    ADJUSTED_VEX = "adjusted_vex"

    @property
    def trains_vex(self):
        return self is not Variant.PPO_BASELINE

    @property
    def filters(self):
        return self not in (Variant.PPO_BASELINE, Variant.NO_FILTER_AUX)


DEFAULT_SEED_COUNT = 6


@dataclass
class ExperimentConfig:
    env: str = "pendulum"
    variant: str = "sauna"
    seeds: tuple = tuple(range(DEFAULT_SEED_COUNT))
    total_steps: int = 1_000_000
    output_dir: str = "runs/default"
    eval_every: int = 10
    eval_episodes: int = 10
    hidden: tuple = (64, 64)
    vex_hidden: int = 64
    log_std_init: float = 0.0
    normalize_obs: bool = True
    normalize_reward: bool = False
    shared_policy_trunk: bool = False
    median_accepted_only: bool = False
    returns_on_accepted_only: bool = False
    random_filter_rate: float = 0.05
    random_filter_schedule: str = ""
    adjusted_vex_predictors: int = 1
    save_checkpoint: bool = True
    # PPO / filter hyperparameters, mirrored from PpoHyperparams
    clip: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    horizon: int = 2048
    gamma: float = 0.99
    lam: float = 0.95
    value_coef: float = 0.5
    vex_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    learning_rate: float = 3e-4
    lr_schedule: str = "constant"  # or "linear": decays to 0 over total_steps
    rho: float = 0.3
    eps0: float = 1e-8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    normalize_advantages: bool = True
    vex_into_trunk: bool = True

    def __post_init__(self):
        try:
            self.variant = Variant(self.variant).value
        except ValueError:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}; choose from {[v.value for v in Variant]}"
            ) from None
        self.seeds = tuple(int(s) for s in self.seeds)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        if not self.seeds:
            raise ConfigurationError("seed list must be nonempty")
        if self.total_steps < self.horizon:
            raise ConfigurationError("total_steps must be >= horizon")
        if self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigurationError("eval_every and eval_episodes must be >= 1")
        if not 0.0 <= self.random_filter_rate < 1.0:
            raise ConfigurationError("random_filter_rate must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigurationError("lr_schedule must be 'constant' or 'linear'")
        self.ppo()

    def ppo(self) -> PpoHyperparams:
        names = PpoHyperparams.field_names()
        return PpoHyperparams(**{k: getattr(self, k) for k in names})

    @property
    def variant_enum(self) -> Variant:
        return Variant(self.variant)

    def replace(self, **changes) -> "ExperimentConfig":
        unknown = set(changes) - set(_FIELD_TYPES)
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        d = asdict(self)
        d.update(changes)
        return ExperimentConfig(**d)

    def with_overrides(self, pairs) -> "ExperimentConfig":
        """Apply ``key=value`` strings (CLI ``--set``)."""
        changes = {}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigurationError(f"override {pair!r} is not key=value")
            key, value = pair.split("=", 1)
            key = key.strip()
            changes[key] = parse_value(key, value.strip())
        return self.replace(**changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = parse_value(key, value)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_text())

    def effective_seeds(self):
        """Seeds shifted by ``SAUNA_SEED_OFFSET`` when it is set."""
        offset = int(os.environ.get("SAUNA_SEED_OFFSET", "0") or 0)
        return tuple(s + offset for s in self.seeds)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_value(key, text):
    if key not in _FIELD_TYPES:
        raise ConfigurationError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
        return text
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from None


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
