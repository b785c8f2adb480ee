"""Run configuration: flat dotted keys mapped onto the component dataclasses.

A config file is a JSON object such as::

    {"seed": 3, "train.max_epochs": 40, "model.base_channels": 16,
     "data.crop": false, "train.augment_cfg.rotation_deg": 0}

Nested objects are flattened, so ``{"train": {"max_epochs": 40}}`` is equivalent.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .losses import LossWeights
from .model import ModelConfig
from .synthdata import SynthSpec
from .trainer import TrainConfig

EXPLAIN_MODES = ("group", "class", "sampled")
# derived in finalize(); setting them directly would be silently overwritten
DERIVED_KEYS = {
    "synth.rng_seed": "seed",
    "train.seed": "seed",
    "train.augment_cfg.rng_seed": "seed",
    "model.in_channels": "data.single_channel",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataOptions:
    crop: bool = True
    single_channel: bool = False


@dataclass(frozen=True)
class ExplainOptions:
    mode: str = "group"
    n_perms: int = 2000

    def __post_init__(self):
        if self.mode not in EXPLAIN_MODES:
            raise ValueError(f"explain.mode must be one of {EXPLAIN_MODES}")
        if self.n_perms < 1:
            raise ValueError("explain.n_perms must be at least 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    folds: int = 5
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataOptions = field(default_factory=DataOptions)
    explain: ExplainOptions = field(default_factory=ExplainOptions)

    def to_flat(self) -> Dict[str, Any]:
        return flatten(dataclasses.asdict(self))

    def ablations(self) -> Dict[str, Any]:
        """Which ablation settings are active (no pretraining is always the case here)."""
        default = ModelConfig()
        return {
            "no_augmentation": not self.train.augment,
            "no_pretraining": True,
            "single_channel": self.data.single_channel,
            "no_cropping": not self.data.crop,
            "alternate_backbone": (self.model.base_channels, self.model.blocks) != (default.base_channels, default.blocks),
            "backbone_base_channels": self.model.base_channels,
            "backbone_blocks": self.model.blocks,
        }


def flatten(d: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set_path(obj, path, value):
    """Return a copy of dataclass ``obj`` with the dotted ``path`` replaced."""
    head, *rest = path
    names = {f.name for f in dataclasses.fields(obj)}
    if head not in names:
        raise KeyError(head)
    if rest:
        child = getattr(obj, head)
        if not dataclasses.is_dataclass(child):
            raise KeyError(".".join(path))
        return replace(obj, **{head: _set_path(child, rest, value)})
    current = getattr(obj, head)
    if dataclasses.is_dataclass(current):
        raise KeyError(f"{head} is a section, not a value")
    return replace(obj, **{head: _coerce(current, value, head)})


def _coerce(current, value, name):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{name} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} expects a number, got {value!r}")
        return float(value)
    return value


def apply(cfg: RunConfig, flat: Dict[str, Any]) -> RunConfig:
    """Apply dotted-key overrides; unknown keys and bad values raise :class:`ConfigError`."""
    for key, value in flat.items():
        if key in DERIVED_KEYS:
            raise ConfigError(f"{key} is derived; set {DERIVED_KEYS[key]!r} instead")
        try:
            cfg = _set_path(cfg, key.split("."), value)
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return finalize(cfg)


def finalize(cfg: RunConfig) -> RunConfig:
    """Propagate the shared seed and keep input channels consistent with the data options."""
    channels = 1 if cfg.data.single_channel else 3
    return replace(
        cfg,
        synth=replace(cfg.synth, rng_seed=cfg.seed),
        train=replace(cfg.train, seed=cfg.seed, augment_cfg=replace(cfg.train.augment_cfg, rng_seed=cfg.seed)),
        model=replace(cfg.model, in_channels=channels),
    )


def load_flat(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return flatten(raw)


def parse_assignments(items: Iterable[str]) -> Dict[str, Any]:
    """``["train.lr_init=0.01", "data.crop=false"]`` -> dict; values parse as JSON when possible."""
    out: Dict[str, Any] = {}
    for item in items:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"expected KEY=VALUE, got {item!r}")
        try:
            out[key.strip()] = json.loads(text)
        except json.JSONDecodeError:
            out[key.strip()] = text
    return out


def from_flat(flat: Dict[str, Any]) -> RunConfig:
    return apply(RunConfig(), flat)
