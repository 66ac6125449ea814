# pipeline/settings.py
"""
Run settings: frozen dataclasses filled from settings.toml, CLI overrides and
the HDAFL_SEED environment variable (in that order of precedence, lowest first).

Every default below is the reference training recipe where one exists
(alpha=25, tau 0.3 / 0.1, mu=0.32, epsilon=0.42, lr=1e-3, momentum=0.9,
weight decay=1e-5, 15 epochs, 16-way 2-shot episodes, gamma 0.7 / 1.0 for AWA2).
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import torch

# Py 3.11+: tomllib is stdlib; fallback to tomli for 3.10/3.9
try:
    import tomllib  # type: ignore[attr-defined]
except Exception:  # pragma: no cover
    import tomli as tomllib  # type: ignore[no-redef]

from hdafl.errors import ConfigError, LoadError
from hdafl.losses import AAL_VARIANTS, LossWeights
from hdafl.model import SOFTMAX_AXES
from zsldata.episodes import EpisodeSpec

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_SETTINGS_PATH = ROOT / "pipeline" / "settings.toml"
SEED_ENV = "HDAFL_SEED"

SAMPLING_MODES = ("episode", "random")
DTYPES = {"float32": torch.float32, "float64": torch.float64}
GAMMA_AWA2 = 1.0
GAMMA_DEFAULT = 0.7


@dataclass(frozen=True)
class ModelSettings:
    heads: int = 8
    hidden_dim: int = 1024
    ff_mult: int = 4
    attention_softmax_axis: str = "spatial"
    use_enhanced_features: bool = True

    def __post_init__(self) -> None:
        if self.attention_softmax_axis not in SOFTMAX_AXES:
            raise ConfigError(f"attention_softmax_axis must be one of {SOFTMAX_AXES}")
        for key in ("heads", "hidden_dim", "ff_mult"):
            if getattr(self, key) < 1:
                raise ConfigError(f"model.{key} must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    seed: int = 0
    dtype: str = "float32"
    sampling: str = "episode"
    batch_size: int = 32
    max_episodes: Optional[int] = None
    checkpoint_dir: str = "checkpoints"
    backup_location: str = ""
    presence_threshold: float = 0.5
    aal_variant: str = "verbatim"
    aal_margin: float = 0.0
    cls_over_all_classes: bool = True
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelSettings = field(default_factory=ModelSettings)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.max_episodes is not None and self.max_episodes < 1:
            raise ConfigError(f"max_episodes must be positive when set, got {self.max_episodes}")
        if not 0.0 <= self.presence_threshold < 1.0:
            raise ConfigError(f"presence_threshold must lie in [0, 1), got {self.presence_threshold}")
        if self.aal_variant not in AAL_VARIANTS:
            raise ConfigError(f"aal_variant must be one of {AAL_VARIANTS}, got {self.aal_variant!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EvalConfig:
    gamma: Optional[float] = None

    def __post_init__(self) -> None:
        if self.gamma is not None and self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")

    def gamma_for(self, dataset_name: str) -> float:
        if self.gamma is not None:
            return self.gamma
        return GAMMA_AWA2 if "awa" in dataset_name.lower() else GAMMA_DEFAULT


@dataclass(frozen=True)
class RunSettings:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    log_dir: str = "logs"


# ----------------------------
# TOML layout
# ----------------------------
# section -> key -> (target dataclass, attribute)
_GENERAL_KEYS = ("seed", "dtype", "checkpoint_dir", "backup_location")
_TRAIN_KEYS = ("epochs", "learning_rate", "momentum", "weight_decay", "sampling", "batch_size", "max_episodes")
_LOSS_TRAIN_KEYS = ("presence_threshold", "aal_variant", "aal_margin", "cls_over_all_classes")
SECTIONS: Dict[str, tuple] = {
    "general": _GENERAL_KEYS + ("log_dir",),
    "model": tuple(f.name for f in fields(ModelSettings)),
    "train": _TRAIN_KEYS,
    "episode": ("ways", "shots"),
    "loss": tuple(f.name for f in fields(LossWeights)) + _LOSS_TRAIN_KEYS,
    "eval": ("gamma",),
}


def read_settings(path=None) -> Dict[str, Dict[str, Any]]:
    """Load a settings TOML file. No path: the shipped pipeline/settings.toml, else empty."""
    if path is None:
        cfg_path = DEFAULT_SETTINGS_PATH
        if not cfg_path.exists():
            logging.warning("settings.toml not found; using default settings.")
            return {}
    else:
        cfg_path = Path(path)
        if not cfg_path.exists():
            raise LoadError(f"settings file not found: {cfg_path}")
    with cfg_path.open("rb") as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{cfg_path}: {e}") from e


def merge_overrides(raw: Mapping[str, Mapping[str, Any]], overrides: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    """Apply dotted 'section.key' overrides on top of raw TOML sections."""
    merged = {section: dict(values) for section, values in raw.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        merged.setdefault(section, {})[key] = value
    return merged


def _check_keys(raw: Mapping[str, Any]) -> None:
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, Mapping):
            raise ConfigError(f"config section [{section}] must be a table")
        for key in values:
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")


def build_settings(
    raw: Optional[Mapping[str, Mapping[str, Any]]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
) -> RunSettings:
    raw = merge_overrides(raw or {}, overrides or {})
    _check_keys(raw)
    env = os.environ if env is None else env

    general = dict(raw.get("general", {}))
    log_dir = general.pop("log_dir", "logs")
    if env.get(SEED_ENV):
        try:
            general["seed"] = int(env[SEED_ENV])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from e
        logging.info("Seed overridden by %s=%s", SEED_ENV, general["seed"])

    loss_raw = dict(raw.get("loss", {}))
    loss_train = {k: loss_raw.pop(k) for k in _LOSS_TRAIN_KEYS if k in loss_raw}

    try:
        seed = int(general.get("seed", 0))
        train = TrainConfig(
            **general,
            **raw.get("train", {}),
            **loss_train,
            episode=EpisodeSpec(seed=seed, **raw.get("episode", {})),
            loss=LossWeights(**loss_raw),
            model=ModelSettings(**raw.get("model", {})),
        )
        evaluation = EvalConfig(**raw.get("eval", {}))
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return RunSettings(train=train, eval=evaluation, log_dir=str(log_dir))


def load_run_settings(path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunSettings:
    return build_settings(read_settings(path), overrides)
