"""Experiment configuration: YAML document with ``data``, ``model`` and
``train`` sections. Unknown keys and ill-typed values raise
:class:`ConfigError` naming the offending field."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import yaml


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    h: int = 8
    w: int = 8
    raw_channels: int = 4
    n_classes: int = 5
    tail_exponent: float = 2.0
    noise: float = 1.0
    separation: float = 2.0
    source_shift: float = 0.0
    target_shift: float = 0.5
    n_source: int = 200
    n_labeled: int = 100
    n_unlabeled: int = 1000
    n_test: int = 200
    world_seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    fusion: str = "dense"
    use_language: bool = True
    freeze_encoders: bool = False


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    lr: float = 1e-4
    decay_interval: int = 1000
    momentum: float = 0.0
    weight_decay: float = 0.0
    alpha: float = 0.999
    threshold: float = 0.95
    lambda_ct: float = 1.0
    mode: str = "DyCE"
    omega: float = 0.5
    hard_fraction: float = 0.5
    gate: str = "teacher"
    ct_normalize: str = "masked"
    eval_model: str = "student"
    log_every: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return asdict(self)

    def with_overrides(self, overrides):
        """Apply ``{"train.omega": 0.25, ...}`` style dotted overrides."""
        d = self.to_dict()
        for key, value in overrides.items():
            section, _, name = key.rpartition(".")
            target = d.get(section) if section else d
            if not isinstance(target, dict) or name not in target:
                raise ConfigError(f"{key}: unknown field")
            target[name] = value
        return from_dict(d)


CHOICES = {
    ("model", "fusion"): ("dense", "generic"),
    ("train", "mode"): ("CE", "DyCE"),
    ("train", "gate"): ("teacher", "student"),
    ("train", "ct_normalize"): ("masked", "pixels", "images"),
    ("train", "eval_model"): ("student", "teacher"),
}

RANGES = {
    ("train", "alpha"): (0.0, 1.0, True, True),
    ("train", "threshold"): (0.0, 1.0, True, True),
    ("train", "omega"): (0.0, 1.0, True, True),
    ("train", "hard_fraction"): (0.0, 1.0, False, True),
    ("train", "lr"): (0.0, float("inf"), True, False),
    ("train", "lambda_ct"): (0.0, float("inf"), True, False),
}


def _coerce(path, value, typ):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _section(cls, name, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
        typ = known[key].type
        out[key] = _coerce(f"{name}.{key}", value, _TYPES.get(typ, typ))
        if (name, key) in CHOICES and out[key] not in CHOICES[(name, key)]:
            raise ConfigError(f"{name}.{key}: must be one of {CHOICES[(name, key)]}, got {value!r}")
        if (name, key) in RANGES:
            lo, hi, lo_in, hi_in = RANGES[(name, key)]
            v = out[key]
            if not ((v > lo or (lo_in and v == lo)) and (v < hi or (hi_in and v == hi))):
                raise ConfigError(f"{name}.{key}: {v} outside allowed range")
    return replace(cls(), **out)


def from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    extra = set(d) - {"seed", "data", "model", "train"}
    if extra:
        raise ConfigError(f"{sorted(extra)[0]}: unknown field")
    seed = _coerce("seed", d.get("seed", 0), int)
    cfg = ExperimentConfig(
        seed=seed,
        data=_section(DataConfig, "data", d.get("data")),
        model=_section(ModelConfig, "model", d.get("model")),
        train=_section(TrainConfig, "train", d.get("train")),
    )
    for k in ("h", "w", "raw_channels", "n_source", "n_test"):
        if getattr(cfg.data, k) < (1 if k in ("h", "w", "raw_channels") else 0):
            raise ConfigError(f"data.{k}: must be positive")
    if cfg.data.n_classes < 2:
        raise ConfigError("data.n_classes: must be >= 2")
    if cfg.data.n_source + cfg.data.n_labeled == 0:
        raise ConfigError("data.n_labeled: no labeled data (n_source is also 0)")
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return from_dict(raw or {})
