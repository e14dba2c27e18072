"""Experiment configuration: dataclasses, validation, JSON round-trip, content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any


class ConfigError(ValueError):
    """Raised when a config file or field fails validation."""


@dataclass(frozen=True)
class WorldConfig:
    vocab_size: int = 30
    train_types: int = 20  # first N type-ids train; remainder held out for val/test
    feature_dim: int = 6
    object_slots: int = 4
    horizon: int = 60
    n_train_tasks: int = 80
    n_val_tasks: int = 10
    n_test_tasks: int = 10
    max_distractors: int = 2
    radius_min: float = 0.03
    radius_max: float = 0.06
    action_limit: float = 0.1
    contact_radius: float = 0.03
    grasp_reach: float = 0.03  # grasp catches within object radius + this
    low_z: float = 0.3  # effector interacts with objects below this height
    press_z: float = 0.15
    press_tol: float = 0.02
    push_tol: float = 0.05
    place_tol: float = 0.05
    grasp_min_displacement: float = 0.1
    scene_margin: float = 0.08  # min gap between object discs at placement time

    @property
    def obs_dim(self) -> int:
        # effector (x, y, z, aperture) + per slot (present, feature, x, y, held)
        return 4 + self.object_slots * (4 + self.feature_dim)

    @property
    def act_dim(self) -> int:
        return 4


@dataclass(frozen=True)
class NetConfig:
    enc_hidden: int = 32
    enc_feat: int = 32
    conv_width: int = 5
    conv_channels: int = 32
    conv_stride: int = 2
    embed_dim: int = 16
    policy_hidden: int = 64
    slot_feature_dim: int = 6  # must match world.feature_dim; fixes the obs slot layout
    log_std_init: float = -2.3
    log_std_min: float = -5.0
    log_std_max: float = 2.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_steps: int = 2000
    retrain_steps: int = 2000
    bc_steps: int = 2000
    oil_batch: int = 8
    contrastive_pos: int = 8
    contrastive_neg: int = 8
    margin: float = 1.0


@dataclass(frozen=True)
class ExpertConfig:
    noise_std: float = 0.015
    max_speed: float = 0.07  # transit speed cap; decisive steps may use the full limit
    max_attempts: int = 25
    demos_per_task: int = 4
    success_tail: int = 3  # demo steps kept after first success


@dataclass(frozen=True)
class MiliConfig:
    alpha: float = 0.9  # cosine pairing threshold
    batch_size: int = 2000  # trials collected per improvement iteration
    iterations: int = 1
    pair_cap: int | None = None  # per-trial cap on formed pairs; None = unlimited
    retrain_from_scratch: bool = False
    retrain_with_contrastive: bool = False
    collect_noise: float = 0.0  # extra exploration std added during collection


@dataclass(frozen=True)
class EvalConfig:
    episodes_per_task: int = 20
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    sweep_budgets: tuple[int, ...] = (500, 1000, 2000, 4000)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    mili: MiliConfig = field(default_factory=MiliConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs"


_SECTIONS = {
    "world": WorldConfig,
    "net": NetConfig,
    "train": TrainConfig,
    "expert": ExpertConfig,
    "mili": MiliConfig,
    "eval": EvalConfig,
}


def _coerce(section: str, f: dataclasses.Field, value: Any) -> Any:
    name = f"{section}.{f.name}" if section else f.name
    origin = f.type
    if isinstance(value, bool):
        if origin not in ("bool",):
            raise ConfigError(f"{name}: expected {origin}, got bool")
        return value
    if origin == "int":
        if not isinstance(value, int):
            raise ConfigError(f"{name}: expected int, got {type(value).__name__}")
        return value
    if origin == "float":
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected number, got {type(value).__name__}")
        return float(value)
    if origin == "bool":
        raise ConfigError(f"{name}: expected bool, got {type(value).__name__}")
    if origin == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected string, got {type(value).__name__}")
        return value
    if origin == "int | None":
        if value is None:
            return None
        if not isinstance(value, int):
            raise ConfigError(f"{name}: expected int or null, got {type(value).__name__}")
        return value
    if origin.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected list, got {type(value).__name__}")
        if not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{name}: expected list of ints")
        return tuple(value)
    raise ConfigError(f"{name}: unsupported field type {origin}")


def _section_from_dict(section: str, cls: type, data: dict) -> Any:
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown field {section}.{key}")
    kwargs = {k: _coerce(section, known[k], v) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            kwargs[key] = _section_from_dict(key, _SECTIONS[key], value)
        elif key == "out_dir":
            if not isinstance(value, str):
                raise ConfigError("out_dir: expected string")
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config section {key}")
    cfg = ExperimentConfig(**kwargs)
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = getattr(cfg, name)
        out[name] = {f.name: _jsonify(getattr(section, f.name)) for f in fields(cls)}
    out["out_dir"] = cfg.out_dir
    return out


def _jsonify(v: Any) -> Any:
    if isinstance(v, tuple):
        return list(v)
    return v


def validate_config(cfg: ExperimentConfig) -> None:
    w, t, m, e = cfg.world, cfg.train, cfg.mili, cfg.eval
    checks = [
        (w.vocab_size >= 2, "world.vocab_size must be >= 2"),
        (0 < w.train_types < w.vocab_size, "world.train_types must split the vocabulary"),
        (w.object_slots >= 2, "world.object_slots must be >= 2"),
        (w.max_distractors + 2 <= w.object_slots, "world.max_distractors exceeds object_slots"),
        (w.horizon >= 1, "world.horizon must be >= 1"),
        (w.n_train_tasks >= 4, "world.n_train_tasks must cover all four families"),
        (w.n_val_tasks >= 4, "world.n_val_tasks must cover all four families"),
        (w.n_test_tasks >= 4, "world.n_test_tasks must cover all four families"),
        (0 < w.radius_min <= w.radius_max < 0.5, "world.radius range invalid"),
        (w.scene_margin > w.push_tol, "world.scene_margin must exceed push_tol"),
        (w.action_limit > 0, "world.action_limit must be positive"),
        (cfg.net.embed_dim >= 1, "net.embed_dim must be >= 1"),
        (cfg.net.conv_stride >= 1, "net.conv_stride must be >= 1"),
        (cfg.net.conv_width >= 1, "net.conv_width must be >= 1"),
        (cfg.net.log_std_min < cfg.net.log_std_max, "net.log_std bounds inverted"),
        (t.lr > 0, "train.lr must be positive"),
        (0 <= t.adam_beta1 < 1, "train.adam_beta1 must be in [0, 1)"),
        (0 <= t.adam_beta2 < 1, "train.adam_beta2 must be in [0, 1)"),
        (t.margin > 0, "train.margin must be positive"),
        (t.oil_batch >= 1, "train.oil_batch must be >= 1"),
        (cfg.expert.demos_per_task >= 2, "expert.demos_per_task must be >= 2"),
        (cfg.expert.max_attempts >= 1, "expert.max_attempts must be >= 1"),
        (-1 < m.alpha <= 1, "mili.alpha must be in (-1, 1]"),
        (m.batch_size >= 0, "mili.batch_size must be >= 0"),
        (m.iterations >= 0, "mili.iterations must be >= 0"),
        (m.pair_cap is None or m.pair_cap >= 1, "mili.pair_cap must be >= 1 or null"),
        (e.episodes_per_task >= 1, "eval.episodes_per_task must be >= 1"),
        (len(e.seeds) >= 1, "eval.seeds must be nonempty"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_hash(cfg: ExperimentConfig, seed: int) -> str:
    """Content hash identifying a (config, seed) run; embedded in every artifact."""
    payload = json.dumps({"config": config_to_dict(cfg), "seed": seed}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
