"""Typed configuration for every stage, with YAML loading and layered resolution.

Resolution order is defaults < config file < command-line flags. The fully
resolved config is what gets persisted in checkpoints and run manifests.
"""

import dataclasses
import json
import logging
from enum import StrEnum
from pathlib import Path
from typing import Any, Self

import yaml

from decision_nce.errors import ConfigError

logger = logging.getLogger(__name__)


class Variant(StrEnum):
    P = "decisionnce-p"
    T = "decisionnce-t"
    T4 = "t-4-frames"
    T8 = "t-8-frames"
    FRAME_ALIGN = "frame-align"


# Short names accepted on the command line.
VARIANT_ALIASES: dict[str, Variant] = {
    "p": Variant.P,
    "t": Variant.T,
    "t4": Variant.T4,
    "t8": Variant.T8,
    "frame-align": Variant.FRAME_ALIGN,
}


def _require(condition: bool, field: str, reason: str) -> None:
    if not condition:
        raise ConfigError(field, reason)


class _Config:
    """Shared dict conversion for the frozen config dataclasses."""

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))  # type: ignore[call-overload]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Self:
        if not isinstance(data, dict):
            raise ConfigError(cls.__name__, f"expected a mapping, got {type(data).__name__}")
        known = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"{cls.__name__}.{key}", "unknown field")
            field_type = known[key].type
            if isinstance(field_type, type) and issubclass(field_type, _Config):
                value = field_type.from_dict(value)
            elif isinstance(value, list):
                value = _tupled(value)
            kwargs[key] = value
        return cls(**kwargs)

    def replace(self, **changes: Any) -> Self:
        return dataclasses.replace(self, **changes)  # type: ignore[type-var]


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, StrEnum):
        return str(value)
    return value


def _tupled(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


@dataclasses.dataclass(frozen=True)
class WorldConfig(_Config):
    n_task_pairs: int = 4
    obs_dim: int = 32
    noise: float = 0.05
    h_min: int = 20
    h_max: int = 40
    action_dim: int = 2
    n_distractors: int = 4
    scene_dim: int = 4
    alpha: float = 0.05
    distractor_step: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("n_task_pairs", "obs_dim", "h_min", "h_max", "action_dim", "alpha"):
            _require(getattr(self, name) > 0, name, "must be positive")
        _require(self.noise >= 0, "noise", "must be non-negative")
        _require(self.distractor_step >= 0, "distractor_step", "must be non-negative")
        _require(self.n_distractors >= 0, "n_distractors", "must be non-negative")
        _require(self.scene_dim >= 0, "scene_dim", "must be non-negative")
        _require(self.h_min >= 2, "h_min", "must be at least 2")
        _require(self.h_max >= self.h_min, "h_max", "must be at least h_min")
        _require(
            self.obs_dim > self.n_distractors,
            "n_distractors",
            "distractor dims must leave room for the task rendering",
        )

    @property
    def n_tasks(self) -> int:
        return 2 * self.n_task_pairs


@dataclasses.dataclass(frozen=True)
class EncoderConfig(_Config):
    obs_dim: int = 32
    embed_dim: int = 32
    hidden: tuple[int, ...] = (128, 128)
    token_dim: int = 32
    projection_hidden: tuple[int, ...] = (128,)
    vocab_size: int = 6

    def __post_init__(self):
        for name in ("obs_dim", "embed_dim", "token_dim", "vocab_size"):
            _require(getattr(self, name) > 0, name, "must be positive")
        for name in ("hidden", "projection_hidden"):
            _require(all(w > 0 for w in getattr(self, name)), name, "widths must be positive")

    @property
    def vision_widths(self) -> list[int]:
        return [self.obs_dim, *self.hidden, self.embed_dim]

    @property
    def projection_widths(self) -> list[int]:
        return [self.token_dim, *self.projection_hidden, self.embed_dim]

    @classmethod
    def for_world(cls, world: WorldConfig, **overrides: Any) -> Self:
        # two verbs ("open"/"close") plus one object token per task pair
        return cls(obs_dim=world.obs_dim, vocab_size=2 + world.n_task_pairs, **overrides)


@dataclasses.dataclass(frozen=True)
class ObjectiveSpec(_Config):
    variant: Variant = Variant.T
    embed_dim: int = 32
    temperature: float = 1.0

    def __post_init__(self):
        try:
            variant = VARIANT_ALIASES.get(self.variant, self.variant)
            object.__setattr__(self, "variant", Variant(variant))
        except ValueError:
            raise ConfigError("variant", f"unknown objective {self.variant!r}") from None
        _require(self.embed_dim > 0, "embed_dim", "must be positive")
        _require(self.temperature > 0, "temperature", "must be positive")

    @property
    def intermediary_frames(self) -> int:
        """Number of displacement steps k the variant sums over."""
        return {Variant.T4: 4, Variant.T8: 8}.get(self.variant, 1)


@dataclasses.dataclass(frozen=True)
class OptimizerConfig(_Config):
    name: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        _require(self.name in ("adam", "sgd"), "name", "must be 'adam' or 'sgd'")
        _require(0 <= self.beta1 < 1, "beta1", "must be in [0, 1)")
        _require(0 <= self.beta2 < 1, "beta2", "must be in [0, 1)")
        _require(self.eps > 0, "eps", "must be positive")


@dataclasses.dataclass(frozen=True)
class TrainConfig(_Config):
    objective: ObjectiveSpec = ObjectiveSpec()
    encoder: EncoderConfig = EncoderConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    iterations: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_interval: int = 0
    max_segment_length: int | None = None
    fixed_span: int | None = None

    def __post_init__(self):
        _require(self.iterations >= 1, "iterations", "must be at least 1")
        _require(self.batch_size >= 2, "batch_size", "must be at least 2")
        # zero is accepted so a run can reproduce its initialization exactly
        _require(self.learning_rate >= 0, "learning_rate", "must be non-negative")
        _require(self.weight_decay >= 0, "weight_decay", "must be non-negative")
        _require(self.checkpoint_interval >= 0, "checkpoint_interval", "must be non-negative")
        _require(
            self.objective.embed_dim == self.encoder.embed_dim,
            "objective.embed_dim",
            "must match encoder.embed_dim",
        )
        if self.max_segment_length is not None:
            _require(self.max_segment_length >= 1, "max_segment_length", "must be at least 1")
        if self.fixed_span is not None:
            _require(self.fixed_span >= 1, "fixed_span", "must be at least 1")


@dataclasses.dataclass(frozen=True)
class PlannerConfig(_Config):
    horizon: int = 50
    n_sequences: int = 64
    iterations: int = 1
    temperature: float = 10.0
    gamma: float = 1.0
    noise_scale: float = 0.3
    warmstart: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        _require(self.horizon >= 1, "horizon", "must be at least 1")
        _require(self.n_sequences >= 2, "n_sequences", "must be at least 2")
        _require(self.iterations >= 1, "iterations", "must be at least 1")
        _require(self.temperature > 0, "temperature", "must be positive")
        _require(0 < self.gamma <= 1, "gamma", "must lie in (0, 1]")
        _require(self.noise_scale >= 0, "noise_scale", "must be non-negative")
        if self.warmstart is not None:
            object.__setattr__(self, "warmstart", _tupled(_plain(self.warmstart)))
            _require(
                len(self.warmstart) == self.horizon,
                "warmstart",
                "must have one action per horizon step",
            )


@dataclasses.dataclass(frozen=True)
class BCConfig(_Config):
    hidden: tuple[int, ...] = (256, 256)
    learning_rate: float = 1e-4
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    eval_interval: int = 500
    eval_episodes: int = 25
    max_episode_steps: int | None = None

    def __post_init__(self):
        _require(all(w > 0 for w in self.hidden), "hidden", "widths must be positive")
        _require(self.learning_rate >= 0, "learning_rate", "must be non-negative")
        _require(self.batch_size >= 1, "batch_size", "must be at least 1")
        _require(self.steps >= 1, "steps", "must be at least 1")
        _require(self.eval_interval >= 0, "eval_interval", "must be non-negative")
        _require(self.eval_episodes >= 1, "eval_episodes", "must be at least 1")


FULL_PRETRAIN = TrainConfig(
    iterations=20_000, batch_size=1024, learning_rate=1e-5, weight_decay=1e-3
)
DESK_TRAIN = TrainConfig()
REFERENCE_PLANNER = PlannerConfig()
# Near-uniform weights at temperature 10 leave a single open-loop pass unable to
# move the toy world; this preset sharpens weights and iterates.
DESK_PLANNER = PlannerConfig(iterations=8, temperature=0.1)
REFERENCE_BC = BCConfig()

TRAIN_PRESETS: dict[str, TrainConfig] = {"desk": DESK_TRAIN, "pretrain": FULL_PRETRAIN}
PLANNER_PRESETS: dict[str, PlannerConfig] = {"reference": REFERENCE_PLANNER, "desk": DESK_PLANNER}


def load_config(path: str | Path) -> dict[str, Any]:
    """Read a YAML config file, or a JSON run manifest, into a plain mapping."""
    with open(path, encoding="utf-8") as fh:
        try:
            # YAML 1.1 reads exponent floats such as 1e-05 as strings
            data = json.load(fh) if Path(path).suffix == ".json" else yaml.safe_load(fh)
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError(str(path), f"unreadable config file: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level of a config file must be a mapping")
    logger.debug("Loaded config file %s with keys %s", path, sorted(data))
    return data


def _merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if value is None and key in merged:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve[C: _Config](
    defaults: C, file_values: dict[str, Any] | None = None, flags: dict[str, Any] | None = None
) -> C:
    """Apply defaults < config file < flags; flags set to None are ignored."""
    merged = _merge(defaults.to_dict(), file_values or {})
    merged = _merge(merged, flags or {})
    return type(defaults).from_dict(merged)
