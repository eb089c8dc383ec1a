"""Experiment configuration: YAML files loaded into frozen dataclasses.

Unknown keys are errors and every rejection names the dotted path of the
offending field, e.g. ``attack.start_round``.
"""

import logging
import math
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import (Any, Callable, Dict, Mapping, Optional, Sequence, Tuple, Union, get_args, get_origin,
                    get_type_hints)

import yaml

from .data import SplitPlan
from .errors import ConfigError
from .sim_types import DefenseConfig, FillPattern, Placement, SelectionStrategy, TriggerMode
from .trigger import TriggerSpec, split_trigger

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "VFLSIM_OUTPUT_DIR"
AUTO = "auto"


class DatasetKind(Enum):
    GRID = "grid"
    BLOBS = "blobs"
    CSV = "csv"


@dataclass(frozen=True)
class DatasetConfig:
    """Where the samples come from.

    ``per_class`` counts generated samples before the test and auxiliary
    holdouts, so the grid defaults leave 300 training rows per class.
    ``aux_per_class`` samples of every class are held back from training for
    the adversary's auxiliary set whether or not an attack runs, so attacked
    and clean runs train on the same rows.
    """
    kind: DatasetKind = DatasetKind.GRID
    num_classes: int = 4
    per_class: int = 440
    test_per_class: int = 100
    aux_per_class: int = 40
    height: int = 12
    width: int = 12
    noise: float = 0.25
    dim: int = 16
    spread: float = 1.0
    distance: float = 6.0
    close_ratio: float = 0.5
    path: Optional[str] = None
    label_column: str = "label"


@dataclass(frozen=True)
class SplitConfig:
    participants: int = 2
    adversary_ids: Tuple[int, ...] = (0,)


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 16
    bottom_hidden: Tuple[int, ...] = (32, 32)
    top_hidden: Tuple[int, ...] = (32,)
    lr: float = 0.1
    batch_size: int = 64


@dataclass(frozen=True)
class AttackConfig:
    """The adversary's knobs. ``start_round`` is R_n or ``"auto"``."""
    enabled: bool = True
    start_round: Union[int, str] = 60
    auto_start_fraction: float = 0.7
    budget: float = 10.0
    epsilon: Optional[float] = None
    epsilon_fraction: float = 0.5
    selection: SelectionStrategy = SelectionStrategy.OPTIMAL
    placement: Placement = Placement.SALIENCY
    poison_steps: int = 50
    poison_lr: float = 0.5
    refresh: int = 5
    known_fraction: float = 1.0
    surrogate_epochs: int = 300
    surrogate_lr: float = 0.2
    surrogate_hidden: int = 32
    confidence: float = 0.5
    feature_count: Optional[int] = None


@dataclass(frozen=True)
class TriggerConfig:
    """``fill = None`` means 1.0 on grids and shard max + 3 std on tabular data."""
    mode: TriggerMode = TriggerMode.GRID_PATCH
    height: int = 5
    width: int = 5
    pattern: FillPattern = FillPattern.CONSTANT
    fill: Optional[float] = None
    alt_fill: float = 0.0


@dataclass(frozen=True)
class DefenseSettings:
    """Server-side defenses.

    With ``anomaly_filter`` on, the isolation forest drops ``anomaly_budget``
    percent of every class each round; a budget of ``None`` takes the
    attack's poisoning budget.
    """
    dp_variance: float = 0.0
    anomaly_filter: bool = False
    anomaly_budget: Optional[float] = None
    num_trees: int = 100
    subsample_size: int = 256
    max_depth: Optional[int] = None
    refit_every: int = 1

    @property
    def enabled(self) -> bool:
        return self.dp_variance > 0 or self.anomaly_filter

    def resolved(self, attack: Optional["AttackConfig"]) -> "DefenseSettings":
        """Pin a defaulted anomaly budget to the attack's poisoning budget."""
        if self.anomaly_filter and self.anomaly_budget is None and attack is not None:
            return replace(self, anomaly_budget=attack.budget)
        return self

    def to_defense_config(self, seed: int) -> DefenseConfig:
        if self.anomaly_filter and self.anomaly_budget is None:
            raise ConfigError("defense.anomaly_budget", "has no attack budget to default to")
        return DefenseConfig(
            dp_variance=self.dp_variance,
            anomaly_budget=self.anomaly_budget if self.anomaly_filter else 0.0,
            num_trees=self.num_trees,
            subsample_size=self.subsample_size,
            max_depth=self.max_depth,
            refit_every=self.refit_every,
            seed=seed,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; ``attack = None`` is a clean run."""
    name: str = "experiment"
    total_rounds: int = 100
    checkpoint_every: int = 5
    seeds: Tuple[int, ...] = (0,)
    output: str = "reports"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: Optional[AttackConfig] = None
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    defense: DefenseSettings = field(default_factory=DefenseSettings)

    @property
    def attack_active(self) -> bool:
        return self.attack is not None and self.attack.enabled

    def without_attack(self) -> "ExperimentConfig":
        return replace(self, attack=None, defense=self.defense.resolved(self.attack))

    def trigger_spec(self) -> TriggerSpec:
        """The undivided trigger; tabular index sets are planned by each adversary."""
        if self.trigger.mode is TriggerMode.GRID_PATCH:
            return TriggerSpec.grid(
                self.trigger.height, self.trigger.width,
                fill=1.0 if self.trigger.fill is None else self.trigger.fill,
                pattern=self.trigger.pattern, alt_fill=self.trigger.alt_fill)
        return TriggerSpec.tabular((), fill=0.0 if self.trigger.fill is None else self.trigger.fill)


def _describe(hint: Any) -> str:
    if isinstance(hint, type) and issubclass(hint, Enum):
        return "one of " + ", ".join(repr(m.value) for m in hint)
    return getattr(hint, "__name__", str(hint))


def _convert(value: Any, hint: Any, path: str) -> Any:
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(path, "must not be null")
        options = [arg for arg in args if arg is not type(None)]
        if len(options) == 1:
            return _convert(value, options[0], path)
        errors = []
        for arg in options:
            try:
                return _convert(value, arg, path)
            except ConfigError as exc:
                errors.append(exc.message)
        raise ConfigError(path, " or ".join(errors))
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(_convert(item, args[0], f"{path}[{i}]") for i, item in enumerate(value))
    if is_dataclass(hint):
        return _build(hint, value, path)
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError:
            raise ConfigError(path, f"expected {_describe(hint)}, got {value!r}") from None
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {_describe(hint)}")


def _build(cls: type, data: Any, path: str = "") -> Any:
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(path, f"expected a mapping, got {data!r}")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else str(key), "unknown key")
    values = {key: _convert(value, hints[key], f"{path}.{key}" if path else key) for key, value in data.items()}
    return cls(**values)


def from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    """Build and validate a config from a parsed YAML document."""
    config = _build(ExperimentConfig, data)
    validate(config)
    return config


def load_config(path: Union[str, Path], environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Read ``path``; ``VFLSIM_OUTPUT_DIR`` in the environment replaces ``output``."""
    path = Path(path)
    environ = os.environ if environ is None else environ
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path} is not valid YAML: {exc}") from exc
    config = from_dict(data or {})
    if environ.get(OUTPUT_DIR_ENV):
        config = replace(config, output=environ[OUTPUT_DIR_ENV])
    logger.info("Loaded experiment '%s' from %s", config.name, path)
    return config


def to_dict(value: Any) -> Any:
    """A plain YAML/JSON-ready echo of a config (enums as values, tuples as lists)."""
    if is_dataclass(value):
        return {f.name: to_dict(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [to_dict(item) for item in value]
    return value


def _require(condition: bool, path: str, message: str) -> None:
    if not condition:
        raise ConfigError(path, message)


def num_features(dataset: DatasetConfig) -> Optional[int]:
    if dataset.kind is DatasetKind.GRID:
        return dataset.height * dataset.width
    if dataset.kind is DatasetKind.BLOBS:
        return dataset.dim
    return None


def grid_shape(dataset: DatasetConfig) -> Optional[Tuple[int, int]]:
    return (dataset.height, dataset.width) if dataset.kind is DatasetKind.GRID else None


def validate(config: ExperimentConfig) -> None:
    """Cross-field checks; raises :class:`ConfigError` on the first failure."""
    _require(bool(config.name), "name", "must not be empty")
    _require(config.total_rounds >= 2, "total_rounds", "must be at least 2")
    _require(config.checkpoint_every >= 1, "checkpoint_every", "must be at least 1")
    _require(len(config.seeds) >= 1, "seeds", "must list at least one seed")

    data = config.dataset
    _require(data.num_classes >= 2, "dataset.num_classes", "must be at least 2")
    for key in ("per_class", "test_per_class", "aux_per_class"):
        _require(getattr(data, key) >= 1, f"dataset.{key}", "must be at least 1")
    if data.kind is not DatasetKind.CSV:
        _require(data.per_class > data.test_per_class + data.aux_per_class, "dataset.per_class",
                 "must exceed test_per_class + aux_per_class")
    _require(data.noise >= 0 and data.spread >= 0, "dataset", "noise and spread must be >= 0")
    if data.kind is DatasetKind.GRID:
        _require(data.height >= 6 and data.width >= 6, "dataset", "grid images need at least 6x6 pixels")
        _require(data.num_classes <= 36, "dataset.num_classes", "at most 36 grid classes are supported")
    if data.kind is DatasetKind.BLOBS:
        _require(data.dim >= 2, "dataset.dim", "must be at least 2")
    if data.kind is DatasetKind.CSV:
        _require(data.path is not None, "dataset.path", "is required for csv datasets")

    model = config.model
    _require(model.embedding_dim >= 1, "model.embedding_dim", "must be at least 1")
    _require(all(w >= 1 for w in model.bottom_hidden), "model.bottom_hidden", "widths must be at least 1")
    _require(all(w >= 1 for w in model.top_hidden), "model.top_hidden", "widths must be at least 1")
    _require(model.lr > 0, "model.lr", "must be > 0")
    _require(model.batch_size >= 1, "model.batch_size", "must be at least 1")

    defense = config.defense
    _require(defense.dp_variance >= 0, "defense.dp_variance", "must be >= 0")
    _require(defense.anomaly_filter or defense.anomaly_budget is None, "defense.anomaly_budget",
             "needs anomaly_filter: true")
    budget = defense.resolved(config.attack).anomaly_budget
    if defense.anomaly_filter:
        _require(budget is not None, "defense.anomaly_budget", "is required when there is no attack budget to follow")
        _require(0 <= budget < 100, "defense.anomaly_budget", "must be in [0, 100)")
    _require(defense.num_trees >= 1, "defense.num_trees", "must be at least 1")
    _require(defense.subsample_size >= 2, "defense.subsample_size", "must be at least 2")
    _require(defense.refit_every >= 1, "defense.refit_every", "must be at least 1")

    split = config.split
    k = split.participants
    _require(k >= 1, "split.participants", "must be at least 1")
    features = num_features(data)
    if features is not None:
        units = data.width if data.kind is DatasetKind.GRID else features
        _require(k <= units, "split.participants", f"cannot split {units} columns between {k} participants")
    _require(len(set(split.adversary_ids)) == len(split.adversary_ids), "split.adversary_ids", "must be unique")
    _require(all(0 <= a < k for a in split.adversary_ids), "split.adversary_ids", f"must lie in [0, {k})")

    if config.attack is None:
        return
    attack = config.attack
    m = len(split.adversary_ids)
    if attack.enabled:
        _require(m >= 1, "split.adversary_ids", "an attack needs at least one adversary")
        _require(m < k, "split.adversary_ids", f"{m} adversaries leave no honest participant among {k}")
    if isinstance(attack.start_round, str):
        _require(attack.start_round == AUTO, "attack.start_round", f"must be an integer or '{AUTO}'")
    else:
        _require(0 < attack.start_round < config.total_rounds, "attack.start_round",
                 f"must lie strictly between 0 and total_rounds ({config.total_rounds})")
    _require(0 < attack.auto_start_fraction < 1, "attack.auto_start_fraction", "must be in (0, 1)")
    _require(0 <= attack.budget <= 100, "attack.budget", "must be in [0, 100]")
    _require(attack.epsilon is None or attack.epsilon >= 0, "attack.epsilon", "must be >= 0")
    _require(attack.epsilon_fraction >= 0, "attack.epsilon_fraction", "must be >= 0")
    _require(attack.poison_steps >= 0, "attack.poison_steps", "must be >= 0")
    _require(attack.poison_lr > 0, "attack.poison_lr", "must be > 0")
    _require(attack.refresh >= 1, "attack.refresh", "must be at least 1")
    _require(0 < attack.known_fraction <= 1, "attack.known_fraction", "must be in (0, 1]")
    _require(math.ceil(round(attack.known_fraction * data.num_classes, 9)) >= 2, "attack.known_fraction",
             "must leave the adversary at least two known classes")
    _require(attack.surrogate_epochs >= 0, "attack.surrogate_epochs", "must be >= 0")
    _require(attack.surrogate_lr > 0, "attack.surrogate_lr", "must be > 0")
    _require(attack.surrogate_hidden >= 1, "attack.surrogate_hidden", "must be at least 1")
    _require(0 <= attack.confidence <= 1, "attack.confidence", "must be in [0, 1]")
    _require(attack.feature_count is None or attack.feature_count >= 1, "attack.feature_count", "must be >= 1")

    if attack.enabled and m:
        _validate_trigger(config)


def _validate_trigger(config: ExperimentConfig) -> None:
    data, trigger, split = config.dataset, config.trigger, config.split
    shape = grid_shape(data)
    if trigger.mode is TriggerMode.TABULAR_OVERWRITE:
        return
    if data.kind is DatasetKind.BLOBS:
        raise ConfigError("trigger.mode", "a grid patch needs a grid dataset")
    if shape is None:
        return
    _require(trigger.height >= 1 and trigger.width >= 1, "trigger", "height and width must be at least 1")
    _require(trigger.height <= shape[0], "trigger.height", f"exceeds the grid height {shape[0]}")
    m = len(split.adversary_ids)
    _require(trigger.width >= m, "trigger.width", f"cannot be split between {m} adversaries")
    plan = SplitPlan.even(shape[0] * shape[1], split.participants, split.adversary_ids, shape)
    subs = split_trigger(config.trigger_spec(), m)
    for adversary, sub in zip(sorted(split.adversary_ids), subs):
        strip = plan.strip_shape(adversary)
        _require(sub.width <= strip[1], "trigger.width",
                 f"a {sub.height}x{sub.width} patch does not fit participant {adversary}'s "
                 f"{strip[0]}x{strip[1]} strip")


def _set(config: ExperimentConfig, block: str, **changes: Any) -> ExperimentConfig:
    if block == "attack" and config.attack is None:
        raise ConfigError("attack", "the base config has no attack to sweep")
    return replace(config, **{block: replace(getattr(config, block), **changes)})


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered not in ("true", "false"):
        raise ValueError(text)
    return lowered == "true"


def _start_fraction(config: ExperimentConfig, value: float) -> ExperimentConfig:
    start = int(round(value * config.total_rounds))
    return _set(config, "attack", start_round=min(max(start, 1), config.total_rounds - 1))


SWEEPABLE: Dict[str, Tuple[Callable[[str], Any], Callable[[ExperimentConfig, Any], ExperimentConfig]]] = {
    "start_round": (int, lambda c, v: _set(c, "attack", start_round=v)),
    "start_fraction": (float, _start_fraction),
    "budget": (float, lambda c, v: _set(c, "attack", budget=v)),
    "window": (int, lambda c, v: _set(c, "trigger", height=v, width=v)),
    "dp_variance": (float, lambda c, v: _set(c, "defense", dp_variance=v)),
    "anomaly_filter": (_parse_bool, lambda c, v: _set(c, "defense", anomaly_filter=v)),
    "anomaly_budget": (float, lambda c, v: _set(c, "defense", anomaly_filter=True, anomaly_budget=v)),
    "participants": (int, lambda c, v: _set(c, "split", participants=v)),
    "adversaries": (int, lambda c, v: _set(c, "split", adversary_ids=tuple(range(v)))),
    "selection": (SelectionStrategy, lambda c, v: _set(c, "attack", selection=v)),
    "placement": (Placement, lambda c, v: _set(c, "attack", placement=v)),
    "known_fraction": (float, lambda c, v: _set(c, "attack", known_fraction=v)),
}


def parse_axis_value(axis: str, text: str) -> Any:
    if axis not in SWEEPABLE:
        raise ConfigError("sweep.axis", f"'{axis}' is not sweepable; choose from {', '.join(SWEEPABLE)}")
    parse, _ = SWEEPABLE[axis]
    try:
        return parse(text.strip())
    except ValueError:
        raise ConfigError("sweep.values", f"{text!r} is not a valid value for '{axis}'") from None


def apply_axis(config: ExperimentConfig, axis: str, value: Any) -> ExperimentConfig:
    """Return ``config`` with one sweep axis set to ``value``, validated."""
    if axis not in SWEEPABLE:
        raise ConfigError("sweep.axis", f"'{axis}' is not sweepable; choose from {', '.join(SWEEPABLE)}")
    parse, setter = SWEEPABLE[axis]
    if isinstance(value, str):
        value = parse_axis_value(axis, value)
    updated = setter(config, value)
    validate(updated)
    return updated


def parse_list(text: str) -> Sequence[str]:
    return [item for item in text.split(",") if item.strip()]
