"""Shared types and enums for the simulator."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np

#: Label id given to samples the adversary's surrogate cannot place in its
#: known class set. Lies outside every valid class range ``[0, N)``.
UNRECOGNIZED = -1


class Activation(Enum):
    """Elementwise activation applied after a dense layer."""
    RELU = "relu"
    IDENTITY = "identity"


class Role(Enum):
    """Who controls a feature-hosting participant."""
    HONEST = "honest"
    ADVERSARY = "adversary"


class TriggerMode(Enum):
    """How a trigger overwrites an adversary's feature slice."""
    GRID_PATCH = "grid_patch"
    TABULAR_OVERWRITE = "tabular_overwrite"


class FillPattern(Enum):
    """Fill used inside a grid trigger window."""
    CONSTANT = "constant"
    CHECKERBOARD = "checkerboard"


class SelectionStrategy(Enum):
    """How the adversary picks its source and target classes."""
    RANDOM = "random"
    OPTIMAL = "optimal"


class Placement(Enum):
    """How the adversary places its grid trigger window."""
    SALIENCY = "saliency"
    RANDOM = "random"


@dataclass(frozen=True)
class Window:
    """A placed rectangle on a participant's grid strip (top-left origin)."""
    row: int
    col: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    def fits(self, grid_shape: Tuple[int, int]) -> bool:
        h, w = grid_shape
        return (
            self.row >= 0 and self.col >= 0 and
            self.height >= 0 and self.width >= 0 and
            self.row + self.height <= h and self.col + self.width <= w
        )


@dataclass(frozen=True)
class FeatureShard:
    """One participant's vertical slice of a feature matrix.

    ``column_range`` is the half-open range ``[start, end)`` of global
    feature indices held by the participant. Grid data is flattened
    column-major, so a strip of whole pixel columns is a contiguous range and
    ``grid_shape`` is the ``(height, strip_width)`` of that strip.
    """
    participant_id: int
    column_range: Tuple[int, int]
    rows: np.ndarray
    grid_shape: Optional[Tuple[int, int]] = None

    @property
    def width(self) -> int:
        return self.column_range[1] - self.column_range[0]

    @property
    def num_samples(self) -> int:
        return self.rows.shape[0]

    def take(self, sample_ids: np.ndarray) -> np.ndarray:
        return self.rows[np.asarray(sample_ids, dtype=int)]


@dataclass(frozen=True)
class ClassPair:
    """Source class whose triggered inputs should be classified as target."""
    source: int
    target: int

    def __post_init__(self) -> None:
        if self.source == self.target:
            raise ValueError(f"Source and target class must differ, got {self.source} twice")


@dataclass(frozen=True)
class AttackSchedule:
    """When and how hard the adversary poisons.

    ``budget`` is the poisoning budget p% in ``(0, 100]`` (0 is accepted and
    means no row is ever substituted). ``epsilon`` is the L2 bound of the
    learned target-side noise; ``None`` scales the mean per-sample norm of
    the estimated target class by ``epsilon_fraction``.
    """
    total_rounds: int
    start_round: int
    budget: float = 10.0
    epsilon: Optional[float] = None
    epsilon_fraction: float = 0.5
    selection: SelectionStrategy = SelectionStrategy.OPTIMAL
    poison_steps: int = 50
    poison_lr: float = 0.5
    refresh: int = 5

    def __post_init__(self) -> None:
        if not 0 < self.start_round < self.total_rounds:
            raise ValueError(
                f"Start round must lie strictly between 0 and {self.total_rounds}, got {self.start_round}")
        if not 0 <= self.budget <= 100:
            raise ValueError(f"Poisoning budget must be in [0, 100], got {self.budget}")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError(f"Epsilon must be >= 0, got {self.epsilon}")
        if self.epsilon_fraction < 0:
            raise ValueError(f"Epsilon fraction must be >= 0, got {self.epsilon_fraction}")
        if self.refresh < 1:
            raise ValueError(f"Refresh cadence must be >= 1, got {self.refresh}")


@dataclass(frozen=True)
class DefenseConfig:
    """Server-side countermeasures; all-zero knobs mean no defense."""
    dp_variance: float = 0.0
    anomaly_budget: float = 0.0
    num_trees: int = 100
    subsample_size: int = 256
    max_depth: Optional[int] = None
    refit_every: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dp_variance < 0:
            raise ValueError(f"DP variance must be >= 0, got {self.dp_variance}")
        if not 0 <= self.anomaly_budget <= 100:
            raise ValueError(f"Anomaly budget must be in [0, 100], got {self.anomaly_budget}")
        if self.num_trees < 1 or self.subsample_size < 2:
            raise ValueError("A forest needs at least one tree and a subsample of two points")
        if self.refit_every < 1:
            raise ValueError(f"Refit cadence must be >= 1, got {self.refit_every}")

    @property
    def enabled(self) -> bool:
        return self.dp_variance > 0 or self.anomaly_budget > 0


@dataclass(frozen=True)
class LabelEstimates:
    """Per-training-sample label guesses, ``UNRECOGNIZED`` where unsure."""
    labels: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def present_classes(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.labels) if c != UNRECOGNIZED)

    def members(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)
