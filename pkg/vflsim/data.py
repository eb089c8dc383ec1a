"""Datasets: synthetic generation, CSV ingestion, vertical splits and auxiliary sets."""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from .errors import DataError
from .sim_types import FeatureShard
from .templates import ClassTemplates

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Dataset:
    """A labelled feature matrix.

    Grid datasets carry ``grid_shape = (height, width)`` and store each image
    column-major. ``ids`` are stable sample identifiers that survive subsetting.
    """
    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    num_classes: int
    grid_shape: Optional[Tuple[int, int]] = None
    ids: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=int)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise DataError(f"Features {features.shape} and labels {labels.shape} do not line up")
        if not np.isfinite(features).all():
            raise DataError("Features must be finite")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"Labels must lie in [0, {self.num_classes})")
        if self.grid_shape is not None and self.grid_shape[0] * self.grid_shape[1] != features.shape[1]:
            raise DataError(f"Grid {self.grid_shape} does not match {features.shape[1]} features")
        ids = np.arange(features.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=int)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return replace(self, features=self.features[rows], labels=self.labels[rows], ids=self.ids[rows])


@dataclass(frozen=True)
class SplitPlan:
    """How the feature space is cut between the K participants.

    ``column_ranges[i]`` is participant ``i``'s half-open feature range;
    ``adversary_ids`` are the M participants the adversary controls.
    """
    column_ranges: Tuple[Tuple[int, int], ...]
    adversary_ids: Tuple[int, ...] = ()
    grid_shape: Optional[Tuple[int, int]] = None

    @property
    def num_participants(self) -> int:
        return len(self.column_ranges)

    @classmethod
    def even(
        cls,
        num_features: int,
        participants: int,
        adversary_ids: Sequence[int] = (),
        grid_shape: Optional[Tuple[int, int]] = None
    ) -> "SplitPlan":
        """Near-equal contiguous ranges, wider ones first; grids split on whole pixel columns."""
        unit, units = (grid_shape[0], grid_shape[1]) if grid_shape else (1, num_features)
        if not 1 <= participants <= units:
            raise DataError(f"Cannot split {units} columns between {participants} participants")
        widths = [units // participants + (1 if i < units % participants else 0) for i in range(participants)]
        edges = np.concatenate([[0], np.cumsum(widths)]) * unit
        ranges = tuple((int(a), int(b)) for a, b in zip(edges, edges[1:]))
        return cls(ranges, tuple(sorted(adversary_ids)), grid_shape)

    def validate(self, num_features: int) -> None:
        cursor = 0
        for pid, (start, end) in enumerate(self.column_ranges):
            if start != cursor or end <= start:
                raise DataError(f"Participant {pid} range [{start}, {end}) leaves a gap or overlaps at {cursor}")
            if self.grid_shape and (start % self.grid_shape[0] or end % self.grid_shape[0]):
                raise DataError(f"Participant {pid} range [{start}, {end}) cuts through a pixel column")
            cursor = end
        if cursor != num_features:
            raise DataError(f"Ranges cover [0, {cursor}) but there are {num_features} features")
        if any(not 0 <= a < self.num_participants for a in self.adversary_ids):
            raise DataError(f"Adversary ids {self.adversary_ids} are not participants")

    def strip_shape(self, participant_id: int) -> Optional[Tuple[int, int]]:
        if self.grid_shape is None:
            return None
        start, end = self.column_ranges[participant_id]
        return (self.grid_shape[0], (end - start) // self.grid_shape[0])


@dataclass(frozen=True)
class AuxiliarySet:
    """The adversary's small labelled set, disjoint from the training samples.

    ``features`` are aligned to whichever slice the set was cut to; the full
    rows are only ever seen by the harness before it hands out slices.
    """
    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    known_classes: Tuple[int, ...]
    num_classes: int
    ids: np.ndarray = field(repr=False)
    grid_shape: Optional[Tuple[int, int]] = None

    @property
    def class_counts(self) -> dict:
        return {c: int(np.sum(self.labels == c)) for c in self.known_classes}

    def for_shard(self, column_range: Tuple[int, int], grid_shape: Optional[Tuple[int, int]] = None) -> "AuxiliarySet":
        start, end = column_range
        return replace(self, features=self.features[:, start:end], grid_shape=grid_shape)

    def restrict(self, classes: Sequence[int]) -> "AuxiliarySet":
        """Keep only the samples of ``classes``, which become the known set."""
        known = tuple(sorted(int(c) for c in classes))
        keep = np.isin(self.labels, known)
        return replace(self, features=self.features[keep], labels=self.labels[keep], ids=self.ids[keep],
                       known_classes=known)


def choose_known_classes(num_classes: int, known_fraction: float, rng: np.random.Generator) -> Tuple[int, ...]:
    """``ceil(known_fraction * num_classes)`` uniformly chosen class ids, ascending."""
    if not 0 < known_fraction <= 1:
        raise DataError(f"Known-class fraction must be in (0, 1], got {known_fraction}")
    num_known = max(1, math.ceil(round(known_fraction * num_classes, 9)))
    return tuple(int(c) for c in np.sort(rng.choice(num_classes, size=num_known, replace=False)))


def generate_blobs(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float,
    distance: float,
    rng: np.random.Generator,
    close_ratio: float = 0.5
) -> Dataset:
    """Gaussian blobs around class centres at controlled distances.

    Centres start on a scaled simplex (pairwise distance ``distance``), class 1
    is pulled towards class 0 by ``close_ratio`` so (0, 1) is the unique
    closest pair, and a random rotation spreads every centre over all
    features so each vertical slice carries class signal.
    """
    if num_classes < 2 or dim < 2:
        raise DataError(f"Need at least 2 classes and 2 features, got {num_classes} and {dim}")
    if dim >= num_classes:
        centres = np.zeros((num_classes, dim))
        centres[:, :num_classes] = np.eye(num_classes) * distance / np.sqrt(2.0)
        rotation, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        centres = centres @ rotation.T
    else:
        directions = rng.normal(size=(num_classes, dim))
        centres = directions / np.linalg.norm(directions, axis=1, keepdims=True) * distance / np.sqrt(2.0)
    centres[1] = centres[0] + close_ratio * (centres[1] - centres[0])

    labels = np.repeat(np.arange(num_classes), per_class)
    features = centres[labels] + spread * rng.normal(size=(labels.size, dim))
    order = rng.permutation(labels.size)
    logger.debug("Generated %d blobs over %d classes in %d dimensions", labels.size, num_classes, dim)
    return Dataset(features[order], labels[order], num_classes)


def generate_grid_images(
    num_classes: int,
    height: int,
    width: int,
    per_class: int,
    noise: float,
    rng: np.random.Generator
) -> Dataset:
    """Noisy copies of a fixed per-class template, clamped to [0, 1]."""
    templates = ClassTemplates(num_classes, height, width).flat()
    labels = np.repeat(np.arange(num_classes), per_class)
    features = np.clip(templates[labels] + noise * rng.normal(size=(labels.size, height * width)), 0.0, 1.0)
    order = rng.permutation(labels.size)
    logger.debug("Generated %d %dx%d grid images over %d classes", labels.size, height, width, num_classes)
    return Dataset(features[order], labels[order], num_classes, grid_shape=(height, width))


def split_train_test(dataset: Dataset, test_per_class: int, rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    """Hold out ``test_per_class`` random samples of every class."""
    test_rows = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size < test_per_class:
            raise DataError(f"Class {c} has {members.size} samples, cannot hold out {test_per_class}")
        test_rows.append(rng.choice(members, size=test_per_class, replace=False))
    test_rows = np.sort(np.concatenate(test_rows))
    train_rows = np.setdiff1d(np.arange(dataset.num_samples), test_rows)
    return dataset.subset(train_rows), dataset.subset(test_rows)


def vertical_split(dataset: Dataset, plan: SplitPlan) -> List[FeatureShard]:
    """Cut the feature matrix into one shard per participant."""
    plan.validate(dataset.num_features)
    if plan.grid_shape is not None and plan.grid_shape != dataset.grid_shape:
        raise DataError(f"Plan grid {plan.grid_shape} does not match dataset grid {dataset.grid_shape}")
    return [
        FeatureShard(pid, (start, end), dataset.features[:, start:end].copy(), plan.strip_shape(pid))
        for pid, (start, end) in enumerate(plan.column_ranges)
    ]


def sample_auxiliary(
    dataset: Dataset,
    per_class: int,
    known_fraction: float,
    rng: np.random.Generator
) -> Tuple[AuxiliarySet, Dataset]:
    """Draw the adversary's auxiliary set and return it with the remaining training set.

    Only ``ceil(known_fraction * N)`` uniformly chosen classes are known to the
    adversary; their samples are removed from the training set.
    """
    known = choose_known_classes(dataset.num_classes, known_fraction, rng)
    rows = []
    for c in known:
        members = np.flatnonzero(dataset.labels == c)
        if members.size < per_class:
            raise DataError(f"Class {c} has {members.size} samples, cannot draw {per_class} auxiliary ones")
        rows.append(rng.choice(members, size=per_class, replace=False))
    rows = np.sort(np.concatenate(rows))
    remaining = dataset.subset(np.setdiff1d(np.arange(dataset.num_samples), rows))

    aux = AuxiliarySet(
        features=dataset.features[rows],
        labels=dataset.labels[rows],
        known_classes=known,
        num_classes=dataset.num_classes,
        ids=dataset.ids[rows],
        grid_shape=dataset.grid_shape,
    )
    logger.info("Sampled %d auxiliary samples from %d known classes", rows.size, len(known))
    return aux, remaining


@dataclass(frozen=True)
class CsvSchema:
    """Which CSV columns hold the label and the features.

    ``feature_columns = None`` takes every column but the label, in file order.
    Unset grid dimensions and class count are read from the sidecar metadata
    file ``<name>.meta.yaml`` when it exists.
    """
    label_column: str = "label"
    feature_columns: Optional[Tuple[str, ...]] = None
    grid_shape: Optional[Tuple[int, int]] = None
    num_classes: Optional[int] = None


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.yaml")


def load_csv(path: PathLike, schema: CsvSchema = CsvSchema()) -> Dataset:
    """Parse a ``label,f0,f1,...`` file into a :class:`Dataset`."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"No such CSV file: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.ParserError as exc:
        raise DataError(f"{path}: ragged row ({exc})") from exc

    ragged = frame.isna().any(axis=1).to_numpy()
    if ragged.any():
        raise DataError(f"{path}: ragged row at line {int(np.argmax(ragged)) + 2}")
    if schema.label_column not in frame.columns:
        raise DataError(f"{path}: missing label column '{schema.label_column}'")
    columns = list(schema.feature_columns or [c for c in frame.columns if c != schema.label_column])
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing feature columns {missing}")

    numeric = frame[[schema.label_column] + columns].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        column = numeric.columns[col]
        raise DataError(f"{path}: non-numeric value {frame[column].iloc[row]!r} at line {row + 2}, column '{column}'")

    labels = numeric[schema.label_column].to_numpy()
    if not np.all(labels == np.round(labels)):
        raise DataError(f"{path}: labels must be integers")
    labels = labels.astype(int)

    meta = {}
    if sidecar_path(path).is_file():
        meta = yaml.safe_load(sidecar_path(path).read_text(encoding="utf-8")) or {}
    grid_shape = schema.grid_shape or (tuple(meta["grid_shape"]) if meta.get("grid_shape") else None)
    num_classes = schema.num_classes or meta.get("num_classes") or int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(f"{path}: labels must lie in [0, {num_classes})")

    logger.info("Loaded %d samples with %d features from %s", len(frame), len(columns), path)
    return Dataset(numeric[columns].to_numpy(dtype=np.float64), labels, int(num_classes), grid_shape=grid_shape)


def write_csv(dataset: Dataset, path: PathLike) -> Path:
    """Write ``dataset`` at full precision, with a sidecar for class count and grid."""
    path = Path(path)
    frame = pd.DataFrame(dataset.features, columns=[f"f{i}" for i in range(dataset.num_features)])
    frame.insert(0, "label", dataset.labels)
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
    meta = {"num_classes": dataset.num_classes}
    if dataset.grid_shape is not None:
        meta["grid_shape"] = list(dataset.grid_shape)
    sidecar_path(path).write_text(yaml.safe_dump(meta), encoding="utf-8")
    return path
