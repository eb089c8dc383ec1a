"""Server-side countermeasures: Gaussian noise on embeddings and isolation-forest filtering."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, MutableMapping, Optional, Tuple

import numpy as np

from .errors import ShapeError
from .sim_types import DefenseConfig

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649


def average_path_length(n: np.ndarray) -> np.ndarray:
    """``c(n) = 2 H(n - 1) - 2 (n - 1) / n`` with ``H(i) = ln(i) + gamma``; zero for n <= 1."""
    n = np.asarray(n, dtype=np.float64)
    safe = np.maximum(n, 2.0)
    c = 2.0 * (np.log(safe - 1.0) + EULER_GAMMA) - 2.0 * (safe - 1.0) / safe
    return np.where(n > 1, c, 0.0)


def add_dp_noise(embeddings: np.ndarray, variance: float, rng: np.random.Generator) -> np.ndarray:
    """Add independent ``N(0, variance)`` noise to every entry.

    Zero variance returns an exact copy and leaves ``rng`` untouched.
    """
    if variance < 0:
        raise ValueError(f"Noise variance must be >= 0, got {variance}")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if variance == 0:
        return embeddings.copy()
    return embeddings + rng.normal(0.0, math.sqrt(variance), size=embeddings.shape)


@dataclass(frozen=True)
class IsolationTree:
    """A random axis-aligned partition tree stored as flat node arrays.

    Leaves have ``feature == -1``; ``size`` is the number of fit points that
    reached the node and ``adjustment`` its ``c(size)``.
    """
    feature: np.ndarray = field(repr=False)
    threshold: np.ndarray = field(repr=False)
    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)
    size: np.ndarray = field(repr=False)
    depth_limit: int = 0
    adjustment: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.adjustment is None:
            object.__setattr__(self, "adjustment", average_path_length(self.size))

    @property
    def num_nodes(self) -> int:
        return self.feature.shape[0]

    def path_lengths(self, points: np.ndarray) -> np.ndarray:
        """Depth of the leaf each point lands in, plus ``c(leaf size)``."""
        points = np.atleast_2d(points)
        node = np.zeros(points.shape[0], dtype=int)
        depth = np.zeros(points.shape[0])
        rows = np.arange(points.shape[0])
        for _ in range(self.depth_limit + 1):
            split_feature = self.feature[node]
            internal = split_feature >= 0
            if not internal.any():
                break
            goes_left = points[rows, np.maximum(split_feature, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(goes_left, self.left[node], self.right[node]), node)
            depth += internal
        return depth + self.adjustment[node]


@dataclass(frozen=True)
class IsolationForest:
    trees: Tuple[IsolationTree, ...]
    subsample_size: int
    num_features: int

    @property
    def normaliser(self) -> float:
        return float(average_path_length(self.subsample_size))

    def expected_path_length(self, points: np.ndarray) -> np.ndarray:
        total = np.zeros(np.atleast_2d(points).shape[0])
        for tree in self.trees:
            total += tree.path_lengths(points)
        return total / len(self.trees)

    def score(self, points: np.ndarray) -> np.ndarray:
        """Anomaly scores in (0, 1]; higher means easier to isolate."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if points.shape[1] != self.num_features:
            raise ShapeError(f"Forest was fit on {self.num_features} features, got {points.shape[1]}")
        normaliser = self.normaliser
        return np.array([2.0 ** (-float(e) / normaliser) for e in self.expected_path_length(points)])


def _grow_tree(points: np.ndarray, depth_limit: int, rng: np.random.Generator) -> IsolationTree:
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    size: List[int] = []

    def grow(rows: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(rows.shape[0])
        if depth >= depth_limit or rows.shape[0] <= 1:
            return node
        low, high = rows.min(axis=0), rows.max(axis=0)
        candidates = np.flatnonzero(high > low)
        if candidates.size == 0:
            return node
        split_feature = int(rng.choice(candidates))
        split_value = float(rng.uniform(low[split_feature], high[split_feature]))
        goes_left = rows[:, split_feature] <= split_value
        feature[node] = split_feature
        threshold[node] = split_value
        left[node] = grow(rows[goes_left], depth + 1)
        right[node] = grow(rows[~goes_left], depth + 1)
        return node

    grow(points, 0)
    return IsolationTree(
        feature=np.asarray(feature, dtype=int),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=int),
        right=np.asarray(right, dtype=int),
        size=np.asarray(size, dtype=int),
        depth_limit=depth_limit,
    )


def iforest_fit(points: np.ndarray, config: DefenseConfig, rng: np.random.Generator) -> IsolationForest:
    """Grow ``config.num_trees`` trees, each on a subsample of ``min(psi, n)`` points."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if n < 2:
        raise ShapeError(f"An isolation forest needs at least 2 points, got {n}")
    psi = min(config.subsample_size, n)
    depth_limit = config.max_depth if config.max_depth is not None else int(math.ceil(math.log2(psi)))
    trees = tuple(
        _grow_tree(points[rng.choice(n, size=psi, replace=False)], depth_limit, rng)
        for _ in range(config.num_trees)
    )
    return IsolationForest(trees, psi, points.shape[1])


def iforest_score(forest: IsolationForest, point: np.ndarray) -> float:
    """``2 ** (-E[h(point)] / c(psi))`` for a single point."""
    point = np.asarray(point, dtype=np.float64)
    if point.ndim != 1:
        raise ShapeError(f"Expected a single point, got shape {point.shape}")
    return float(forest.score(point[None, :])[0])


def exclusion_count(budget: float, class_size: int) -> int:
    return int(math.ceil(round(budget / 100.0 * class_size, 9)))


def filter_class_anomalies(
    embeddings: Mapping[int, np.ndarray],
    labels: np.ndarray,
    budget: float,
    config: DefenseConfig,
    rng: np.random.Generator,
    forests: Optional[MutableMapping[Tuple[int, int], IsolationForest]] = None,
    refit: bool = True
) -> np.ndarray:
    """Rows to leave out of this round's loss: per class and participant, the
    ``ceil(budget% * class size)`` rows with the highest anomaly scores.

    ``forests`` caches fitted forests by ``(participant, class)``; with
    ``refit=False`` cached forests are reused for scoring. Classes with a
    single member cannot be fit and are left alone.
    """
    if not 0 <= budget < 100:
        raise ValueError(f"Anomaly budget must be in [0, 100), got {budget}")
    labels = np.asarray(labels, dtype=int)
    excluded: List[np.ndarray] = []
    if budget == 0:
        return np.zeros(0, dtype=int)
    forests = {} if forests is None else forests
    for class_id in np.unique(labels):
        members = np.flatnonzero(labels == class_id)
        count = exclusion_count(budget, members.size)
        if members.size < 2 or count == 0:
            continue
        for participant_id in sorted(embeddings):
            points = embeddings[participant_id][members]
            key = (participant_id, int(class_id))
            if refit or key not in forests:
                forests[key] = iforest_fit(points, config, rng)
            scores = forests[key].score(points)
            worst = np.argsort(-scores, kind="stable")[:count]
            excluded.append(members[worst])
    if not excluded:
        return np.zeros(0, dtype=int)
    return np.unique(np.concatenate(excluded))


class EmbeddingDefense:
    """Applies a :class:`DefenseConfig` to the embeddings the server receives.

    Noise is drawn for every batch. Anomaly filtering works per round: at the
    start of each round the server scores every training sample of every
    class, and the excluded ids stay out of the loss for the whole round.
    Forests are refit every ``refit_every`` rounds and reused in between.
    Owns its own random stream so switching a defense on never disturbs the
    rest of an experiment.
    """
    def __init__(self, config: DefenseConfig) -> None:
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self._forests: Dict[Tuple[int, int], IsolationForest] = {}
        self.excluded = np.zeros(0, dtype=int)

    @property
    def filters(self) -> bool:
        return self.config.anomaly_budget > 0

    def perturb(self, embeddings: np.ndarray) -> np.ndarray:
        return add_dp_noise(embeddings, self.config.dp_variance, self.rng)

    def exclusions(self, embeddings: Mapping[int, np.ndarray], labels: np.ndarray, round_index: int) -> np.ndarray:
        """Score whole classes and remember the excluded sample ids for this round."""
        if not self.filters:
            self.excluded = np.zeros(0, dtype=int)
            return self.excluded
        refit = round_index % self.config.refit_every == 0
        self.excluded = filter_class_anomalies(
            embeddings, labels, self.config.anomaly_budget, self.config, self.rng,
            forests=self._forests, refit=refit)
        logger.debug("Round %d: excluded %d of %d samples as anomalous", round_index, self.excluded.size,
                     np.asarray(labels).size)
        return self.excluded

    def excluded_rows(self, batch_ids: np.ndarray) -> np.ndarray:
        """Positions in ``batch_ids`` that this round's screening excluded."""
        return np.flatnonzero(np.isin(batch_ids, self.excluded))
