"""Split-learning protocol: participants embed, the server trains the top model.

Labels live only on :class:`Server`. Participants see their own shard and the
gradient the server routes back to them; nothing in this module hands a
participant a reference to the server or to another participant's shard.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, precision_score, recall_score

from .defense import EmbeddingDefense
from .errors import ShapeError
from .nn import DenseNet, backward, cross_entropy_with_grad, forward, sgd_step
from .sim_types import FeatureShard, Role, Window
from .trigger import TriggerSpec, apply_trigger, window_features

logger = logging.getLogger(__name__)


class PoisonHook(Protocol):
    """Lets an adversary-controlled participant swap its raw batch rows.

    Receives only the participant's own id, the batch sample ids and its own
    rows; must return rows of the same shape.
    """
    def __call__(self, participant_id: int, batch_ids: np.ndarray, rows: np.ndarray) -> np.ndarray: ...


@dataclass
class Participant:
    """A feature-hosting party: its shard and its bottom model, nothing else."""
    participant_id: int
    shard: FeatureShard
    bottom: DenseNet
    role: Role = Role.HONEST
    lr: float = 0.1

    def __post_init__(self) -> None:
        if self.bottom.input_dim != self.shard.width:
            raise ShapeError(
                f"Participant {self.participant_id}: bottom model takes {self.bottom.input_dim} "
                f"features but the shard has {self.shard.width}")

    @property
    def is_adversary(self) -> bool:
        return self.role is Role.ADVERSARY

    @property
    def embedding_dim(self) -> int:
        return self.bottom.output_dim

    def embed(self, rows: np.ndarray) -> List[np.ndarray]:
        return forward(self.bottom, rows)

    def apply_gradient(self, activations: Sequence[np.ndarray], grad: np.ndarray) -> None:
        param_grads, _ = backward(self.bottom, activations, grad)
        if self.lr > 0:
            self.bottom = sgd_step(self.bottom, param_grads, self.lr)


class Server:
    """Label owner: concatenates embeddings, trains the top model, routes gradients."""
    def __init__(
        self,
        top: DenseNet,
        labels: np.ndarray,
        lr: float = 0.1,
        defense: Optional[EmbeddingDefense] = None
    ) -> None:
        labels = np.asarray(labels, dtype=int)
        if labels.size and (labels.min() < 0 or labels.max() >= top.output_dim):
            raise ValueError(f"Labels must lie in [0, {top.output_dim})")
        self.top = top
        self._labels = labels
        self.lr = lr
        self.defense = defense

    @property
    def num_classes(self) -> int:
        return self.top.output_dim

    def label_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self._labels).tobytes()).hexdigest()

    @property
    def num_samples(self) -> int:
        return self._labels.size

    def labels_for(self, batch_ids: np.ndarray) -> np.ndarray:
        return self._labels[batch_ids]


@dataclass
class RoundTrace:
    """Everything exchanged in one training round."""
    round_index: int
    batch_ids: np.ndarray = field(repr=False)
    embeddings: Dict[int, np.ndarray] = field(repr=False)
    gradients: Dict[int, np.ndarray] = field(repr=False)
    loss: float
    excluded_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int), repr=False)


def concat_embeddings(batches: Sequence[Tuple[int, np.ndarray]]) -> np.ndarray:
    """Join embedding batches column-wise in ascending participant order."""
    if not batches:
        raise ShapeError("Nothing to concatenate")
    ids = [pid for pid, _ in batches]
    if len(set(ids)) != len(ids):
        raise ShapeError(f"Participant ids must be unique, got {ids}")
    ordered = sorted(batches, key=lambda item: item[0])
    rows = {np.asarray(batch).shape[0] for _, batch in ordered}
    if len(rows) != 1:
        raise ShapeError(f"Embedding batches disagree on row count: {sorted(rows)}")
    return np.concatenate([np.asarray(batch, dtype=np.float64) for _, batch in ordered], axis=1)


def embedding_offsets(participants: Sequence[Participant]) -> Dict[int, Tuple[int, int]]:
    """Column range of each participant inside the concatenated embedding."""
    offsets, cursor = {}, 0
    for participant in sorted(participants, key=lambda p: p.participant_id):
        offsets[participant.participant_id] = (cursor, cursor + participant.embedding_dim)
        cursor += participant.embedding_dim
    return offsets


def run_training_round(
    server: Server,
    participants: Sequence[Participant],
    batch_ids: np.ndarray,
    poison_hook: Optional[PoisonHook] = None,
    round_index: int = 0
) -> RoundTrace:
    """One pass of the split-learning loop over ``batch_ids``.

    Order: bottom forwards, (defense), concatenation, top forward, loss, top
    update, gradient split, bottom updates. Participant gradients are taken
    from the top model as it was when the loss was evaluated. Rows excluded
    by this round's :func:`screen_round` carry neither loss nor gradient.
    """
    batch_ids = np.asarray(batch_ids, dtype=int)
    offsets = embedding_offsets(participants)
    if server.top.input_dim != max(end for _, end in offsets.values()):
        raise ShapeError(
            f"Top model takes {server.top.input_dim} inputs but participants emit "
            f"{max(end for _, end in offsets.values())}")

    activations: Dict[int, List[np.ndarray]] = {}
    received: Dict[int, np.ndarray] = {}
    for participant in participants:
        rows = participant.shard.take(batch_ids)
        if participant.is_adversary and poison_hook is not None:
            poisoned = poison_hook(participant.participant_id, batch_ids, rows)
            if poisoned.shape != rows.shape:
                raise ShapeError(f"Poison hook returned {poisoned.shape}, expected {rows.shape}")
            rows = poisoned
        activations[participant.participant_id] = participant.embed(rows)
        embedding = activations[participant.participant_id][-1]
        if server.defense is not None:
            embedding = server.defense.perturb(embedding)
        received[participant.participant_id] = embedding

    labels = server.labels_for(batch_ids)
    keep = np.ones(batch_ids.size, dtype=bool)
    excluded = np.zeros(0, dtype=int)
    if server.defense is not None:
        excluded = server.defense.excluded_rows(batch_ids)
        keep[excluded] = False

    o_all = concat_embeddings(list(received.items()))
    top_activations = forward(server.top, o_all[keep])
    loss, grad_logits = cross_entropy_with_grad(top_activations[-1], labels[keep])
    top_grads, grad_kept = backward(server.top, top_activations, grad_logits)
    if excluded.size:
        grad_all = np.zeros_like(o_all)
        grad_all[keep] = grad_kept
    else:
        grad_all = grad_kept
    if server.lr > 0:
        server.top = sgd_step(server.top, top_grads, server.lr)

    gradients: Dict[int, np.ndarray] = {}
    for participant in participants:
        start, end = offsets[participant.participant_id]
        gradients[participant.participant_id] = grad_all[:, start:end]
        participant.apply_gradient(activations[participant.participant_id], gradients[participant.participant_id])

    logger.debug("Round %d: loss %.6f over %d rows", round_index, loss, int(keep.sum()))
    return RoundTrace(round_index, batch_ids, received, gradients, loss, batch_ids[excluded])


def screen_round(
    server: Server,
    participants: Sequence[Participant],
    poison_hook: Optional[PoisonHook] = None,
    round_index: int = 0
) -> np.ndarray:
    """Anomaly screening at the start of a round, over every training sample.

    Each participant forwards its whole shard (an adversary through its poison
    hook, as it would in training) and the server receives it noised. It
    scores each class and holds the excluded ids for every batch of the
    round. Returns those ids; empty when the server does not filter.
    """
    if server.defense is None or not server.defense.filters:
        return np.zeros(0, dtype=int)
    sample_ids = np.arange(server.num_samples)
    received: Dict[int, np.ndarray] = {}
    for participant in participants:
        rows = participant.shard.take(sample_ids)
        if participant.is_adversary and poison_hook is not None:
            rows = poison_hook(participant.participant_id, sample_ids, rows)
        received[participant.participant_id] = server.defense.perturb(participant.embed(rows)[-1])
    excluded = server.defense.exclusions(received, server.labels_for(sample_ids), round_index)
    logger.debug("Round %d: screening excluded %d of %d samples", round_index, excluded.size, sample_ids.size)
    return excluded


def _predict(server: Server, participants: Sequence[Participant], shards: Mapping[int, np.ndarray]) -> np.ndarray:
    batches = [(p.participant_id, p.embed(shards[p.participant_id])[-1]) for p in participants]
    return np.argmax(forward(server.top, concat_embeddings(batches))[-1], axis=1)


def _rows_by_participant(test_shards: Sequence[FeatureShard]) -> Dict[int, np.ndarray]:
    return {shard.participant_id: shard.rows for shard in test_shards}


@dataclass(frozen=True)
class MainTaskMetrics:
    accuracy: float
    precision: float
    recall: float


def evaluate_main_task(
    server: Server,
    participants: Sequence[Participant],
    test_shards: Sequence[FeatureShard],
    test_labels: np.ndarray
) -> MainTaskMetrics:
    """Clean test accuracy with macro precision and recall; defenses are not applied."""
    test_labels = np.asarray(test_labels, dtype=int)
    if test_labels.size == 0:
        raise ShapeError("Cannot evaluate on an empty test set")
    predictions = _predict(server, participants, _rows_by_participant(test_shards))
    return MainTaskMetrics(
        accuracy=float(accuracy_score(test_labels, predictions)),
        precision=float(precision_score(test_labels, predictions, average="macro", zero_division=0)),
        recall=float(recall_score(test_labels, predictions, average="macro", zero_division=0)),
    )


@dataclass(frozen=True)
class PlacedTrigger:
    """A trigger pinned to one adversary-controlled participant's slice."""
    participant_id: int
    spec: TriggerSpec
    window: Optional[Window] = None
    grid_shape: Optional[Tuple[int, int]] = None

    def apply(self, rows: np.ndarray) -> np.ndarray:
        return apply_trigger(rows, self.spec, self.window, self.grid_shape)

    def covered_features(self) -> np.ndarray:
        """Flat indices of the slice features the trigger overwrites, ascending."""
        if self.spec.is_grid:
            if self.window is None or self.window.area == 0:
                return np.zeros(0, dtype=int)
            return np.sort(window_features(self.window, self.grid_shape).ravel())
        return np.asarray(self.spec.indices, dtype=int)


def evaluate_asr(
    server: Server,
    participants: Sequence[Participant],
    triggers: Sequence[PlacedTrigger],
    source_class: int,
    target_class: int,
    test_shards: Sequence[FeatureShard],
    test_labels: np.ndarray
) -> float:
    """Fraction of triggered source-class test samples predicted as the target class."""
    test_labels = np.asarray(test_labels, dtype=int)
    sources = np.flatnonzero(test_labels == source_class)
    if sources.size == 0:
        raise ShapeError(f"No test samples of source class {source_class}")
    roles = {p.participant_id: p.role for p in participants}
    rows = {pid: shard_rows[sources] for pid, shard_rows in _rows_by_participant(test_shards).items()}
    for trigger in triggers:
        if roles.get(trigger.participant_id) is not Role.ADVERSARY:
            raise ValueError(f"Participant {trigger.participant_id} is not adversary-controlled")
        rows[trigger.participant_id] = trigger.apply(rows[trigger.participant_id])
    predictions = _predict(server, participants, rows)
    return float(np.mean(predictions == target_class))


def confusion_rate(
    server: Server,
    participants: Sequence[Participant],
    source_class: int,
    target_class: int,
    test_shards: Sequence[FeatureShard],
    test_labels: np.ndarray
) -> float:
    """Clean source-to-target confusion: the ASR of an empty trigger."""
    return evaluate_asr(server, participants, (), source_class, target_class, test_shards, test_labels)


