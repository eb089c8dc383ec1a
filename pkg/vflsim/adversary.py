"""The clean-label backdoor adversary.

An adversary sees only what its compromised participant sees: its own shard,
its own bottom model, the gradients routed to it and a small auxiliary set.
From those it infers training labels with a surrogate top model, picks a
source and target class, places a trigger where its surrogate is most
sensitive, plants the trigger in a budget of target-class rows and perturbs
the rest of each row so its embedding sits on top of the triggered source
embeddings. Labels are never touched.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .data import AuxiliarySet
from .errors import NumericalError, ProtocolError, ShapeError
from .nn import (DenseLayer, DenseNet, LayerGrad, backward, compose, cross_entropy_with_grad, forward, input_saliency,
                 sgd_step, softmax)
from .protocol import Participant, PlacedTrigger
from .sim_types import (UNRECOGNIZED, Activation, AttackSchedule, ClassPair, LabelEstimates, Placement,
                        SelectionStrategy)
from .trigger import TriggerSpec, plan_trigger_features, plan_trigger_window, random_window, to_grid

logger = logging.getLogger(__name__)

MAX_HALVINGS = 20


@dataclass(frozen=True)
class SurrogateSettings:
    """How the adversary trains its stand-in for the server's top model."""
    epochs: int = 300
    lr: float = 0.2
    hidden: int = 32
    confidence: float = 0.5
    weight_decay: float = 1e-2


@dataclass(frozen=True)
class SurrogateModel:
    """A classifier over the adversary's embeddings, covering its known classes.

    ``scaler`` standardises embeddings with statistics of the auxiliary set;
    ``net`` maps them to one logit per known class.
    """
    scaler: DenseLayer
    net: DenseNet
    known_classes: Tuple[int, ...]
    num_classes: int
    accuracy: float = 0.0

    def head(self) -> DenseNet:
        return DenseNet((self.scaler,) + self.net.layers)

    def probabilities(self, embeddings: np.ndarray) -> np.ndarray:
        return softmax(forward(self.head(), embeddings)[-1])


def _standardiser(embeddings: np.ndarray) -> DenseLayer:
    mean = embeddings.mean(axis=0)
    scale = embeddings.std(axis=0)
    scale[scale == 0] = 1.0
    return DenseLayer(weight=np.diag(1.0 / scale), bias=-mean / scale, activation=Activation.IDENTITY)


def train_surrogate(
    bottom: DenseNet,
    aux: AuxiliarySet,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    hidden: int = 32,
    weight_decay: float = 1e-2
) -> SurrogateModel:
    """Fit a one-hidden-layer classifier on ``(bottom(aux sample), aux label)`` pairs.

    The bottom model stays frozen. ``weight_decay`` adds an L2 penalty on the
    weights so a small auxiliary set is not simply memorised.
    """
    if weight_decay < 0:
        raise ValueError(f"Weight decay must be >= 0, got {weight_decay}")
    if aux.labels.size == 0:
        raise ShapeError("The auxiliary set is empty")
    known = tuple(int(c) for c in np.unique(aux.labels))
    if len(known) < 2:
        raise ValueError(f"The auxiliary set covers a single class ({known[0]}); no class pair can be chosen")

    embeddings = forward(bottom, aux.features)[-1]
    scaler = _standardiser(embeddings)
    inputs = forward(DenseNet((scaler,)), embeddings)[-1]
    targets = np.searchsorted(known, aux.labels)

    net = DenseNet.initialise([inputs.shape[1], hidden, len(known)], rng)
    for _ in range(epochs):
        activations = forward(net, inputs)
        _, grad = cross_entropy_with_grad(activations[-1], targets)
        param_grads, _ = backward(net, activations, grad)
        if weight_decay:
            param_grads = [LayerGrad(g.weight + weight_decay * layer.weight, g.bias)
                           for g, layer in zip(param_grads, net.layers)]
        net = sgd_step(net, param_grads, lr)

    accuracy = float(np.mean(np.argmax(forward(net, inputs)[-1], axis=1) == targets))
    logger.info("Surrogate trained on %d auxiliary samples over %d classes: accuracy %.3f",
                aux.labels.size, len(known), accuracy)
    return SurrogateModel(scaler, net, known, aux.num_classes, accuracy)


def infer_labels(
    surrogate: SurrogateModel,
    bottom: DenseNet,
    shard_rows: np.ndarray,
    confidence: float = 0.5
) -> LabelEstimates:
    """Label every training row with the surrogate's most likely known class.

    When the surrogate knows only part of the label space, rows whose top
    probability is below ``confidence`` are marked ``UNRECOGNIZED``.
    """
    probabilities = surrogate.probabilities(forward(bottom, shard_rows)[-1])
    labels = np.asarray(surrogate.known_classes)[np.argmax(probabilities, axis=1)]
    if len(surrogate.known_classes) < surrogate.num_classes:
        labels = np.where(probabilities.max(axis=1) < confidence, UNRECOGNIZED, labels)
    return LabelEstimates(labels.astype(int))


def vote_labels(estimates: Sequence[LabelEstimates]) -> LabelEstimates:
    """Per-sample majority over several adversaries' estimates.

    Ties go to the lowest class id; ``UNRECOGNIZED`` counts as a vote but
    loses every tie against a real class.
    """
    if len(estimates) < 2:
        raise ValueError(f"A vote needs estimates from at least two adversaries, got {len(estimates)}")
    lengths = {len(e) for e in estimates}
    if len(lengths) != 1:
        raise ShapeError(f"Label estimates differ in length: {sorted(lengths)}")
    ballots = np.stack([e.labels for e in estimates])
    candidates = [int(c) for c in np.unique(ballots) if c != UNRECOGNIZED] + [UNRECOGNIZED]
    counts = np.stack([(ballots == c).sum(axis=0) for c in candidates])
    return LabelEstimates(np.asarray(candidates)[np.argmax(counts, axis=0)])


def class_distance_table(embeddings: np.ndarray, estimates: LabelEstimates) -> Dict[Tuple[int, int], float]:
    """Mean L2 distance over all cross pairs, for every unordered class pair."""
    groups = {c: embeddings[estimates.members(c)] for c in estimates.present_classes()}
    return {(a, b): float(cdist(groups[a], groups[b]).mean()) for a, b in combinations(sorted(groups), 2)}


def select_classes(
    strategy: SelectionStrategy,
    bottom: DenseNet,
    shard_rows: np.ndarray,
    estimates: LabelEstimates,
    rng: np.random.Generator
) -> ClassPair:
    """Pick the (source, target) pair.

    ``RANDOM`` draws two distinct estimated classes; ``OPTIMAL`` takes the
    pair closest in the adversary's embedding space with the lower class id
    as source.
    """
    classes = estimates.present_classes()
    if len(classes) < 2:
        raise ValueError(f"Need at least two estimated classes, got {classes}")
    if strategy is SelectionStrategy.RANDOM:
        source, target = rng.choice(classes, size=2, replace=False)
        return ClassPair(int(source), int(target))

    table = class_distance_table(forward(bottom, shard_rows)[-1], estimates)
    source, target = min(table, key=lambda pair: (table[pair], pair))
    logger.debug("Class distances: %s", table)
    return ClassPair(source, target)


def mean_saliency(surrogate: SurrogateModel, bottom: DenseNet, rows: np.ndarray) -> np.ndarray:
    """Average input saliency over ``rows``, each at its surrogate-predicted class."""
    model = compose(bottom, surrogate.head())
    predicted = np.argmax(forward(model, rows)[-1], axis=1)
    return input_saliency(model, rows, predicted).mean(axis=0)


def _project(noise: np.ndarray, epsilon: float) -> np.ndarray:
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    return noise * np.minimum(1.0, epsilon / np.maximum(norms, 1e-300))


@dataclass(frozen=True)
class PoisonResult:
    """Perturbed target rows, the noise added to them and the objective per accepted step."""
    samples: np.ndarray = field(repr=False)
    noise: np.ndarray = field(repr=False)
    objectives: Tuple[float, ...] = ()


def optimize_poison(
    bottom: DenseNet,
    triggered_sources: np.ndarray,
    targets: np.ndarray,
    epsilon: float,
    steps: int,
    inner_lr: float,
    frozen: Optional[np.ndarray] = None
) -> PoisonResult:
    """Projected gradient descent on per-row noise added to ``targets``.

    Minimises the mean squared distance between ``bottom(target_j + noise_j)``
    and the embedding of triggered source ``j mod S``, keeping every noise row
    inside the L2 ball of radius ``epsilon``. Features listed in ``frozen``
    never receive noise. A step is accepted only if it lowers the objective;
    the step size is halved up to ``MAX_HALVINGS`` times before giving up.
    """
    if epsilon < 0:
        raise ValueError(f"Epsilon must be >= 0, got {epsilon}")
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    triggered_sources = np.atleast_2d(np.asarray(triggered_sources, dtype=np.float64))
    if targets.shape[0] == 0 or triggered_sources.shape[0] == 0:
        raise ShapeError("Both the triggered source set and the target subset must be non-empty")
    free = np.ones(targets.shape[1])
    if frozen is not None and np.size(frozen):
        frozen = np.asarray(frozen, dtype=int)
        if frozen.min() < 0 or frozen.max() >= targets.shape[1]:
            raise ShapeError(f"Frozen features must lie in [0, {targets.shape[1]})")
        free[frozen] = 0.0
    anchors = forward(bottom, triggered_sources)[-1][np.arange(targets.shape[0]) % triggered_sources.shape[0]]

    def objective(samples: np.ndarray) -> Tuple[float, np.ndarray]:
        activations = forward(bottom, samples)
        diff = activations[-1] - anchors
        value = float(np.mean(np.sum(diff ** 2, axis=1)))
        if not math.isfinite(value):
            raise NumericalError("Poison objective is not finite")
        _, grad = backward(bottom, activations, 2.0 * diff / samples.shape[0])
        return value, grad * free

    noise = np.zeros_like(targets)
    value, grad = objective(targets)
    objectives = [value]
    if epsilon == 0:
        return PoisonResult(targets.copy(), noise, tuple(objectives))

    for _ in range(steps):
        lr = inner_lr
        for _ in range(MAX_HALVINGS + 1):
            candidate = _project(noise - lr * grad, epsilon)
            candidate_value, candidate_grad = objective(targets + candidate)
            if candidate_value < value:
                noise, value, grad = candidate, candidate_value, candidate_grad
                objectives.append(value)
                break
            lr /= 2.0
        else:
            break
    return PoisonResult(targets + noise, noise, tuple(objectives))


@dataclass(frozen=True)
class AttackAction:
    """What the adversary did going into one protocol round."""
    round_index: int
    poisoned_ids: np.ndarray = field(repr=False)
    refreshed: bool = False
    objective: Optional[float] = None


class Adversary:
    """State and behaviour of one adversary-controlled participant."""
    def __init__(
        self,
        participant: Participant,
        aux: AuxiliarySet,
        schedule: AttackSchedule,
        trigger: TriggerSpec,
        rng: np.random.Generator,
        surrogate: SurrogateSettings = SurrogateSettings(),
        placement: Placement = Placement.SALIENCY,
        feature_count: Optional[int] = None
    ) -> None:
        if not participant.is_adversary:
            raise ValueError(f"Participant {participant.participant_id} is not adversary-controlled")
        if aux.features.shape[1] != participant.shard.width:
            raise ShapeError("The auxiliary set is not aligned to the adversary's slice")
        self.participant = participant
        self.aux = aux
        self.schedule = schedule
        self.trigger = trigger
        self.rng = rng
        self.settings = surrogate
        self.placement = placement
        self.feature_count = feature_count

        self.surrogate: Optional[SurrogateModel] = None
        self.estimates: Optional[LabelEstimates] = None
        self.pair: Optional[ClassPair] = None
        self.placed: Optional[PlacedTrigger] = None
        self.poison_ids = np.zeros(0, dtype=int)
        self.epsilon = 0.0
        self._triggered_sources: Optional[np.ndarray] = None
        self._poison_base: Optional[np.ndarray] = None
        self._poisoned_rows: Optional[np.ndarray] = None
        self._armed_round: Optional[int] = None

    @property
    def participant_id(self) -> int:
        return self.participant.participant_id

    @property
    def bottom(self) -> DenseNet:
        return self.participant.bottom

    @property
    def rows(self) -> np.ndarray:
        return self.participant.shard.rows

    @property
    def armed(self) -> bool:
        return self._armed_round is not None

    def extract(self) -> LabelEstimates:
        """Train the surrogate on the current bottom model and label the own shard."""
        self.surrogate = train_surrogate(
            self.bottom, self.aux, self.settings.epochs, self.settings.lr, self.rng, self.settings.hidden,
            self.settings.weight_decay)
        self.estimates = infer_labels(self.surrogate, self.bottom, self.rows, self.settings.confidence)
        return self.estimates

    def choose_pair(self, estimates: LabelEstimates) -> ClassPair:
        return select_classes(self.schedule.selection, self.bottom, self.rows, estimates, self.rng)

    def draw_poison_ids(self, estimates: LabelEstimates, pair: ClassPair) -> np.ndarray:
        """``floor(p% * |estimated target class|)`` random target-class sample ids."""
        members = estimates.members(pair.target)
        count = int(math.floor(round(self.schedule.budget / 100.0 * members.size, 9)))
        return np.sort(self.rng.choice(members, size=count, replace=False)) if count else np.zeros(0, dtype=int)

    def _place_trigger(self, source_rows: np.ndarray) -> PlacedTrigger:
        grid_shape = self.participant.shard.grid_shape
        if self.trigger.is_grid:
            if grid_shape is None:
                raise ShapeError("A grid trigger needs a participant holding a grid strip")
            if self.placement is Placement.RANDOM:
                window = random_window(grid_shape, self.trigger.height, self.trigger.width, self.rng)
            else:
                saliency = mean_saliency(self.surrogate, self.bottom, source_rows)
                window = plan_trigger_window(to_grid(saliency, grid_shape), self.trigger.height, self.trigger.width)
            return PlacedTrigger(self.participant_id, self.trigger, window, grid_shape)

        spec = self.trigger
        if not spec.indices:
            count = self.feature_count or int(math.ceil(self.participant.shard.width / 2))
            if self.placement is Placement.RANDOM:
                indices = self.rng.choice(self.participant.shard.width, size=count, replace=False)
            else:
                indices = plan_trigger_features(mean_saliency(self.surrogate, self.bottom, source_rows), count)
            spec = replace(spec, indices=tuple(int(i) for i in indices))
        return PlacedTrigger(self.participant_id, spec)

    def arm(self, round_index: int, estimates: LabelEstimates, pair: ClassPair, poison_ids: np.ndarray) -> None:
        """Fix the class pair, trigger placement and poisoned rows at round R_n."""
        if round_index < self.schedule.start_round:
            raise ProtocolError(f"Cannot arm at round {round_index}, the attack starts at {self.schedule.start_round}")
        if self.surrogate is None:
            raise ProtocolError("The surrogate has not been trained yet")
        self.estimates = estimates
        self.pair = pair
        self.poison_ids = np.asarray(poison_ids, dtype=int)

        source_rows = self.rows[estimates.members(pair.source)]
        if source_rows.shape[0] == 0:
            raise ValueError(f"No training rows are estimated to be of source class {pair.source}")
        self.placed = self._place_trigger(source_rows)
        self._triggered_sources = self.placed.apply(source_rows)
        # poisoned rows carry the trigger too; only the remaining features get noise
        self._poison_base = self.placed.apply(self.rows[self.poison_ids])

        if self.schedule.epsilon is not None:
            self.epsilon = self.schedule.epsilon
        else:
            target_rows = self.rows[estimates.members(pair.target)]
            mean_norm = float(np.linalg.norm(target_rows, axis=1).mean()) if target_rows.size else 0.0
            self.epsilon = self.schedule.epsilon_fraction * mean_norm
        self._armed_round = round_index
        logger.info(
            "Participant %d armed at round %d: source %d, target %d, %d poisoned rows, epsilon %.4f, trigger %s",
            self.participant_id, round_index, pair.source, pair.target, self.poison_ids.size, self.epsilon,
            self.placed.window or self.placed.spec.indices)

    def run_attack_phase(self, round_index: int) -> AttackAction:
        """Refresh the poisoned rows when due; the hook substitutes them this round."""
        if round_index < self.schedule.start_round:
            raise ProtocolError(
                f"Round {round_index} is still label inference; poisoning starts at {self.schedule.start_round}")
        if not self.armed:
            raise ProtocolError("The adversary has not been armed")
        due = (round_index - self._armed_round) % self.schedule.refresh == 0 or self._poisoned_rows is None
        objective = None
        if due and self.poison_ids.size:
            result = optimize_poison(
                self.bottom, self._triggered_sources, self._poison_base, self.epsilon,
                self.schedule.poison_steps, self.schedule.poison_lr, frozen=self.placed.covered_features())
            self._poisoned_rows = result.samples
            objective = result.objectives[-1]
            logger.debug("Participant %d round %d: poison objective %.6f -> %.6f",
                         self.participant_id, round_index, result.objectives[0], objective)
        return AttackAction(round_index, self.poison_ids, bool(due and self.poison_ids.size), objective)

    def poison_hook(self, participant_id: int, batch_ids: np.ndarray, rows: np.ndarray) -> np.ndarray:
        if participant_id != self.participant_id or self._poisoned_rows is None or not self.poison_ids.size:
            return rows
        hit = np.isin(batch_ids, self.poison_ids)
        if not hit.any():
            return rows
        rows = rows.copy()
        rows[hit] = self._poisoned_rows[np.searchsorted(self.poison_ids, batch_ids[hit])]
        return rows

    def embedding_gap(self) -> float:
        """Mean distance between triggered source and poisoned target embeddings."""
        if self._poisoned_rows is None:
            raise ProtocolError("Nothing has been poisoned yet")
        sources = forward(self.bottom, self._triggered_sources)[-1]
        targets = forward(self.bottom, self._poisoned_rows)[-1]
        return float(cdist(sources, targets).mean())


class Coalition:
    """One or more colluding adversaries acting in lockstep.

    The lowest-id adversary coordinates: it chooses the class pair and the
    poisoned target ids for everyone once the label estimates are voted on.
    """
    def __init__(self, adversaries: Sequence[Adversary]) -> None:
        if not adversaries:
            raise ValueError("A coalition needs at least one adversary")
        self.adversaries: List[Adversary] = sorted(adversaries, key=lambda a: a.participant_id)
        self.consensus: Optional[LabelEstimates] = None
        self.pair: Optional[ClassPair] = None

    @property
    def coordinator(self) -> Adversary:
        return self.adversaries[0]

    def extract(self) -> LabelEstimates:
        estimates = [adversary.extract() for adversary in self.adversaries]
        self.consensus = estimates[0] if len(estimates) == 1 else vote_labels(estimates)
        return self.consensus

    def arm(self, round_index: int) -> ClassPair:
        if self.consensus is None:
            raise ProtocolError("Labels must be inferred before arming")
        self.pair = self.coordinator.choose_pair(self.consensus)
        poison_ids = self.coordinator.draw_poison_ids(self.consensus, self.pair)
        for adversary in self.adversaries:
            adversary.arm(round_index, self.consensus, self.pair, poison_ids)
        return self.pair

    def run_attack_phase(self, round_index: int) -> List[AttackAction]:
        return [adversary.run_attack_phase(round_index) for adversary in self.adversaries]

    def poison_hook(self, participant_id: int, batch_ids: np.ndarray, rows: np.ndarray) -> np.ndarray:
        for adversary in self.adversaries:
            if adversary.participant_id == participant_id:
                return adversary.poison_hook(participant_id, batch_ids, rows)
        return rows

    def placed_triggers(self) -> List[PlacedTrigger]:
        return [adversary.placed for adversary in self.adversaries if adversary.placed is not None]
