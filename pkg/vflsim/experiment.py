"""Experiment harness: wires data, protocol, adversary and defense per seed.

Every experiment draws its randomness from independent children of one
``SeedSequence``, so switching the attack or a defense on never shifts the
data, the model initialisation or the batch order.
"""

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .adversary import Adversary, Coalition, SurrogateSettings
from .config import AUTO, DatasetKind, ExperimentConfig, apply_axis, to_dict, validate
from .data import (AuxiliarySet, CsvSchema, Dataset, SplitPlan, choose_known_classes, generate_blobs,
                   generate_grid_images, load_csv, sample_auxiliary, split_train_test, vertical_split)
from .defense import EmbeddingDefense
from .errors import ConfigError
from .nn import DenseNet
from .protocol import (Participant, Server, confusion_rate, evaluate_asr, evaluate_main_task, run_training_round,
                       screen_round)
from .sim_types import AttackSchedule, Role
from .trigger import TriggerSpec, split_trigger, tabular_fill_value

logger = logging.getLogger(__name__)

STREAMS = ("data", "model", "protocol", "defense", "adversary")
PathLike = Union[str, Path]


@dataclass
class ExperimentReport:
    """Per-round series and final figures of one (config, seed) run.

    ``asr``, ``lia`` and ``confusion`` are ``None`` on rounds that are not
    checkpoints or where the quantity does not exist yet.
    """
    name: str
    seed: int
    total_rounds: int
    start_round: Optional[int]
    mta: List[float] = field(default_factory=list)
    asr: List[Optional[float]] = field(default_factory=list)
    lia: List[Optional[float]] = field(default_factory=list)
    confusion: List[Optional[float]] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    final_mta: float = 0.0
    final_precision: float = 0.0
    final_recall: float = 0.0
    final_asr: Optional[float] = None
    final_lia: Optional[float] = None
    source_class: Optional[int] = None
    target_class: Optional[int] = None
    triggers: List[Dict[str, Any]] = field(default_factory=list)
    poisoned_rows: int = 0
    embedding_gap_start: Optional[float] = None
    embedding_gap_final: Optional[float] = None
    label_digest_before: str = ""
    label_digest_after: str = ""
    wall_clock: float = 0.0
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class _World:
    """Everything an experiment builds before the first round."""
    train: Dataset
    test: Dataset
    reserve: AuxiliarySet
    plan: SplitPlan
    server: Server
    participants: List[Participant]
    test_shards: list


def build_dataset(config: ExperimentConfig, rng: np.random.Generator) -> Dataset:
    data = config.dataset
    if data.kind is DatasetKind.GRID:
        return generate_grid_images(data.num_classes, data.height, data.width, data.per_class, data.noise, rng)
    if data.kind is DatasetKind.BLOBS:
        return generate_blobs(data.num_classes, data.dim, data.per_class, data.spread, data.distance, rng,
                              close_ratio=data.close_ratio)
    return load_csv(data.path, CsvSchema(label_column=data.label_column))


def _seeds(seed: int) -> Dict[str, np.random.SeedSequence]:
    return dict(zip(STREAMS, np.random.SeedSequence(seed).spawn(len(STREAMS))))


def _build_world(config: ExperimentConfig, seeds: Dict[str, np.random.SeedSequence]) -> _World:
    data_rng = np.random.default_rng(seeds["data"])
    model_rng = np.random.default_rng(seeds["model"])

    dataset = build_dataset(config, data_rng)
    train, test = split_train_test(dataset, config.dataset.test_per_class, data_rng)
    reserve, train = sample_auxiliary(train, config.dataset.aux_per_class, 1.0, data_rng)

    adversary_ids = config.split.adversary_ids if config.attack_active else ()
    plan = SplitPlan.even(train.num_features, config.split.participants, adversary_ids, train.grid_shape)
    shards = vertical_split(train, plan)
    test_shards = vertical_split(test, plan)

    model = config.model
    participants = []
    for shard in shards:
        bottom = DenseNet.initialise([shard.width, *model.bottom_hidden, model.embedding_dim], model_rng)
        role = Role.ADVERSARY if shard.participant_id in plan.adversary_ids else Role.HONEST
        participants.append(Participant(shard.participant_id, shard, bottom, role, model.lr))
    top = DenseNet.initialise(
        [model.embedding_dim * plan.num_participants, *model.top_hidden, train.num_classes], model_rng)

    defense = None
    if config.defense.enabled:
        defense_seed = int(seeds["defense"].generate_state(1)[0])
        defense = EmbeddingDefense(config.defense.resolved(config.attack).to_defense_config(defense_seed))
    server = Server(top, train.labels, model.lr, defense)
    return _World(train, test, reserve, plan, server, participants, test_shards)


def _build_coalition(
    config: ExperimentConfig,
    world: _World,
    start_round: int,
    rng: np.random.Generator
) -> Coalition:
    attack = config.attack
    known = choose_known_classes(world.train.num_classes, attack.known_fraction, rng)
    aux = world.reserve.restrict(known)
    schedule = AttackSchedule(
        total_rounds=config.total_rounds,
        start_round=start_round,
        budget=attack.budget,
        epsilon=attack.epsilon,
        epsilon_fraction=attack.epsilon_fraction,
        selection=attack.selection,
        poison_steps=attack.poison_steps,
        poison_lr=attack.poison_lr,
        refresh=attack.refresh,
    )
    settings = SurrogateSettings(
        attack.surrogate_epochs, attack.surrogate_lr, attack.surrogate_hidden, attack.confidence)

    adversaries = [p for p in world.participants if p.is_adversary]
    trigger = config.trigger_spec()
    if trigger.is_grid:
        specs = split_trigger(trigger, len(adversaries))
    else:
        specs = [
            TriggerSpec.tabular((), fill=tabular_fill_value(p.shard.rows) if config.trigger.fill is None
                                else config.trigger.fill)
            for p in adversaries
        ]
    members = []
    for participant, spec in zip(adversaries, specs):
        slice_aux = aux.for_shard(participant.shard.column_range, participant.shard.grid_shape)
        members.append(Adversary(
            participant, slice_aux, schedule, spec, rng, settings, attack.placement, attack.feature_count))
    logger.info("Adversaries %s know classes %s with %d auxiliary samples",
                [p.participant_id for p in adversaries], known, aux.labels.size)
    return Coalition(members)


def _batches(num_samples: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(num_samples)
    return [order[i:i + batch_size] for i in range(0, num_samples, batch_size)]


def _lia(estimates, labels: np.ndarray) -> float:
    return float(np.mean(estimates.labels == labels))


def _is_checkpoint(round_index: int, config: ExperimentConfig) -> bool:
    return (round_index + 1) % config.checkpoint_every == 0 or round_index == config.total_rounds - 1


def run_experiment(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    start_round: Optional[int] = None
) -> ExperimentReport:
    """Train one VFL model under ``config`` and report MTA, ASR and LIA.

    Rounds before R_n are honest; the adversary re-trains its surrogate at
    every checkpoint to track label inference. At R_n the coalition fixes its
    labels, class pair, triggers and poisoned rows and poisons from then on.
    """
    validate(config)
    seed = config.seeds[0] if seed is None else seed
    started = time.perf_counter()
    attack = config.attack if config.attack_active else None
    if attack is not None and start_round is None:
        start_round = resolve_start_round(config, seed) if attack.start_round == AUTO else int(attack.start_round)
    if attack is None:
        start_round = None

    seeds = _seeds(seed)
    world = _build_world(config, seeds)
    protocol_rng = np.random.default_rng(seeds["protocol"])
    coalition = None
    if attack is not None:
        coalition = _build_coalition(config, world, start_round, np.random.default_rng(seeds["adversary"]))

    report = ExperimentReport(config.name, seed, config.total_rounds, start_round, config=to_dict(config))
    report.label_digest_before = world.server.label_digest()
    true_labels = world.train.labels
    test_labels = world.test.labels

    for round_index in range(config.total_rounds):
        lia = asr = confusion = None
        hook = None
        if coalition is not None and round_index >= start_round:
            if round_index == start_round:
                lia = _lia(coalition.extract(), true_labels)
                report.final_lia = lia
                pair = coalition.arm(round_index)
                report.source_class, report.target_class = pair.source, pair.target
                report.poisoned_rows = int(coalition.coordinator.poison_ids.size)
                report.triggers = [_describe_trigger(t) for t in coalition.placed_triggers()]
            coalition.run_attack_phase(round_index)
            if round_index == start_round and report.poisoned_rows:
                report.embedding_gap_start = coalition.coordinator.embedding_gap()
            hook = coalition.poison_hook

        screen_round(world.server, world.participants, hook, round_index)
        losses = [
            run_training_round(world.server, world.participants, batch, hook, round_index).loss
            for batch in _batches(world.train.num_samples, config.model.batch_size, protocol_rng)
        ]
        report.loss.append(float(np.mean(losses)))
        report.mta.append(evaluate_main_task(world.server, world.participants, world.test_shards, test_labels).accuracy)

        if coalition is not None and _is_checkpoint(round_index, config):
            if round_index < start_round - 1:
                lia = _lia(coalition.extract(), true_labels)
            elif coalition.pair is not None:
                pair = coalition.pair
                asr = evaluate_asr(world.server, world.participants, coalition.placed_triggers(),
                                   pair.source, pair.target, world.test_shards, test_labels)
                confusion = confusion_rate(world.server, world.participants, pair.source, pair.target,
                                           world.test_shards, test_labels)
        report.lia.append(lia)
        report.asr.append(asr)
        report.confusion.append(confusion)
        logger.debug("Round %d: loss %.5f, MTA %.4f", round_index, report.loss[-1], report.mta[-1])

    final = evaluate_main_task(world.server, world.participants, world.test_shards, test_labels)
    report.final_mta, report.final_precision, report.final_recall = final.accuracy, final.precision, final.recall
    if coalition is not None and coalition.pair is not None:
        report.final_asr = report.asr[-1]
        if report.poisoned_rows:
            report.embedding_gap_final = coalition.coordinator.embedding_gap()
    report.label_digest_after = world.server.label_digest()
    report.wall_clock = time.perf_counter() - started
    logger.info("Experiment '%s' seed %d finished in %.1fs: MTA %.4f, ASR %s, LIA %s", config.name, seed,
                report.wall_clock, report.final_mta, _fmt(report.final_asr), _fmt(report.final_lia))
    return report


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _describe_trigger(trigger) -> Dict[str, Any]:
    described: Dict[str, Any] = {"participant": trigger.participant_id, "mode": trigger.spec.mode.value}
    if trigger.window is not None:
        described["window"] = asdict(trigger.window)
    else:
        described["features"] = list(trigger.spec.indices)
        described["fill"] = trigger.spec.fill
    return described


def run_baseline(config: ExperimentConfig, seed: Optional[int] = None) -> ExperimentReport:
    """The same experiment with the attack struct removed."""
    return run_experiment(config.without_attack(), seed)


def resolve_start_round(config: ExperimentConfig, seed: int) -> int:
    """R_n for ``start_round: auto``.

    Runs the clean baseline and returns the round after the first one whose
    MTA reaches ``auto_start_fraction`` of the baseline's final MTA.
    """
    baseline = run_baseline(config, seed)
    threshold = config.attack.auto_start_fraction * baseline.mta[-1]
    reached = next(i for i, mta in enumerate(baseline.mta) if mta >= threshold)
    start = min(max(reached + 1, 1), config.total_rounds - 1)
    logger.info("Automatic start round: %d (MTA %.4f >= %.4f)", start, baseline.mta[reached], threshold)
    return start


SWEEP_COLUMNS = ("value", "seed", "final_mta", "final_asr", "lia_at_start")


@dataclass
class SweepResult:
    """One row per (value, seed) run plus the per-value summary."""
    axis: str
    values: Tuple[Any, ...]
    rows: pd.DataFrame
    reports: List[ExperimentReport] = field(default_factory=list, repr=False)

    def summary(self) -> pd.DataFrame:
        """Mean and sample standard deviation per value, in sweep order."""
        metrics = ["final_mta", "final_asr", "lia_at_start"]
        grouped = self.rows.groupby("value", sort=False)[metrics]
        mean = grouped.mean()
        std = grouped.std(ddof=1).fillna(0.0)
        table = mean.join(std, lsuffix="_mean", rsuffix="_std").reset_index()
        table.insert(1, "runs", grouped.size().to_numpy())
        return table


def _axis_label(value: Any) -> Any:
    return getattr(value, "value", value)


def _run_job(job: Tuple[ExperimentConfig, int]) -> ExperimentReport:
    config, seed = job
    return run_experiment(config, seed)


def run_sweep(
    base: ExperimentConfig,
    axis: str,
    values: Sequence[Any],
    seeds: Optional[Sequence[int]] = None,
    workers: int = 1
) -> SweepResult:
    """Run ``|values| x |seeds|`` experiments, optionally across worker processes.

    Every configuration is validated before the first experiment starts.
    """
    if not values:
        raise ConfigError("sweep.values", "must list at least one value")
    seeds = tuple(base.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("sweep.seeds", "must list at least one seed")
    configs = [apply_axis(base, axis, value) for value in values]
    jobs = [(config, seed) for config in configs for seed in seeds]
    logger.info("Sweeping '%s' over %d values and %d seeds (%d runs)", axis, len(values), len(seeds), len(jobs))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_job, jobs))
    else:
        reports = [_run_job(job) for job in jobs]

    labels = [_axis_label(value) for value in values for _ in seeds]
    rows = pd.DataFrame({
        "value": labels,
        "seed": [report.seed for report in reports],
        "final_mta": [report.final_mta for report in reports],
        "final_asr": [math.nan if report.final_asr is None else report.final_asr for report in reports],
        "lia_at_start": [math.nan if report.final_lia is None else report.final_lia for report in reports],
    }, columns=list(SWEEP_COLUMNS))
    return SweepResult(axis, tuple(values), rows, reports)


def write_report(report: ExperimentReport, directory: PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{report.name}_seed{report.seed}.json"
    path.write_text(report.to_json(), encoding="utf-8")
    logger.info("Wrote %s", path)
    return path


def write_sweep(result: SweepResult, name: str, directory: PathLike) -> Tuple[Path, Path]:
    """Write the per-run CSV and the summary CSV of a sweep."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    runs = directory / f"{name}_{result.axis}.csv"
    summary = directory / f"{name}_{result.axis}_summary.csv"
    result.rows.to_csv(runs, index=False)
    result.summary().to_csv(summary, index=False)
    logger.info("Wrote %s and %s", runs, summary)
    return runs, summary
