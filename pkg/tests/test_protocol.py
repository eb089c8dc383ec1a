# Copyright (c) 2026 vflsim contributors
# See README.rst for license details.

import numpy as np
import pytest

from vflsim.data import SplitPlan, generate_blobs, vertical_split
from vflsim.defense import EmbeddingDefense
from vflsim.errors import ShapeError
from vflsim.nn import DenseLayer, DenseNet, backward, compose, cross_entropy_with_grad, forward, sgd_step
from vflsim.protocol import (Participant, PlacedTrigger, Server, concat_embeddings, confusion_rate,
                             embedding_offsets, evaluate_asr, evaluate_main_task, run_training_round, screen_round)
from vflsim.sim_types import Activation, DefenseConfig, FeatureShard, Role
from vflsim.trigger import TriggerSpec


def _setup(participants=2, seed=0, defense=None, adversaries=()):
    rng = np.random.default_rng(seed)
    data = generate_blobs(3, 6, 40, 1.0, 6.0, rng)
    shards = vertical_split(data, SplitPlan.even(6, participants))
    parts = [
        Participant(s.participant_id, s, DenseNet.initialise([s.width, 8, 3], rng),
                    Role.ADVERSARY if s.participant_id in adversaries else Role.HONEST, lr=0.1)
        for s in shards
    ]
    top = DenseNet.initialise([3 * participants, 8, 3], rng)
    return data, parts, Server(top, data.labels, lr=0.1, defense=defense)


def test_concat_orders_by_participant_id():
    joined = concat_embeddings([(1, np.ones((2, 1))), (0, np.zeros((2, 2)))])
    np.testing.assert_array_equal(joined, [[0, 0, 1], [0, 0, 1]])


@pytest.mark.parametrize("batches", [
    [(0, np.zeros((2, 2))), (1, np.zeros((3, 1)))],
    [(0, np.zeros((2, 2))), (0, np.zeros((2, 1)))],
    [],
])
def test_concat_rejects_inconsistent_batches(batches):
    with pytest.raises(ShapeError):
        concat_embeddings(batches)


def test_participant_checks_bottom_width(rng):
    shard = FeatureShard(0, (0, 3), np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        Participant(0, shard, DenseNet.initialise([4, 2], rng))


def test_round_routes_gradient_slices_of_matching_shape():
    _, parts, server = _setup(participants=3)
    trace = run_training_round(server, parts, np.arange(16))
    assert set(trace.gradients) == {0, 1, 2}
    for pid in trace.gradients:
        assert trace.gradients[pid].shape == trace.embeddings[pid].shape
    assert np.isfinite(trace.loss)


def test_round_gradient_is_taken_before_the_top_update():
    _, parts, server = _setup()
    batch = np.arange(10)
    top = server.top
    embeddings = concat_embeddings([(p.participant_id, p.embed(p.shard.take(batch))[-1]) for p in parts])
    activations = forward(top, embeddings)
    _, grad = cross_entropy_with_grad(activations[-1], server.labels_for(batch))
    _, expected = backward(top, activations, grad)

    trace = run_training_round(server, parts, batch)
    offsets = embedding_offsets(parts)
    for pid, (start, end) in offsets.items():
        np.testing.assert_array_equal(trace.gradients[pid], expected[:, start:end])
    assert server.top is not top


def test_single_party_matches_centralised_training():
    """K = 1 VFL follows the same trajectory as training bottom and top as one network."""
    rng = np.random.default_rng(7)
    data = generate_blobs(3, 5, 30, 1.0, 5.0, rng)
    bottom = DenseNet.initialise([5, 8, 4], rng)
    top = DenseNet.initialise([4, 6, 3], rng)
    shard = vertical_split(data, SplitPlan.even(5, 1))[0]
    participant = Participant(0, shard, bottom, lr=0.05)
    server = Server(top, data.labels, lr=0.05)
    joint = compose(bottom, top)

    order = np.random.default_rng(3).permutation(data.num_samples)
    for batch in np.array_split(order, 9):
        run_training_round(server, [participant], batch)
        activations = forward(joint, data.features[batch])
        _, grad = cross_entropy_with_grad(activations[-1], data.labels[batch])
        grads, _ = backward(joint, activations, grad)
        joint = sgd_step(joint, grads, 0.05)

    for mine, theirs in zip(participant.bottom.layers + server.top.layers, joint.layers):
        np.testing.assert_array_equal(mine.weight, theirs.weight)
        np.testing.assert_array_equal(mine.bias, theirs.bias)


def test_zero_learning_rate_leaves_models_unchanged():
    _, parts, server = _setup()
    for p in parts:
        p.lr = 0.0
    server.lr = 0.0
    before = [p.bottom for p in parts] + [server.top]
    run_training_round(server, parts, np.arange(20))
    assert all(a is b for a, b in zip([p.bottom for p in parts] + [server.top], before))


def test_poison_hook_only_touches_adversary_rows():
    _, parts, server = _setup(adversaries=(0,))
    seen = []

    def hook(pid, ids, rows):
        seen.append(pid)
        return rows + 1.0

    run_training_round(server, parts, np.arange(8), poison_hook=hook)
    assert seen == [0]


def test_poison_hook_must_keep_shape():
    _, parts, server = _setup(adversaries=(0,))
    with pytest.raises(ShapeError):
        run_training_round(server, parts, np.arange(8), poison_hook=lambda pid, ids, rows: rows[:1])


def test_training_never_changes_labels():
    _, parts, server = _setup(defense=EmbeddingDefense(DefenseConfig(dp_variance=0.1, anomaly_budget=20.0,
                                                                     num_trees=5)))
    digest = server.label_digest()
    for round_index in range(3):
        screen_round(server, parts, round_index=round_index)
        for start in range(0, 120, 20):
            run_training_round(server, parts, np.arange(start, start + 20), round_index=round_index)
    assert server.label_digest() == digest


def test_excluded_rows_get_zero_gradient():
    defense = EmbeddingDefense(DefenseConfig(anomaly_budget=25.0, num_trees=10, seed=1))
    _, parts, server = _setup(defense=defense)
    screened = screen_round(server, parts)
    batch = np.arange(40)
    trace = run_training_round(server, parts, batch)
    assert trace.excluded_ids.size > 0
    np.testing.assert_array_equal(trace.excluded_ids, batch[np.isin(batch, screened)])
    rows = np.isin(batch, trace.excluded_ids)
    for gradient in trace.gradients.values():
        assert np.all(gradient[rows] == 0)
        assert np.any(gradient[~rows] != 0)


def test_screening_drops_the_budget_of_every_whole_class():
    defense = EmbeddingDefense(DefenseConfig(anomaly_budget=25.0, num_trees=10, seed=1))
    data, parts, server = _setup(participants=1, defense=defense)
    excluded = screen_round(server, parts)
    for class_id in range(3):
        class_size = np.sum(data.labels == class_id)
        assert np.sum(data.labels[excluded] == class_id) == int(np.ceil(0.25 * class_size))


def test_screening_holds_for_every_batch_of_the_round():
    defense = EmbeddingDefense(DefenseConfig(anomaly_budget=25.0, num_trees=10, seed=1))
    _, parts, server = _setup(defense=defense)
    screened = screen_round(server, parts, round_index=0)
    seen = np.concatenate([
        run_training_round(server, parts, batch, round_index=0).excluded_ids
        for batch in np.array_split(np.arange(server.num_samples), 4)
    ])
    np.testing.assert_array_equal(np.sort(seen), screened)


def test_screening_sees_the_adversary_rows_through_the_hook():
    defense = EmbeddingDefense(DefenseConfig(anomaly_budget=10.0, num_trees=5, seed=1))
    _, parts, server = _setup(defense=defense, adversaries=(0,))
    calls = []

    def hook(pid, ids, rows):
        calls.append((pid, ids.size))
        return rows

    screen_round(server, parts, poison_hook=hook)
    assert calls == [(0, server.num_samples)]


def test_screening_is_skipped_without_a_filter():
    _, parts, server = _setup(defense=EmbeddingDefense(DefenseConfig(dp_variance=0.1)), adversaries=(0,))
    calls = []
    assert screen_round(server, parts, poison_hook=lambda pid, ids, rows: calls.append(pid) or rows).size == 0
    assert calls == []
    _, parts, server = _setup()
    assert screen_round(server, parts).size == 0


def test_dp_noise_perturbs_received_embeddings():
    defense = EmbeddingDefense(DefenseConfig(dp_variance=1.0, seed=4))
    _, parts, server = _setup(defense=defense)
    batch = np.arange(6)
    clean = parts[0].embed(parts[0].shard.take(batch))[-1]
    trace = run_training_round(server, parts, batch)
    assert not np.allclose(trace.embeddings[0], clean)


def test_main_task_metrics_are_rates():
    data, parts, server = _setup()
    for _ in range(40):
        for batch in np.array_split(np.arange(data.num_samples), 6):
            run_training_round(server, parts, batch)
    metrics = evaluate_main_task(server, parts, [p.shard for p in parts], data.labels)
    assert 0.9 <= metrics.accuracy <= 1.0
    assert 0.0 <= metrics.precision <= 1.0 and 0.0 <= metrics.recall <= 1.0


def test_main_task_metrics_match_the_confusion_matrix():
    data, parts, server = _setup(seed=2)
    for batch in np.array_split(np.arange(data.num_samples), 6):
        run_training_round(server, parts, batch)
    embeddings = concat_embeddings([(p.participant_id, p.embed(p.shard.rows)[-1]) for p in parts])
    predictions = np.argmax(forward(server.top, embeddings)[-1], axis=1)
    matrix = np.zeros((3, 3))
    np.add.at(matrix, (data.labels, predictions), 1)
    diagonal = np.diag(matrix)
    predicted = matrix.sum(axis=0)
    precision = np.divide(diagonal, predicted, out=np.zeros(3), where=predicted > 0)

    metrics = evaluate_main_task(server, parts, [p.shard for p in parts], data.labels)
    assert metrics.accuracy == pytest.approx(diagonal.sum() / matrix.sum())
    assert metrics.precision == pytest.approx(precision.mean())
    assert metrics.recall == pytest.approx((diagonal / matrix.sum(axis=1)).mean())


def test_constant_prediction_scores_its_class_share():
    _, parts, server = _setup()
    server.top = DenseNet((DenseLayer(np.zeros((3, 6)), np.array([1.0, 0.0, 0.0]), Activation.IDENTITY),))
    shards = [FeatureShard(p.participant_id, p.shard.column_range, p.shard.rows[:40]) for p in parts]
    labels = np.tile([0, 1], 20)
    metrics = evaluate_main_task(server, parts, shards, labels)
    assert metrics.accuracy == 0.5
    assert metrics.recall == pytest.approx(0.5)
    assert metrics.precision == pytest.approx(0.25)


def test_main_task_rejects_empty_test_set():
    _, parts, server = _setup()
    empty = [FeatureShard(p.participant_id, p.shard.column_range, p.shard.rows[:0]) for p in parts]
    with pytest.raises(ShapeError):
        evaluate_main_task(server, parts, empty, np.zeros(0, dtype=int))


def test_asr_without_source_samples_is_rejected():
    data, parts, server = _setup(adversaries=(0,))
    labels = np.where(data.labels == 2, 0, data.labels)
    trigger = PlacedTrigger(0, TriggerSpec.tabular([0], fill=50.0))
    with pytest.raises(ShapeError):
        evaluate_asr(server, parts, [trigger], 2, 1, [p.shard for p in parts], labels)


def test_asr_rejects_trigger_on_honest_participant():
    data, parts, server = _setup(adversaries=(0,))
    trigger = PlacedTrigger(1, TriggerSpec.tabular([0], fill=50.0))
    with pytest.raises(ValueError):
        evaluate_asr(server, parts, [trigger], 0, 1, [p.shard for p in parts], data.labels)


def test_empty_trigger_asr_is_the_clean_confusion_rate():
    data, parts, server = _setup(adversaries=(0,))
    shards = [p.shard for p in parts]
    noop = PlacedTrigger(0, TriggerSpec.tabular([], fill=0.0))
    assert evaluate_asr(server, parts, [noop], 0, 1, shards, data.labels) == \
        confusion_rate(server, parts, 0, 1, shards, data.labels)
