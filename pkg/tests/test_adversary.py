# Copyright (c) 2026 vflsim contributors
# See README.rst for license details.

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from vflsim.adversary import (Adversary, Coalition, SurrogateSettings, class_distance_table, infer_labels,
                              optimize_poison, select_classes, train_surrogate, vote_labels)
from vflsim.data import (AuxiliarySet, SplitPlan, generate_blobs, generate_grid_images, sample_auxiliary,
                         vertical_split)
from vflsim.errors import NumericalError, ProtocolError, ShapeError
from vflsim.nn import DenseLayer, DenseNet, forward
from vflsim.protocol import Participant
from vflsim.sim_types import (UNRECOGNIZED, Activation, AttackSchedule, ClassPair, LabelEstimates, Placement, Role,
                              SelectionStrategy)
from vflsim.trigger import TriggerSpec


def identity(width):
    return DenseNet((DenseLayer(np.eye(width), np.zeros(width), Activation.IDENTITY),))


def _aux(features, labels, num_classes):
    labels = np.asarray(labels)
    return AuxiliarySet(features, labels, tuple(int(c) for c in np.unique(labels)), num_classes,
                        np.arange(labels.size))


def test_surrogate_separates_separable_embeddings(rng):
    data = generate_blobs(3, 4, 30, 0.3, 8.0, rng)
    surrogate = train_surrogate(identity(4), _aux(data.features, data.labels, 3), 200, 0.2, rng)
    assert surrogate.accuracy == 1.0
    assert surrogate.net.output_dim == 3
    estimates = infer_labels(surrogate, identity(4), data.features)
    np.testing.assert_array_equal(estimates.labels, data.labels)


def test_surrogate_is_near_chance_on_shuffled_labels(rng):
    data = generate_blobs(4, 8, 200, 1.0, 6.0, rng)
    shuffled = rng.permutation(data.labels)
    fit, held_out = np.arange(400), np.arange(400, 800)
    surrogate = train_surrogate(identity(8), _aux(data.features[fit], shuffled[fit], 4), 100, 0.2, rng)
    estimates = infer_labels(surrogate, identity(8), data.features[held_out])
    assert abs(np.mean(estimates.labels == shuffled[held_out]) - 0.25) <= 0.1


def test_weight_decay_shrinks_surrogate_weights():
    data = generate_blobs(3, 4, 40, 1.0, 3.0, np.random.default_rng(0))
    aux = _aux(data.features, data.labels, 3)
    plain = train_surrogate(identity(4), aux, 100, 0.2, np.random.default_rng(1), weight_decay=0.0)
    decayed = train_surrogate(identity(4), aux, 100, 0.2, np.random.default_rng(1), weight_decay=0.1)
    assert np.linalg.norm(decayed.net.layers[0].weight) < np.linalg.norm(plain.net.layers[0].weight)


def test_surrogate_rejects_negative_weight_decay(rng):
    data = generate_blobs(2, 2, 5, 1.0, 3.0, rng)
    with pytest.raises(ValueError):
        train_surrogate(identity(2), _aux(data.features, data.labels, 2), 5, 0.1, rng, weight_decay=-1.0)


def test_surrogate_with_zero_epochs(rng):
    data = generate_blobs(3, 4, 10, 1.0, 4.0, rng)
    surrogate = train_surrogate(identity(4), _aux(data.features, data.labels, 3), 0, 0.2, rng)
    assert 0.0 <= surrogate.accuracy <= 1.0


def test_surrogate_rejects_single_class(rng):
    with pytest.raises(ValueError):
        train_surrogate(identity(2), _aux(rng.normal(size=(5, 2)), np.zeros(5, dtype=int), 3), 10, 0.1, rng)


def test_partial_label_space_marks_unsure_rows_unrecognized(rng):
    data = generate_blobs(4, 4, 40, 0.3, 8.0, rng)
    known = data.labels < 2
    surrogate = train_surrogate(identity(4), _aux(data.features[known], data.labels[known], 4), 200, 0.2, rng)
    unsure = surrogate.probabilities(data.features).max(axis=1) < 0.9
    estimates = infer_labels(surrogate, identity(4), data.features, confidence=0.9)
    np.testing.assert_array_equal(estimates.labels == UNRECOGNIZED, unsure)
    estimates = infer_labels(surrogate, identity(4), data.features, confidence=0.0)
    assert UNRECOGNIZED not in estimates.labels
    assert set(estimates.present_classes()) <= {0, 1}


def test_full_label_space_never_emits_unrecognized(rng):
    data = generate_blobs(3, 4, 20, 1.0, 2.0, rng)
    surrogate = train_surrogate(identity(4), _aux(data.features, data.labels, 3), 5, 0.1, rng)
    assert UNRECOGNIZED not in infer_labels(surrogate, identity(4), data.features, confidence=1.0).labels


@pytest.mark.parametrize("ballots, expected", [
    ([[1], [1], [2]], [1]),
    ([[2], [1]], [1]),
    ([[3, 0], [3, 0]], [3, 0]),
    ([[UNRECOGNIZED], [3]], [3]),
    ([[UNRECOGNIZED], [UNRECOGNIZED], [1]], [UNRECOGNIZED]),
])
def test_vote(ballots, expected):
    result = vote_labels([LabelEstimates(np.array(b)) for b in ballots])
    np.testing.assert_array_equal(result.labels, expected)


def test_vote_needs_two_ballots():
    with pytest.raises(ValueError):
        vote_labels([LabelEstimates(np.array([1, 2]))])


def test_vote_rejects_length_mismatch():
    with pytest.raises(ShapeError):
        vote_labels([LabelEstimates(np.array([1, 2])), LabelEstimates(np.array([1]))])


def test_optimal_selection_on_one_dimensional_clusters(rng):
    rows = np.concatenate([np.zeros(5), np.ones(5), np.full(5, 10.0)])[:, None]
    estimates = LabelEstimates(np.repeat([2, 0, 1], 5))
    assert select_classes(SelectionStrategy.OPTIMAL, identity(1), rows, estimates, rng) == ClassPair(0, 2)


@settings(max_examples=15)
@given(st.integers(2, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_optimal_selection_matches_brute_force(classes, per_class, seed):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(classes * per_class, 3)) + np.repeat(rng.normal(size=(classes, 3)) * 3, per_class, 0)
    labels = np.repeat(np.arange(classes), per_class)
    pair = select_classes(SelectionStrategy.OPTIMAL, identity(3), rows, LabelEstimates(labels), rng)
    brute = {
        (a, b): cdist(rows[labels == a], rows[labels == b]).mean()
        for a, b in itertools.combinations(range(classes), 2)
    }
    assert brute[(pair.source, pair.target)] == min(brute.values())
    assert pair.source < pair.target


def test_distance_table_ignores_unrecognized(rng):
    labels = np.array([0, 0, 1, UNRECOGNIZED])
    table = class_distance_table(rng.normal(size=(4, 2)), LabelEstimates(labels))
    assert list(table) == [(0, 1)]


def test_random_selection_draws_distinct_estimated_classes(rng):
    estimates = LabelEstimates(np.array([0, 3, 3, 5, UNRECOGNIZED]))
    for _ in range(20):
        pair = select_classes(SelectionStrategy.RANDOM, identity(1), np.zeros((5, 1)), estimates, rng)
        assert {pair.source, pair.target} <= {0, 3, 5}


def test_selection_needs_two_classes(rng):
    with pytest.raises(ValueError):
        select_classes(SelectionStrategy.OPTIMAL, identity(1), np.zeros((3, 1)),
                       LabelEstimates(np.array([1, 1, UNRECOGNIZED])), rng)


def test_poison_reaches_the_ball_boundary_in_one_dimension():
    result = optimize_poison(identity(1), np.array([[1.0]]), np.array([[0.0]]), 0.5, 50, 0.5)
    np.testing.assert_array_equal(result.samples, [[0.5]])


def test_zero_epsilon_returns_targets(rng):
    targets = rng.normal(size=(4, 3))
    result = optimize_poison(identity(3), rng.normal(size=(2, 3)), targets, 0.0, 20, 0.5)
    np.testing.assert_array_equal(result.samples, targets)
    assert result.samples is not targets


@pytest.mark.parametrize("seed", range(5))
def test_poison_noise_stays_in_the_ball_and_objective_never_rises(seed):
    rng = np.random.default_rng(seed)
    bottom = DenseNet.initialise([6, 8, 4], rng)
    targets = rng.normal(size=(7, 6))
    result = optimize_poison(bottom, rng.normal(size=(3, 6)) + 2.0, targets, 0.8, 30, 0.5)
    assert np.all(np.linalg.norm(result.samples - targets, axis=1) <= 0.8 + 1e-9)
    assert np.all(np.diff(result.objectives) < 0)
    assert result.objectives[-1] <= result.objectives[0]


def test_frozen_features_receive_no_noise(rng):
    bottom = DenseNet.initialise([5, 6, 3], rng)
    targets = rng.normal(size=(4, 5))
    result = optimize_poison(bottom, rng.normal(size=(2, 5)) + 1.0, targets, 2.0, 20, 0.5, frozen=np.array([1, 3]))
    np.testing.assert_array_equal(result.samples[:, [1, 3]], targets[:, [1, 3]])
    assert np.any(result.noise[:, [0, 2, 4]] != 0)


@pytest.mark.parametrize("frozen", [[5], [-1]])
def test_frozen_features_must_exist(rng, frozen):
    with pytest.raises(ShapeError):
        optimize_poison(identity(5), np.ones((1, 5)), np.zeros((1, 5)), 1.0, 5, 0.5, frozen=np.array(frozen))


def test_poison_pairs_targets_cyclically():
    sources = np.array([[1.0], [-1.0]])
    targets = np.zeros((4, 1))
    result = optimize_poison(identity(1), sources, targets, 10.0, 100, 0.5)
    np.testing.assert_allclose(result.samples[:, 0], [1.0, -1.0, 1.0, -1.0], atol=1e-6)


def test_poison_rejects_non_finite_objective():
    with pytest.raises(NumericalError):
        optimize_poison(identity(1), np.array([[np.inf]]), np.zeros((1, 1)), 1.0, 5, 0.5)


def test_poison_needs_both_sets():
    with pytest.raises(ShapeError):
        optimize_poison(identity(1), np.zeros((0, 1)), np.zeros((1, 1)), 1.0, 5, 0.5)


def _blob_party(seed=0, participants=2, adversaries=(0,), budget=20.0, start_round=5):
    rng = np.random.default_rng(seed)
    data = generate_blobs(3, 8, 80, 0.6, 6.0, rng)
    aux, train = sample_auxiliary(data, 15, 1.0, rng)
    plan = SplitPlan.even(train.num_features, participants, adversaries)
    parts = []
    for shard in vertical_split(train, plan):
        role = Role.ADVERSARY if shard.participant_id in adversaries else Role.HONEST
        parts.append(Participant(shard.participant_id, shard, DenseNet.initialise([shard.width, 6], rng), role))
    schedule = AttackSchedule(total_rounds=20, start_round=start_round, budget=budget, poison_steps=10)
    members = [
        Adversary(p, aux.for_shard(p.shard.column_range), schedule, TriggerSpec.tabular((), fill=9.0), rng,
                  SurrogateSettings(epochs=150))
        for p in parts if p.is_adversary
    ]
    return train, parts, members


def test_adversary_poisons_floor_budget_of_target_class():
    train, _, (adversary,) = _blob_party(budget=20.0)
    estimates = adversary.extract()
    pair = adversary.choose_pair(estimates)
    ids = adversary.draw_poison_ids(estimates, pair)
    assert ids.size == math.floor(round(0.2 * estimates.members(pair.target).size, 9))
    assert set(ids) <= set(estimates.members(pair.target))


def test_adversary_phases_are_enforced():
    _, _, (adversary,) = _blob_party(start_round=5)
    with pytest.raises(ProtocolError):
        adversary.run_attack_phase(3)
    with pytest.raises(ProtocolError):
        adversary.run_attack_phase(5)
    adversary.extract()
    with pytest.raises(ProtocolError):
        adversary.arm(4, adversary.estimates, ClassPair(0, 1), np.array([0]))


def test_armed_adversary_swaps_only_poisoned_rows():
    _, _, (adversary,) = _blob_party()
    estimates = adversary.extract()
    pair = adversary.choose_pair(estimates)
    ids = adversary.draw_poison_ids(estimates, pair)
    adversary.arm(5, estimates, pair, ids)
    action = adversary.run_attack_phase(5)
    assert action.refreshed and action.objective is not None
    assert len(adversary.placed.spec.indices) == 2

    batch = np.arange(adversary.rows.shape[0])
    rows = adversary.rows[batch]
    swapped = adversary.poison_hook(0, batch, rows)
    changed = np.flatnonzero(np.any(swapped != rows, axis=1))
    assert set(changed) <= set(ids)
    trigger = list(adversary.placed.spec.indices)
    assert np.all(swapped[np.ix_(ids, trigger)] == 9.0)
    rest = np.setdiff1d(np.arange(rows.shape[1]), trigger)
    noise = np.linalg.norm(swapped[np.ix_(ids, rest)] - rows[np.ix_(ids, rest)], axis=1)
    assert np.all(noise <= adversary.epsilon + 1e-9)
    np.testing.assert_array_equal(adversary.poison_hook(1, batch, rows), rows)


def test_poison_is_refreshed_on_cadence():
    _, _, (adversary,) = _blob_party()
    estimates = adversary.extract()
    pair = adversary.choose_pair(estimates)
    adversary.arm(5, estimates, pair, adversary.draw_poison_ids(estimates, pair))
    refreshed = [adversary.run_attack_phase(r).refreshed for r in range(5, 16)]
    assert refreshed == [True, False, False, False, False, True, False, False, False, False, True]


def test_zero_budget_leaves_rows_alone():
    _, _, (adversary,) = _blob_party(budget=0.0)
    estimates = adversary.extract()
    pair = adversary.choose_pair(estimates)
    adversary.arm(5, estimates, pair, adversary.draw_poison_ids(estimates, pair))
    adversary.run_attack_phase(5)
    rows = adversary.rows[:10]
    assert adversary.poison_hook(0, np.arange(10), rows) is rows


def test_grid_adversary_places_window_by_saliency_or_at_random():
    rng = np.random.default_rng(0)
    data = generate_grid_images(3, 8, 12, 60, 0.2, rng)
    aux, train = sample_auxiliary(data, 10, 1.0, rng)
    plan = SplitPlan.even(train.num_features, 2, (0,), train.grid_shape)
    shard = vertical_split(train, plan)[0]
    participant = Participant(0, shard, DenseNet.initialise([shard.width, 6], rng), Role.ADVERSARY)
    schedule = AttackSchedule(total_rounds=10, start_round=2, poison_steps=3)
    for placement in Placement:
        adversary = Adversary(participant, aux.for_shard(shard.column_range, shard.grid_shape), schedule,
                              TriggerSpec.grid(5, 5), rng, SurrogateSettings(epochs=50), placement)
        estimates = adversary.extract()
        pair = adversary.choose_pair(estimates)
        adversary.arm(2, estimates, pair, adversary.draw_poison_ids(estimates, pair))
        assert adversary.placed.window.fits((8, 6))
        assert (adversary.placed.window.height, adversary.placed.window.width) == (5, 5)


def test_honest_participant_cannot_be_an_adversary(rng):
    train, parts, _ = _blob_party()
    aux = _aux(rng.normal(size=(4, parts[1].shard.width)), [0, 0, 1, 1], 3)
    with pytest.raises(ValueError):
        Adversary(parts[1], aux, AttackSchedule(10, 5), TriggerSpec.tabular((), 1.0), rng)


def test_coalition_votes_and_shares_one_plan():
    _, _, members = _blob_party(participants=4, adversaries=(0, 2))
    coalition = Coalition(members)
    assert coalition.coordinator.participant_id == 0
    consensus = coalition.extract()
    assert len(consensus) == members[0].rows.shape[0]
    pair = coalition.arm(5)
    assert all(a.pair == pair for a in coalition.adversaries)
    np.testing.assert_array_equal(members[0].poison_ids, members[1].poison_ids)
    actions = coalition.run_attack_phase(5)
    assert len(actions) == 2
    assert [t.participant_id for t in coalition.placed_triggers()] == [0, 2]


def test_bottom_embedding_of_poison_moves_towards_triggered_sources():
    _, _, (adversary,) = _blob_party(budget=50.0)
    estimates = adversary.extract()
    pair = adversary.choose_pair(estimates)
    adversary.arm(5, estimates, pair, adversary.draw_poison_ids(estimates, pair))
    sources = forward(adversary.bottom, adversary.placed.apply(adversary.rows[estimates.members(pair.source)]))[-1]
    before = cdist(sources, forward(adversary.bottom, adversary.rows[adversary.poison_ids])[-1]).mean()
    adversary.run_attack_phase(5)
    assert adversary.embedding_gap() < before


def test_poisoned_rows_carry_the_trigger():
    _, _, (adversary,) = _blob_party(budget=50.0)
    estimates = adversary.extract()
    pair = adversary.choose_pair(estimates)
    ids = adversary.draw_poison_ids(estimates, pair)
    adversary.arm(5, estimates, pair, ids)
    adversary.run_attack_phase(5)
    poisoned = adversary.poison_hook(0, ids, adversary.rows[ids])
    np.testing.assert_array_equal(adversary.placed.apply(poisoned), poisoned)
    np.testing.assert_array_equal(np.sort(adversary.placed.covered_features()),
                                  np.sort(adversary.placed.spec.indices))


@pytest.mark.parametrize("fraction", [0.1, 0.5])
def test_default_epsilon_scales_the_target_norm(fraction):
    _, _, (adversary,) = _blob_party()
    adversary.schedule = AttackSchedule(total_rounds=20, start_round=5, budget=20.0, poison_steps=10,
                                        epsilon_fraction=fraction)
    estimates = adversary.extract()
    pair = adversary.choose_pair(estimates)
    adversary.arm(5, estimates, pair, adversary.draw_poison_ids(estimates, pair))
    target_rows = adversary.rows[estimates.members(pair.target)]
    assert adversary.epsilon == pytest.approx(fraction * np.linalg.norm(target_rows, axis=1).mean())


def test_schedule_rejects_negative_epsilon_fraction():
    with pytest.raises(ValueError):
        AttackSchedule(total_rounds=10, start_round=5, epsilon_fraction=-0.5)
