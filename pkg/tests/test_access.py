# Copyright (c) 2026 vflsim contributors
# See README.rst for license details.

"""The adversary may only touch what its compromised participant holds."""

import inspect
import typing

import numpy as np
import pytest

import vflsim.adversary as adversary_module
from vflsim.adversary import Adversary
from vflsim.data import Dataset, SplitPlan, generate_blobs, sample_auxiliary, vertical_split
from vflsim.nn import DenseNet
from vflsim.protocol import Participant, Server
from vflsim.sim_types import AttackSchedule, Role
from vflsim.trigger import TriggerSpec

FORBIDDEN_NAMES = {
    "Server", "Dataset", "evaluate_main_task", "evaluate_asr", "confusion_rate", "run_training_round",
    "load_csv", "split_train_test",
}


def _public_callables():
    for name, value in vars(adversary_module).items():
        if name.startswith("_") or getattr(value, "__module__", None) != adversary_module.__name__:
            continue
        if inspect.isclass(value):
            for member in vars(value).values():
                if inspect.isfunction(member):
                    yield f"{name}.{member.__name__}", member
        elif inspect.isfunction(value):
            yield name, value


def test_module_does_not_import_server_side_objects():
    assert not FORBIDDEN_NAMES & set(vars(adversary_module))


@pytest.mark.parametrize("name, function", list(_public_callables()))
def test_signatures_never_take_server_side_objects(name, function):
    hints = typing.get_type_hints(function)
    for annotation in hints.values():
        text = repr(annotation)
        assert "Server" not in text and ".Dataset" not in text, name


def test_source_never_reads_server_labels():
    source = inspect.getsource(adversary_module)
    assert ".labels_for(" not in source
    assert "._labels" not in source
    assert ".label_digest(" not in source


def test_adversary_holds_only_its_own_participant():
    rng = np.random.default_rng(3)
    data = generate_blobs(3, 6, 40, 1.0, 5.0, rng)
    aux, train = sample_auxiliary(data, 8, 1.0, rng)
    shards = vertical_split(train, SplitPlan.even(6, 3, (1,)))
    parts = [
        Participant(s.participant_id, s, DenseNet.initialise([s.width, 4], rng),
                    Role.ADVERSARY if s.participant_id == 1 else Role.HONEST)
        for s in shards
    ]
    server = Server(DenseNet.initialise([12, 3], rng), train.labels)
    adversary = Adversary(parts[1], aux.for_shard(shards[1].column_range), AttackSchedule(10, 5),
                          TriggerSpec.tabular((), 1.0), rng)
    for value in vars(adversary).values():
        assert not isinstance(value, (Server, Dataset))
        assert value is not parts[0] and value is not parts[2]
        assert value is not server
    assert adversary.aux.features.shape[1] == shards[1].width
