# Copyright (c) 2026 vflsim contributors
# See README.rst for license details.

from dataclasses import replace

import numpy as np

from vflsim.config import (AttackConfig, DatasetConfig, DatasetKind, ExperimentConfig, ModelConfig, SplitConfig,
                           TriggerConfig)
from vflsim.sim_types import TriggerMode
from vflsim.nn import DenseLayer, DenseNet, cross_entropy_with_grad, forward


def numeric_gradient(fn, x, eps=1e-6):
    """Central differences of a scalar function over every entry of ``x``."""
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += eps
        minus[index] -= eps
        grad[index] = (fn(plus) - fn(minus)) / (2 * eps)
    return grad


def relative_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def with_layer(net, index, weight=None, bias=None):
    layers = list(net.layers)
    layer = layers[index]
    layers[index] = DenseLayer(
        layer.weight if weight is None else weight,
        layer.bias if bias is None else bias,
        layer.activation)
    return DenseNet(tuple(layers))


def loss_of(net, batch, labels):
    return cross_entropy_with_grad(forward(net, batch)[-1], labels)[0]


def tiny_blobs(**changes):
    """A clean two-party blob experiment that runs in a couple of seconds."""
    config = ExperimentConfig(
        name="tiny",
        total_rounds=30,
        checkpoint_every=5,
        seeds=(0,),
        dataset=DatasetConfig(kind=DatasetKind.BLOBS, num_classes=3, per_class=120, test_per_class=30,
                              aux_per_class=20, dim=8, distance=6.0),
        split=SplitConfig(participants=2, adversary_ids=(0,)),
        model=ModelConfig(embedding_dim=4, bottom_hidden=(16,), top_hidden=(16,), lr=0.1, batch_size=32),
        trigger=TriggerConfig(mode=TriggerMode.TABULAR_OVERWRITE),
    )
    return replace(config, **changes)


def tiny_attack(**changes):
    return replace(AttackConfig(start_round=15, surrogate_epochs=150, poison_steps=10), **changes)
