"""Dense neural-network engine shared by the honest parties and the adversary.

Everything is plain float64 numpy with value semantics: operations return new
networks and never mutate their inputs.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import NumericalError, ShapeError
from .sim_types import Activation


@dataclass(frozen=True)
class DenseLayer:
    """``activation(x @ weight.T + bias)`` with ``weight`` shaped (out, in)."""
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class LayerGrad:
    """Gradient of a scalar loss with respect to one layer's parameters."""
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class DenseNet:
    """A multilayer perceptron: bottom models, top model and surrogates alike."""
    layers: Tuple[DenseLayer, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("A network needs at least one layer")
        for index, (prev, layer) in enumerate(zip(self.layers, self.layers[1:]), start=1):
            if layer.input_dim != prev.output_dim:
                raise ShapeError(
                    f"Layer {index} expects {layer.input_dim} inputs but layer {index - 1} "
                    f"produces {prev.output_dim}")
        for index, layer in enumerate(self.layers):
            if layer.bias.shape != (layer.output_dim,):
                raise ShapeError(f"Layer {index} bias has shape {layer.bias.shape}, expected ({layer.output_dim},)")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.input_dim,) + tuple(layer.output_dim for layer in self.layers)

    @classmethod
    def initialise(cls, dims: Sequence[int], rng: np.random.Generator) -> "DenseNet":
        """Glorot-uniform weights, zero biases, ReLU hidden and identity output."""
        if len(dims) < 2:
            raise ShapeError(f"Need at least an input and an output width, got {list(dims)}")
        layers = []
        for index, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            last = index == len(dims) - 2
            layers.append(DenseLayer(
                weight=weight,
                bias=np.zeros(fan_out),
                activation=Activation.IDENTITY if last else Activation.RELU,
            ))
        return cls(tuple(layers))

    def is_finite(self) -> bool:
        return all(np.isfinite(layer.weight).all() and np.isfinite(layer.bias).all() for layer in self.layers)


def compose(*nets: DenseNet) -> DenseNet:
    """Chain networks end to end, keeping each layer's activation tag."""
    return DenseNet(tuple(layer for net in nets for layer in net.layers))


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def forward(net: DenseNet, batch: np.ndarray) -> List[np.ndarray]:
    """Return ``[batch, a_1, ..., a_L]``; the last entry is the network output."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[1] != net.input_dim:
        raise ShapeError(f"Batch has {batch.shape[1]} columns but the network expects {net.input_dim}")
    activations = [batch]
    for layer in net.layers:
        activations.append(_activate(activations[-1] @ layer.weight.T + layer.bias, layer.activation))
    return activations


def backward(
    net: DenseNet,
    activations: Sequence[np.ndarray],
    grad_at_output: np.ndarray
) -> Tuple[List[LayerGrad], np.ndarray]:
    """Reverse-mode pass through the activations recorded by :func:`forward`."""
    if len(activations) != len(net.layers) + 1:
        raise ShapeError(f"Expected {len(net.layers) + 1} activations, got {len(activations)}")
    grad = np.asarray(grad_at_output, dtype=np.float64)
    if grad.shape != activations[-1].shape:
        raise ShapeError(f"Output gradient has shape {grad.shape}, expected {activations[-1].shape}")

    param_grads: List[LayerGrad] = []
    for layer, inputs, outputs in zip(reversed(net.layers), reversed(activations[:-1]), reversed(activations[1:])):
        if layer.activation is Activation.RELU:
            # relu(z) > 0 exactly where z > 0
            grad = grad * (outputs > 0)
        param_grads.append(LayerGrad(weight=grad.T @ inputs, bias=grad.sum(axis=0)))
        grad = grad @ layer.weight
    param_grads.reverse()
    return param_grads, grad


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def cross_entropy_with_grad(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=int).reshape(-1)
    n, num_classes = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"Got {labels.shape[0]} labels for {n} rows of logits")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"Labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    if n == 0:
        return 0.0, np.zeros_like(logits)

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))

    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def sgd_step(net: DenseNet, param_grads: Sequence[LayerGrad], lr: float) -> DenseNet:
    """Return a copy of ``net`` with every parameter moved by ``-lr * grad``."""
    if not lr > 0:
        raise ValueError(f"Learning rate must be > 0, got {lr}")
    if len(param_grads) != len(net.layers):
        raise ShapeError(f"Got gradients for {len(param_grads)} layers, network has {len(net.layers)}")
    layers = []
    for index, (layer, grad) in enumerate(zip(net.layers, param_grads)):
        if grad.weight.shape != layer.weight.shape or grad.bias.shape != layer.bias.shape:
            raise ShapeError(f"Gradient shapes do not match layer {index}")
        layers.append(DenseLayer(
            weight=layer.weight - lr * grad.weight,
            bias=layer.bias - lr * grad.bias,
            activation=layer.activation,
        ))
    return DenseNet(tuple(layers))


def predict(net: DenseNet, batch: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(forward(net, batch)[-1], axis=1)


def input_saliency(net: DenseNet, sample: np.ndarray, predicted_label: int) -> np.ndarray:
    """Absolute gradient of the cross-entropy at ``predicted_label`` w.r.t. ``sample``.

    The returned map has the shape of ``sample``; for a batch the maps are
    returned row by row.
    """
    sample = np.asarray(sample, dtype=np.float64)
    batch = np.atleast_2d(sample)
    if batch.shape[1] != net.input_dim:
        raise ShapeError(f"Sample has {batch.shape[1]} features but the network expects {net.input_dim}")
    labels = np.broadcast_to(np.asarray(predicted_label, dtype=int), (batch.shape[0],))

    activations = forward(net, batch)
    _, grad_logits = cross_entropy_with_grad(activations[-1], labels)
    # undo the batch mean so every row gets its own per-sample gradient
    _, grad_input = backward(net, activations, grad_logits * batch.shape[0])
    if not np.isfinite(grad_input).all():
        raise NumericalError("Saliency gradient is not finite")
    return np.abs(grad_input).reshape(sample.shape)
