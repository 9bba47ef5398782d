"""Feedforward MLP: parameters, forward pass, loss and the exact backprop oracle.

Layer ``l`` holds activity ``x_l``.  ``weights[l]`` has shape
``(layer_sizes[l + 1], layer_sizes[l])`` and maps ``x_l`` onto the
pre-activation of layer ``l + 1``.  Every function accepts either a single
sample (1-D arrays) or a minibatch stacked along axis 0; gradients of a
minibatch are averaged over its rows.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .linalg import (
    ACTIVATIONS,
    ShapeError,
    activation_derivative,
    apply_activation,
    as_float_array,
    log_softmax,
    softmax,
)

HEADS = ("softmax_crossentropy", "linear_squared_error")


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: Tuple[int, ...]
    hidden_activation: str = "relu"
    output_head: str = "softmax_crossentropy"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ValueError("a network needs at least one hidden layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in ACTIVATIONS or self.hidden_activation == "softmax":
            raise ValueError(f"invalid hidden activation {self.hidden_activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"invalid output head {self.output_head!r}")

    @property
    def depth(self):
        """Index ``L`` of the output layer."""
        return len(self.layer_sizes) - 1

    def activation_of(self, layer):
        if layer == self.depth:
            return "softmax" if self.output_head == "softmax_crossentropy" else "linear"
        return self.hidden_activation

    @classmethod
    def parse(cls, text, **kwargs):
        return cls(tuple(int(s) for s in text.split(",")), **kwargs)


class _LayeredArrays:
    """Shared arithmetic for containers of per-layer weight and bias arrays."""

    def __init__(self, weights, biases):
        self.weights = [as_float_array(w) for w in weights]
        self.biases = [as_float_array(b) for b in biases]
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases must have the same number of layers")

    def _new(self, weights, biases):
        return type(self)(weights, biases)

    def copy(self):
        return self._new([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def shapes(self):
        return [a.shape for a in self.arrays()]

    def _zip(self, other, op):
        if self.shapes() != other.shapes():
            raise ShapeError(f"shape mismatch: {self.shapes()} vs {other.shapes()}")
        return self._new(
            [op(a, b) for a, b in zip(self.weights, other.weights)],
            [op(a, b) for a, b in zip(self.biases, other.biases)],
        )

    def __add__(self, other):
        return self._zip(other, np.add)

    def __sub__(self, other):
        return self._zip(other, np.subtract)

    def scale(self, c):
        return self._new([c * w for w in self.weights], [c * b for b in self.biases])

    def scale_layers(self, factors):
        """Multiply layer ``l``'s weight and bias by ``factors[l]``."""
        return self._new(
            [f * w for f, w in zip(factors, self.weights)],
            [f * b for f, b in zip(factors, self.biases)],
        )

    def __len__(self):
        return len(self.weights)

    def __repr__(self):
        return f"{type(self).__name__}(shapes={[w.shape for w in self.weights]})"


class ParameterSet(_LayeredArrays):
    """Weights ``W_l`` and biases ``b_l`` of an MLP."""

    def check(self, spec):
        sizes = spec.layer_sizes
        if len(self.weights) != len(sizes) - 1:
            raise ShapeError(f"expected {len(sizes) - 1} layers, got {len(self.weights)}")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[l + 1], sizes[l]) or b.shape != (sizes[l + 1],):
                raise ShapeError(f"layer {l}: weight {w.shape}, bias {b.shape} do not fit {sizes}")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise ValueError("parameters contain non-finite entries")
        return self


class GradientSet(_LayeredArrays):
    """Per-parameter gradients with the same layout as :class:`ParameterSet`."""

    @property
    def weight_grads(self):
        return self.weights

    @property
    def bias_grads(self):
        return self.biases

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])


@dataclass
class Sample:
    """One input/target pair, or a minibatch of them stacked along axis 0."""

    input: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.input = as_float_array(self.input)
        self.target = as_float_array(self.target)
        if self.input.ndim != self.target.ndim or self.input.shape[:-1] != self.target.shape[:-1]:
            raise ShapeError(f"input {self.input.shape} and target {self.target.shape} disagree")

    @property
    def batch_size(self):
        return 1 if self.input.ndim == 1 else self.input.shape[0]

    @classmethod
    def stack(cls, samples: Sequence["Sample"]):
        return cls(
            np.stack([s.input for s in samples]),
            np.stack([s.target for s in samples]),
        )


def init_params(spec, seed, scale=1.0):
    """Xavier-uniform weights and zero biases, deterministic per ``seed``.

    ``scale`` multiplies the uniform bound; 1.0 is plain Xavier.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ParameterSet(weights, biases)


def preactivation(params, layer, x_below):
    """Pre-activation of ``layer`` (>= 1) given the activity of the layer below."""
    w = params.weights[layer - 1]
    if x_below.shape[-1] != w.shape[1]:
        raise ShapeError(f"activity {x_below.shape} does not fit weight {w.shape}")
    return x_below @ w.T + params.biases[layer - 1]


def forward_with_preactivations(spec, params, x0):
    x0 = as_float_array(x0)
    if x0.shape[-1] != spec.layer_sizes[0]:
        raise ShapeError(f"input of length {x0.shape[-1]} fed to network {spec.layer_sizes}")
    xs, pres = [x0], [None]
    for l in range(1, spec.depth + 1):
        a = preactivation(params, l, xs[-1])
        pres.append(a)
        xs.append(apply_activation(spec.activation_of(l), a))
    return xs, pres


def forward_pass(spec, params, x0) -> List[np.ndarray]:
    """Activities ``x_0 .. x_L`` of the feedforward network."""
    return forward_with_preactivations(spec, params, x0)[0]


def _row_mean(values):
    return float(np.mean(values))


def supervised_loss(head, output, target):
    """Loss of ``output`` against ``target``, averaged over batch rows.

    ``linear_squared_error`` is ``0.5 * ||output - target||^2`` so that its
    gradient is ``output - target``.  ``softmax_crossentropy`` expects
    ``output`` to already be a probability vector.
    """
    output = as_float_array(output)
    target = as_float_array(target)
    if output.shape != target.shape:
        raise ShapeError(f"output {output.shape} and target {target.shape} disagree")
    if head == "linear_squared_error":
        return _row_mean(0.5 * np.sum((output - target) ** 2, axis=-1))
    if head == "softmax_crossentropy":
        if np.any(output < 0) or not np.allclose(output.sum(axis=-1), 1.0, atol=1e-9):
            raise ValueError("cross-entropy needs a probability distribution as output")
        with np.errstate(divide="ignore"):
            logs = np.where(target != 0, np.log(output), 0.0)
        return _row_mean(-np.sum(target * logs, axis=-1))
    raise ValueError(f"unknown output head {head!r}")


def loss_from_logits(head, logits, target):
    """Same as :func:`supervised_loss` but computed from the output pre-activation."""
    if head == "softmax_crossentropy":
        return _row_mean(-np.sum(target * log_softmax(logits), axis=-1))
    return supervised_loss(head, logits, target)


def output_error(head, logits, target):
    """Gradient of the loss with respect to the output pre-activation, per row."""
    if head == "softmax_crossentropy":
        return softmax(logits) - target
    return logits - target


def backprop_adjoints(spec, params, sample):
    """Per-row gradients of the loss w.r.t. every pre-activation and activity.

    Returns ``(xs, pres, deltas, adjoints)`` where ``deltas[l]`` is dL/d(pre_l)
    for ``1 <= l <= L`` and ``adjoints[l]`` is dL/dx_l for hidden layers
    ``1 <= l < L``; other entries are None.  Rows are not averaged here.
    """
    xs, pres = forward_with_preactivations(spec, params, sample.input)
    L = spec.depth
    deltas = [None] * (L + 1)
    adjoints = [None] * (L + 1)
    deltas[L] = output_error(spec.output_head, pres[L], sample.target)
    for l in range(L - 1, 0, -1):
        adjoints[l] = deltas[l + 1] @ params.weights[l]
        deltas[l] = adjoints[l] * activation_derivative(spec.hidden_activation, pres[l])
    return xs, pres, deltas, adjoints


def backprop_oracle(spec, params, sample):
    """Exact gradient of the (batch-mean) supervised loss by reverse mode."""
    params.check(spec)
    xs, _, deltas, _ = backprop_adjoints(spec, params, sample)
    n = sample.batch_size
    weights, biases = [], []
    for l in range(spec.depth):
        d = np.atleast_2d(deltas[l + 1])
        x = np.atleast_2d(xs[l])
        weights.append(d.T @ x / n)
        biases.append(d.sum(axis=0) / n)
    return GradientSet(weights, biases)


def accuracy(spec, params, sample):
    out = forward_pass(spec, params, sample.input)[-1]
    return float(np.mean(np.argmax(out, axis=-1) == np.argmax(sample.target, axis=-1)))
