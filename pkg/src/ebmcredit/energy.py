"""Energy functions over layered activities and their analytic gradients.

Two energies are provided:

``pc``
    The predictive-coding energy ``sum_l eps_l' Pi_l eps_l`` over hidden
    layers (no 1/2 factor), with ``eps_l = x_l - f(W x_{l-1} + b)``, plus
    ``lam`` times the output loss.  The output loss is a function of the
    penultimate activity through the output prediction: ``Pi_L ||T - mu_L||^2``
    for the squared head, cross-entropy of ``softmax(pre_L)`` otherwise.
    ``x_L`` is never a free variable here; it stores ``T`` when clamped and
    the current prediction ``mu_L`` otherwise.

``hopfield``
    The layered continuous Hopfield energy with a leak term,
    ``sum_l [0.5 ||x_l||^2 - x_l'(W x_{l-1} + b)]`` over layers 1..L, plus
    ``lam * 0.5 ||x_L - T||^2``.  Only defined for linear networks with a
    squared-error head.

Energies and energy gradients sum over minibatch rows, so every row behaves
as an independent copy of the network.

The feedback gain ``gamma`` multiplies each layer's top-down contribution to
its activity gradient.  The resulting dynamics are a per-layer rescaled
descent on ``sum_l gamma^(l-1) E_l + gamma^(L-1) lam L`` (see
:func:`feedback_weighted_energy`); with ``gamma = 1`` they are plain descent
on the total energy.
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .linalg import activation_derivative, apply_activation, as_float_array, log_softmax, softmax
from .model import GradientSet, preactivation

ENERGY_KINDS = ("pc", "hopfield")
OUTPUT_MODES = ("free", "clamped", "nudged")


@dataclass(frozen=True)
class PhaseConfig:
    """Settings of one inference phase.

    ``precisions[l]`` is the diagonal precision of layer ``l`` (entry 0 is
    ignored); ``None`` means unit precision everywhere.
    """

    lam: float = 1.0
    feedback_gain: float = 1.0
    precisions: Optional[Sequence] = None
    output_mode: str = "nudged"

    def __post_init__(self):
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.feedback_gain <= 1.0:
            raise ValueError(f"feedback gain must lie in [0, 1], got {self.feedback_gain}")

    @property
    def effective_lambda(self):
        return 0.0 if self.output_mode == "free" else float(self.lam)

    def precision(self, layer, size):
        if self.precisions is None or self.precisions[layer] is None:
            return np.ones(size)
        p = as_float_array(self.precisions[layer])
        if np.any(p < 0):
            raise ValueError(f"precision of layer {layer} has negative entries")
        return np.broadcast_to(p, (size,))

    def with_mode(self, mode, **changes):
        return replace(self, output_mode=mode, **changes)


FREE = PhaseConfig(lam=0.0, output_mode="free")


@dataclass
class ActivityState:
    activities: List[np.ndarray]

    def __getitem__(self, l):
        return self.activities[l]

    def __len__(self):
        return len(self.activities)

    def copy(self):
        return ActivityState([x.copy() for x in self.activities])


@dataclass
class EnergyBreakdown:
    total: float
    internal: float
    supervised: float
    per_layer_internal: List[float] = field(default_factory=list)
    prediction_errors: List[np.ndarray] = field(default_factory=list)


def _outer_sum(a, b):
    """Sum over rows of ``a_r b_r^T``; works for single vectors too."""
    a2 = a.reshape(-1, a.shape[-1])
    b2 = b.reshape(-1, b.shape[-1])
    return a2.T @ b2


def _row_sum(a):
    return a.reshape(-1, a.shape[-1]).sum(axis=0)


def free_layers(kind, spec, phase):
    """Indices of the layers that move during inference."""
    L = spec.depth
    if kind == "pc":
        return list(range(1, L))
    if kind == "hopfield":
        return list(range(1, L if phase.output_mode == "clamped" else L + 1))
    raise ValueError(f"unknown energy kind {kind!r}")


def loss_scale(kind, spec):
    """Ratio between an energy's supervised term and :func:`model.supervised_loss`."""
    if kind == "pc" and spec.output_head == "linear_squared_error":
        return 2.0
    return 1.0


def check_hopfield_spec(spec):
    if spec.hidden_activation != "linear" or spec.output_head != "linear_squared_error":
        raise ValueError("the Hopfield energy needs linear activations and a squared-error head")


class _PCTerms:
    """Prediction errors and derived quantities of the PC energy at one state."""

    def __init__(self, spec, params, state, sample, phase):
        L = spec.depth
        xs = state.activities
        self.pres = [None] * (L + 1)
        self.eps = [None] * (L + 1)
        self.prec = [None] * (L + 1)
        for l in range(1, L):
            self.pres[l] = preactivation(params, l, xs[l - 1])
            self.eps[l] = xs[l] - apply_activation(spec.hidden_activation, self.pres[l])
            self.prec[l] = phase.precision(l, spec.layer_sizes[l])
        self.pres[L] = preactivation(params, L, xs[L - 1])
        self.prec[L] = phase.precision(L, spec.layer_sizes[L])
        target = sample.target
        if spec.output_head == "softmax_crossentropy":
            self.output = softmax(self.pres[L])
            self.supervised = float(-np.sum(target * log_softmax(self.pres[L])))
            self.dsup_dpre = self.output - target
        else:
            self.output = self.pres[L]
            diff = self.output - target
            self.supervised = float(np.sum(self.prec[L] * diff * diff))
            self.dsup_dpre = 2.0 * self.prec[L] * diff
        self.eps[L] = self.output - target


def pc_energy(spec, params, state, sample, phase):
    t = _PCTerms(spec, params, state, sample, phase)
    per_layer = [float(np.sum(t.prec[l] * t.eps[l] * t.eps[l])) for l in range(1, spec.depth)]
    internal = float(np.sum(per_layer))
    lam = phase.effective_lambda
    return EnergyBreakdown(
        total=internal + lam * t.supervised,
        internal=internal,
        supervised=t.supervised,
        per_layer_internal=per_layer,
        prediction_errors=t.eps[1:],
    )


def hopfield_energy(params, state, sample, phase):
    xs = state.activities
    L = len(xs) - 1
    per_layer = []
    for l in range(1, L + 1):
        drive = preactivation(params, l, xs[l - 1])
        per_layer.append(float(0.5 * np.sum(xs[l] * xs[l]) - np.sum(xs[l] * drive)))
    internal = float(np.sum(per_layer))
    supervised = float(0.5 * np.sum((xs[L] - sample.target) ** 2))
    lam = phase.effective_lambda
    return EnergyBreakdown(
        total=internal + lam * supervised,
        internal=internal,
        supervised=supervised,
        per_layer_internal=per_layer,
    )


def energy(kind, spec, params, state, sample, phase):
    if kind == "pc":
        return pc_energy(spec, params, state, sample, phase)
    if kind == "hopfield":
        check_hopfield_spec(spec)
        return hopfield_energy(params, state, sample, phase)
    raise ValueError(f"unknown energy kind {kind!r}")


def feedback_weighted_energy(kind, spec, breakdown, phase):
    """Lyapunov function of the gamma-weighted activity dynamics."""
    gamma = phase.feedback_gain
    if gamma == 1.0:
        return breakdown.total
    weighted = sum(gamma**i * e for i, e in enumerate(breakdown.per_layer_internal))
    return weighted + gamma ** (spec.depth - 1) * (breakdown.total - breakdown.internal)


def energy_activity_grad(kind, spec, params, state, sample, phase):
    """dE/dx_l for every free layer; fixed layers get ``None``.

    The top-down part of each layer's gradient is multiplied by the feedback
    gain.  For the PC energy the top-down part of the penultimate layer is the
    loss term, so it carries ``gamma * lam``.
    """
    L = spec.depth
    gamma = phase.feedback_gain
    lam = phase.effective_lambda
    grads = [None] * (L + 1)
    xs = state.activities
    if kind == "pc":
        t = _PCTerms(spec, params, state, sample, phase)
        weighted = [None] * (L + 1)
        for l in range(1, L):
            weighted[l] = t.prec[l] * t.eps[l]
        for l in range(1, L):
            own = 2.0 * weighted[l]
            if l < L - 1:
                fp = activation_derivative(spec.hidden_activation, t.pres[l + 1])
                top_down = -2.0 * ((weighted[l + 1] * fp) @ params.weights[l])
                grads[l] = own + gamma * top_down
            else:
                top_down = t.dsup_dpre @ params.weights[l]
                grads[l] = own + (gamma * lam) * top_down
        return grads
    if kind == "hopfield":
        check_hopfield_spec(spec)
        for l in free_layers(kind, spec, phase):
            g = xs[l] - preactivation(params, l, xs[l - 1])
            if l < L:
                g = g - gamma * (xs[l + 1] @ params.weights[l])
            else:
                g = g + lam * (xs[L] - sample.target)
            grads[l] = g
        return grads
    raise ValueError(f"unknown energy kind {kind!r}")


def energy_weight_grad(kind, spec, params, state, sample, phase):
    """dE/dW_l and dE/db_l at fixed activities."""
    L = spec.depth
    xs = state.activities
    weights, biases = [], []
    if kind == "pc":
        t = _PCTerms(spec, params, state, sample, phase)
        for l in range(1, L):
            fp = activation_derivative(spec.hidden_activation, t.pres[l])
            d = -2.0 * t.prec[l] * t.eps[l] * fp
            weights.append(_outer_sum(d, xs[l - 1]))
            biases.append(_row_sum(d))
        d = phase.effective_lambda * t.dsup_dpre
        weights.append(_outer_sum(d, xs[L - 1]))
        biases.append(_row_sum(d))
        return GradientSet(weights, biases)
    if kind == "hopfield":
        check_hopfield_spec(spec)
        for l in range(1, L + 1):
            weights.append(-_outer_sum(xs[l], xs[l - 1]))
            biases.append(-_row_sum(xs[l]))
        return GradientSet(weights, biases)
    raise ValueError(f"unknown energy kind {kind!r}")


def hopfield_jacobian(spec, params, gamma, layers):
    """Jacobian of the gamma-weighted Hopfield activity gradient over ``layers``.

    Returns the dense matrix and the row offset of each layer in it.
    """
    sizes = spec.layer_sizes
    offsets = {}
    pos = 0
    for l in layers:
        offsets[l] = pos
        pos += sizes[l]
    jac = np.eye(pos)
    for l in layers:
        o = offsets[l]
        if l - 1 in offsets:
            ob = offsets[l - 1]
            jac[o:o + sizes[l], ob:ob + sizes[l - 1]] = -params.weights[l - 1]
        if l + 1 in offsets:
            oa = offsets[l + 1]
            jac[o:o + sizes[l], oa:oa + sizes[l + 1]] = -gamma * params.weights[l].T
    return jac, offsets


def hopfield_min_eigenvalue(spec, params, phase):
    """Smallest real part of the Jacobian's spectrum; the dynamics settle only if it is positive."""
    jac, _ = hopfield_jacobian(spec, params, phase.feedback_gain, free_layers("hopfield", spec, phase))
    if phase.effective_lambda > 0 and phase.output_mode == "nudged":
        n = spec.layer_sizes[-1]
        jac[-n:, -n:] += phase.effective_lambda * np.eye(n)
    return float(np.min(np.linalg.eigvals(jac).real))


def pc_output(spec, params, x_penultimate):
    """Output prediction ``mu_L`` from the penultimate activity."""
    return apply_activation(spec.activation_of(spec.depth), preactivation(params, spec.depth, x_penultimate))
