"""Gradient comparison metrics, finite-difference oracles and second-order corrections."""

from dataclasses import dataclass, replace
from typing import List

import numpy as np

from . import energy as en
from .dynamics import relax
from .energy import ActivityState
from .learners import _checked, contrast, free_and_perturbed, normalize
from .linalg import ShapeError
from .model import GradientSet, backprop_oracle


@dataclass
class ComparisonReport:
    euclidean_distance: float
    cosine_similarity: float
    per_layer_distances: List[float]
    equilibrium_distance: float = 0.0


def cosine_similarity(a, b):
    """Standard cosine similarity; 0.0 when either vector is zero."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def compare_gradients(estimate, oracle, equilibrium_distance=0.0):
    if estimate.shapes() != oracle.shapes():
        raise ShapeError(f"gradient shapes differ: {estimate.shapes()} vs {oracle.shapes()}")
    a = estimate.flat()
    b = oracle.flat()
    per_layer = []
    for we, be, wo, bo in zip(estimate.weights, estimate.biases, oracle.weights, oracle.biases):
        per_layer.append(float(np.sqrt(np.sum((we - wo) ** 2) + np.sum((be - bo) ** 2))))
    return ComparisonReport(
        euclidean_distance=float(np.linalg.norm(a - b)),
        cosine_similarity=cosine_similarity(a, b),
        per_layer_distances=per_layer,
        equilibrium_distance=equilibrium_distance,
    )


def equilibrium_distance(a, b, layers=None):
    """Sum over layers of the Euclidean distance between two activity states.

    ``layers`` defaults to every layer except the fixed input.
    """
    a = a.activities if isinstance(a, ActivityState) else a
    b = b.activities if isinstance(b, ActivityState) else b
    if len(a) != len(b):
        raise ShapeError(f"states have {len(a)} and {len(b)} layers")
    layers = range(1, len(a)) if layers is None else layers
    total = 0.0
    for l in layers:
        if a[l].shape != b[l].shape:
            raise ShapeError(f"layer {l}: {a[l].shape} vs {b[l].shape}")
        total += float(np.linalg.norm(a[l] - b[l]))
    return total


def finite_diff_array(fn, x, probe_step=1e-5):
    """Central differences of scalar ``fn`` with respect to every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + probe_step
        up = fn(x)
        flat[i] = old - probe_step
        down = fn(x)
        flat[i] = old
        g[i] = (up - down) / (2.0 * probe_step)
    return grad


def finite_diff_weight_grad(fn, params, probe_step=1e-5):
    """Central-difference gradient of ``fn(params)`` for every weight and bias."""
    if not 1e-7 <= probe_step <= 1e-3:
        raise ValueError(f"probe_step must lie in [1e-7, 1e-3], got {probe_step}")
    work = params.copy()
    out_w, out_b = [], []
    for group, out in ((work.weights, out_w), (work.biases, out_b)):
        for arr in group:
            grad = np.zeros_like(arr)
            flat = arr.reshape(-1)
            g = grad.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + probe_step
                up = fn(work)
                flat[i] = old - probe_step
                down = fn(work)
                flat[i] = old
                g[i] = (up - down) / (2.0 * probe_step)
            out.append(grad)
    return GradientSet(out_w, out_b)


def relative_error(a, b):
    """Max-abs difference scaled by the larger max-abs magnitude (1 if both are tiny)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


@dataclass
class TaylorCorrection:
    cross_derivative_action: GradientSet
    method: str = "finite_difference"


def _shifted(state, direction, h):
    return ActivityState([x + h * d for x, d in zip(state.activities, direction)])


def cross_derivative_action(energy_kind, spec, params, sample, free_state, delta_x, h=1e-5, phase=None):
    """Mixed second derivative of the energy, d/dx dE/dW at ``free_state``, applied to ``delta_x``.

    Computed as a central difference of the weight gradient along the unit
    direction of ``delta_x``, scaled back by its norm.  ``phase`` defaults to
    the free phase.
    """
    phase = en.FREE if phase is None else phase
    delta = delta_x.activities if isinstance(delta_x, ActivityState) else delta_x
    delta = [np.zeros_like(x) if d is None else np.asarray(d, dtype=np.float64) for x, d in zip(free_state.activities, delta)]
    norm = float(np.sqrt(sum(np.sum(d * d) for d in delta)))
    if norm == 0.0:
        return TaylorCorrection(GradientSet.zeros_like(params))
    unit = [d / norm for d in delta]
    up = en.energy_weight_grad(energy_kind, spec, params, _shifted(free_state, unit, h), sample, phase)
    down = en.energy_weight_grad(energy_kind, spec, params, _shifted(free_state, unit, -h), sample, phase)
    return TaylorCorrection((up - down).scale(norm / (2.0 * h)))


def loss_force(energy_kind, spec, params, state, sample, phase):
    """Activity gradient of the unit-weight loss term at ``state``, per free layer."""
    with_loss = en.energy_activity_grad(energy_kind, spec, params, state, sample, phase.with_mode("nudged", lam=1.0))
    without = en.energy_activity_grad(energy_kind, spec, params, state, sample, phase.with_mode("free", lam=0.0))
    return [None if a is None else a - b for a, b in zip(with_loss, without)]


def linear_response(energy_kind, spec, params, sample, cfg, free):
    """Odd part of the equilibrium shift under a linearized loss force of size ``lam``.

    Relaxes the internal energy under the constant forces ``+lam f`` and
    ``-lam f`` (``f`` the loss force at the free equilibrium) and returns half
    the difference of the two equilibria.  Even-order terms of the shift
    cancel, so the result is ``lam`` times the linear response up to
    ``O(lam^3)``.
    """
    lam = cfg.phase.lam
    free_phase = cfg.phase.with_mode("free", lam=0.0)
    force = loss_force(energy_kind, spec, params, free.state, sample, cfg.phase)
    plus = relax(energy_kind, spec, params, sample, cfg.inference, free_phase, free.state,
                 [None if f is None else lam * f for f in force])
    minus = relax(energy_kind, spec, params, sample, cfg.inference, free_phase, free.state,
                  [None if f is None else -lam * f for f in force])
    _checked(plus, cfg, "forced")
    _checked(minus, cfg, "forced")
    return [0.5 * (p - m) for p, m in zip(plus.state.activities, minus.state.activities)]


def corrected_chl_update(energy_kind, spec, params, sample, cfg, h=1e-5):
    """Contrastive update with its leading Taylor error removed.

    The plain update divides the weight-gradient contrast by ``lam``; its
    error is the second-order Taylor residual of that contrast around the
    free equilibrium.  The residual is estimated as the contrast minus the
    loss term's own weight gradient minus the cross-derivative action along
    the linear response of the equilibrium, and subtracted.  What remains
    has an ``O(lam^2)`` error and is exact when the energy is quadratic in
    the activities.
    """
    phase = cfg.phase
    if phase.feedback_gain != 1.0:
        raise ValueError("corrected_chl_update assumes feedback_gain == 1")
    if phase.lam <= 0:
        raise ValueError("corrected_chl_update needs lambda > 0")
    if energy_kind == "hopfield" and phase.output_mode != "nudged":
        raise ValueError("the Hopfield correction needs the nudged phase")
    mode = phase.output_mode if phase.output_mode != "free" else "nudged"
    free, pert, phase = free_and_perturbed(energy_kind, spec, params, sample, cfg, mode)
    raw = contrast(energy_kind, spec, params, sample, free, pert, phase)
    lam = phase.lam
    response = linear_response(energy_kind, spec, params, sample, replace(cfg, phase=phase), free)
    action = cross_derivative_action(energy_kind, spec, params, sample, free.state, response, h).cross_derivative_action
    loss_grad = en.energy_weight_grad(
        energy_kind, spec, params, free.state, sample, phase.with_mode("nudged", lam=lam)
    ) - en.energy_weight_grad(energy_kind, spec, params, free.state, sample, phase.with_mode("free", lam=0.0))
    residual = raw - action - loss_grad
    n = sample.batch_size
    plain = normalize(energy_kind, spec, raw, lam, 1.0, n)
    return plain - normalize(energy_kind, spec, residual, lam, 1.0, n)


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r_squared: float
    degenerate: bool = False


def linearity_fit(xs, ys):
    """Ordinary least squares line through ``(xs, ys)`` with its R^2.

    Constant ``ys`` give R^2 reported as 0 with ``degenerate`` set.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("xs and ys must be 1-D and of equal length")
    if x.size < 3:
        raise ValueError("a linearity fit needs at least 3 points")
    xc = x - x.mean()
    sxx = float(np.dot(xc, xc))
    if sxx == 0.0:
        raise ValueError("degenerate fit: all xs are equal")
    slope = float(np.dot(xc, y - y.mean()) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return LinearFit(slope, intercept, 0.0, True)
    ss_res = float(np.sum((y - slope * x - intercept) ** 2))
    return LinearFit(slope, intercept, 1.0 - ss_res / ss_tot)


def equilibrium_gradient_oracle(energy_kind, spec, params, sample, free_state, phase=None):
    """Exact gradient of the loss at the free equilibrium, as a function of the weights.

    For the PC energy the free equilibrium is the forward pass and this is
    the backprop gradient.  For the Hopfield energy the adjoint is obtained by
    solving the transposed Jacobian of the equilibrium condition.
    """
    if energy_kind == "pc":
        return backprop_oracle(spec, params, sample)
    en.check_hopfield_spec(spec)
    gamma = 1.0 if phase is None else phase.feedback_gain
    L = spec.depth
    layers = list(range(1, L + 1))
    jac, offsets = en.hopfield_jacobian(spec, params, gamma, layers)
    xs = [np.atleast_2d(x) for x in free_state.activities]
    target = np.atleast_2d(sample.target)
    n = xs[0].shape[0]
    rhs = np.zeros((jac.shape[0], n))
    oL = offsets[L]
    rhs[oL:oL + spec.layer_sizes[L]] = (xs[L] - target).T
    adj = np.linalg.solve(jac.T, rhs)
    a = [None] + [adj[offsets[l]:offsets[l] + spec.layer_sizes[l]].T for l in layers]
    weights, biases = [], []
    for l in layers:
        g = a[l].T @ xs[l - 1]
        if l - 1 >= 1:
            g = g + gamma * xs[l].T @ a[l - 1]
        weights.append(g / n)
        biases.append(a[l].sum(axis=0) / n)
    return GradientSet(weights, biases)


def activity_direction_distance(change, adjoints, layers):
    """Sum over layers of the distance between unit descent directions.

    Compares ``-change[l]`` with ``adjoints[l]`` after normalizing each to
    unit length.  Layers whose change is still exactly zero are skipped.
    """
    total = 0.0
    for l in layers:
        c = -np.asarray(change[l]).ravel()
        a = np.asarray(adjoints[l]).ravel()
        nc = np.linalg.norm(c)
        na = np.linalg.norm(a)
        if nc == 0.0 or na == 0.0:
            continue
        total += float(np.linalg.norm(c / nc - a / na))
    return total
