"""Weight-update rules that turn energy relaxations into loss-gradient estimates.

Every rule returns a :class:`GradientSet` estimating the gradient of the
batch-mean supervised loss, so results can be compared directly with
:func:`model.backprop_oracle`.  Raw energy gradients are rescaled per layer
by ``lam * gamma**(L - 1 - l) * loss_scale``: the loss weight, the feedback
attenuation reaching weight layer ``l`` and the factor between the energy's
supervised term and the loss.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import energy as en
from .dynamics import (
    ConvergenceError,
    EquilibriumResult,
    InferenceConfig,
    require_converged,
    run_free_phase,
    run_perturbed_phase,
)
from .energy import PhaseConfig
from .model import GradientSet, accuracy, backprop_oracle, forward_pass, loss_from_logits, preactivation

RULES = ("pc", "chl", "ep", "pc_nudge", "first_step", "bp")


@dataclass(frozen=True)
class RuleConfig:
    rule: str = "pc_nudge"
    phase: PhaseConfig = field(default_factory=lambda: PhaseConfig(lam=0.001))
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    weight_lr: float = 0.001
    effective_lr_scaling: bool = False
    energy_kind: str = "pc"
    momentum: float = 0.9
    # the fixed-step training protocol does not ask for a converged phase
    require_convergence: bool = True

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.energy_kind not in en.ENERGY_KINDS:
            raise ValueError(f"unknown energy kind {self.energy_kind!r}")
        if self.weight_lr < 0:
            raise ValueError("weight_lr must be nonnegative")
        if self.rule in ("ep", "pc_nudge", "first_step", "pc") and self.phase.lam <= 0:
            raise ValueError(f"rule {self.rule} needs lambda > 0")
        if self.rule in ("first_step", "pc_nudge", "pc") and self.energy_kind != "pc":
            raise ValueError(f"rule {self.rule} needs the PC energy")

    @property
    def lr_factor(self):
        """Multiplier between the learning rate given to the optimizer and ``weight_lr``."""
        return 1.0 / self.phase.lam if self.effective_lr_scaling else 1.0


def _gradient_scales(kind, spec, lam, gamma):
    L = spec.depth
    scale = en.loss_scale(kind, spec)
    return [lam * gamma ** (L - 1 - l) * scale for l in range(L)]


def normalize(kind, spec, raw, lam, gamma, batch_size):
    """Divide a raw (batch-summed) energy-gradient difference by its known scale."""
    factors = [1.0 / (s * batch_size) for s in _gradient_scales(kind, spec, lam, gamma)]
    return raw.scale_layers(factors)


def _checked(result, cfg, what):
    if cfg.require_convergence:
        require_converged(result, what)
    return result


def free_and_perturbed(kind, spec, params, sample, cfg, mode):
    """Free equilibrium and the equilibrium of ``mode`` started from it."""
    phase = cfg.phase.with_mode(mode)
    free = _checked(run_free_phase(kind, spec, params, sample, cfg.inference, phase), cfg, "free")
    pert = _checked(run_perturbed_phase(kind, spec, params, sample, cfg.inference, phase, free), cfg, mode)
    return free, pert, phase


def contrast(kind, spec, params, sample, free, pert, phase):
    """Weight gradient at the perturbed equilibrium minus the one at the free equilibrium."""
    g_pert = en.energy_weight_grad(kind, spec, params, pert.state, sample, phase)
    g_free = en.energy_weight_grad(kind, spec, params, free.state, sample, phase.with_mode("free", lam=0.0))
    return g_pert - g_free


def _loss_weight(kind, phase):
    # a clamped Hopfield output is pinned to T, so its pull does not carry lam
    if kind == "hopfield" and phase.output_mode == "clamped":
        return 1.0
    return phase.lam


def chl_update(energy_kind, spec, params, sample, cfg):
    """Contrastive Hebbian update between the clamped and the free equilibria."""
    if cfg.phase.output_mode != "clamped":
        raise ValueError("chl_update needs a clamped phase")
    free, clamped, phase = free_and_perturbed(energy_kind, spec, params, sample, cfg, "clamped")
    raw = contrast(energy_kind, spec, params, sample, free, clamped, phase)
    return normalize(energy_kind, spec, raw, _loss_weight(energy_kind, phase), phase.feedback_gain, sample.batch_size)


def ep_update(energy_kind, spec, params, sample, cfg):
    """Equilibrium-propagation update from a weakly nudged phase."""
    if cfg.phase.output_mode != "nudged":
        raise ValueError("ep_update needs a nudged phase")
    if cfg.phase.lam <= 0:
        raise ValueError("ep_update needs lambda > 0")
    free, nudged, phase = free_and_perturbed(energy_kind, spec, params, sample, cfg, "nudged")
    raw = contrast(energy_kind, spec, params, sample, free, nudged, phase)
    return normalize(energy_kind, spec, raw, phase.lam, phase.feedback_gain, sample.batch_size)


def pc_nudge_raw(spec, params, sample, cfg):
    """PC weight gradient at the nudged equilibrium, batch-summed and unscaled."""
    if cfg.phase.lam <= 0:
        raise ValueError("pc_nudge needs lambda > 0")
    phase = cfg.phase.with_mode("nudged")
    free = run_free_phase("pc", spec, params, sample, cfg.inference, phase)
    nudged = _checked(run_perturbed_phase("pc", spec, params, sample, cfg.inference, phase, free), cfg, "nudged")
    # the free-phase PC weight gradient is identically zero, so it is skipped
    return en.energy_weight_grad("pc", spec, params, nudged.state, sample, phase), phase


def pc_nudge_update(spec, params, sample, cfg):
    raw, phase = pc_nudge_raw(spec, params, sample, cfg)
    return normalize("pc", spec, raw, phase.lam, phase.feedback_gain, sample.batch_size)


def _check_free_equilibrium(spec, params, sample, init):
    expected = forward_pass(spec, params, sample.input)
    state = init.state if isinstance(init, EquilibriumResult) else init
    for l in range(spec.depth):
        if state[l].shape != expected[l].shape or np.max(np.abs(state[l] - expected[l])) > 1e-12:
            raise ValueError(f"first_step_update needs the free equilibrium; layer {l} is displaced")


def first_step_trace(spec, params, sample, cfg, init=None):
    """Run synchronous nudged steps from the free equilibrium until every layer has moved.

    Returns ``(grads, errors)``.  ``grads`` is the normalized weight update,
    each layer taken at the step where its prediction error first appears.
    ``errors[l]`` is the first displacement of hidden layer ``l`` divided by
    its known step factor; it reproduces dL/dx_l row by row.
    """
    if cfg.phase.precisions is not None:
        raise ValueError("first_step_update assumes unit precisions")
    if init is not None:
        _check_free_equilibrium(spec, params, sample, init)
    L = spec.depth
    eta = cfg.inference.step_size
    lam = cfg.phase.lam
    phase = cfg.phase.with_mode("nudged", feedback_gain=1.0)
    scale = en.loss_scale("pc", spec)
    n = sample.batch_size
    state = en.ActivityState(forward_pass(spec, params, sample.input))
    g0 = en.energy_weight_grad("pc", spec, params, state, sample, phase)
    weights = [None] * L
    biases = [None] * L
    weights[L - 1] = g0.weights[L - 1] / (lam * scale * n)
    biases[L - 1] = g0.biases[L - 1] / (lam * scale * n)
    errors = [None] * (L + 1)
    for k in range(L - 1):
        layer = L - 1 - k
        grads = en.energy_activity_grad("pc", spec, params, state, sample, phase)
        before = state[layer].copy()
        for l in range(1, L):
            state.activities[l] = state.activities[l] - eta * grads[l]
        state.activities[L] = en.pc_output(spec, params, state[L - 1])
        factor = eta * lam * (2.0 * eta) ** k
        errors[layer] = (before - state[layer]) / (factor * scale)
        g = en.energy_weight_grad("pc", spec, params, state, sample, phase)
        wfactor = lam * (2.0 * eta) ** (k + 1) * scale * n
        weights[layer - 1] = g.weights[layer - 1] / wfactor
        biases[layer - 1] = g.biases[layer - 1] / wfactor
    return GradientSet(weights, biases), errors


def first_step_update(spec, params, sample, cfg, init=None):
    """Loss gradient read off the first inference step that reaches each layer.

    Starting exactly at the feedforward state, the output error enters layer
    ``L-1`` on step 1 and moves down one layer per step; the prediction error
    a layer holds on its first step is a scaled copy of the backprop adjoint.
    """
    return first_step_trace(spec, params, sample, cfg, init)[0]


def rule_update(spec, params, sample, cfg):
    """Dispatch to the rule named in ``cfg``; returns a batch-mean gradient estimate."""
    rule = cfg.rule
    if rule == "bp":
        return backprop_oracle(spec, params, sample)
    if rule == "first_step":
        return first_step_update(spec, params, sample, cfg)
    if rule == "pc_nudge":
        return pc_nudge_update(spec, params, sample, cfg)
    if rule == "pc":
        return chl_update("pc", spec, params, sample, replace(cfg, phase=cfg.phase.with_mode("clamped")))
    if rule == "chl":
        return chl_update(cfg.energy_kind, spec, params, sample, replace(cfg, phase=cfg.phase.with_mode("clamped")))
    if rule == "ep":
        return ep_update(cfg.energy_kind, spec, params, sample, replace(cfg, phase=cfg.phase.with_mode("nudged")))
    raise ValueError(f"unknown rule {rule!r}")


class SGDMomentum:
    """Heavy-ball SGD: ``v <- mu v + g``, ``p <- p - lr v``."""

    def __init__(self, lr, momentum=0.9):
        if lr < 0 or not 0.0 <= momentum < 1.0:
            raise ValueError("need lr >= 0 and momentum in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self, params, grads):
        if self.velocity is None:
            self.velocity = grads.copy()
        else:
            self.velocity = self.velocity.scale(self.momentum) + grads
        return params - self.velocity.scale(self.lr)


def make_optimizer(cfg):
    return SGDMomentum(cfg.weight_lr * cfg.lr_factor, cfg.momentum)


class TrainingDiverged(RuntimeError):
    pass


def train_epoch(rule_cfg, spec, params, dataset_batches, optimizer_state, oracle_similarity=False, eval_sample=None):
    """One pass over ``dataset_batches`` with the rule of ``rule_cfg``.

    Metrics hold one dict per batch with the loss and accuracy measured before
    the update, the cosine similarity to the oracle gradient when
    ``oracle_similarity`` is set and the accuracy on ``eval_sample`` after the
    update when given.
    """
    from .analysis import cosine_similarity

    metrics = []
    for i, batch in enumerate(dataset_batches):
        logits = preactivation(params, spec.depth, forward_pass(spec, params, batch.input)[spec.depth - 1])
        loss = loss_from_logits(spec.output_head, logits, batch.target)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at batch {i}; lower the learning rate")
        row = {"batch": i, "loss": loss, "accuracy": accuracy(spec, params, batch)}
        grads = rule_update(spec, params, batch, rule_cfg)
        if oracle_similarity:
            row["cosine"] = cosine_similarity(grads.flat(), backprop_oracle(spec, params, batch).flat())
        if rule_cfg.effective_lr_scaling:
            # the optimizer runs at lr / lam, so it is fed the lam-scaled update
            grads = grads.scale(rule_cfg.phase.lam)
        params = optimizer_state.step(params, grads)
        if not all(np.all(np.isfinite(a)) for a in params.arrays()):
            raise TrainingDiverged(f"parameters became non-finite at batch {i}")
        if eval_sample is not None:
            row["eval_accuracy"] = accuracy(spec, params, eval_sample)
        metrics.append(row)
    return params, metrics


__all__ = [
    "RULES",
    "RuleConfig",
    "ConvergenceError",
    "chl_update",
    "ep_update",
    "pc_nudge_update",
    "first_step_update",
    "first_step_trace",
    "rule_update",
    "SGDMomentum",
    "make_optimizer",
    "train_epoch",
]
