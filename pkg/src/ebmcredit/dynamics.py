"""Inference phases: explicit-Euler descent of the activities on an energy."""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from . import energy as en
from .energy import ActivityState, PhaseConfig
from .model import forward_pass


class DivergenceError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class InferenceConfig:
    step_size: float = 0.1
    max_steps: int = 50
    convergence_tol: float = 1e-8
    record_trace: bool = False
    # absolute energy increase tolerated before declaring divergence
    divergence_tol: float = 1e-6
    # "step": any rise between consecutive steps is divergence.  "bounded":
    # only a rise above the starting energy is; relu kinks make the
    # fixed-step process chatter slightly without ever diverging.
    divergence_check: str = "step"

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be nonnegative")
        if self.divergence_check not in ("step", "bounded"):
            raise ValueError(f"unknown divergence_check {self.divergence_check!r}")


@dataclass
class EquilibriumResult:
    phase: str
    state: ActivityState
    steps_taken: int
    converged: bool
    energy_trace: Optional[List[en.EnergyBreakdown]] = None
    activity_trace: Optional[List[ActivityState]] = None
    last_change: float = 0.0
    config: PhaseConfig = field(default=None, repr=False)
    energy_rises: int = 0


class TraceRow(NamedTuple):
    step: int
    internal: float
    supervised: float
    total: float


def _refresh_output(kind, spec, params, state, sample, phase):
    """Keep the non-free output entry of a PC state consistent with the phase."""
    if kind != "pc":
        return
    L = spec.depth
    if phase.output_mode == "clamped":
        state.activities[L] = np.array(sample.target, dtype=np.float64, copy=True)
    else:
        state.activities[L] = en.pc_output(spec, params, state.activities[L - 1])


def relax(kind, spec, params, sample, cfg, phase, init, force=None):
    """Run Euler steps ``x <- x - step_size * (dE/dx + force)`` on the free layers.

    ``force`` is an optional constant per-layer addition to the activity
    gradient (a linear energy term); entries for fixed layers are ignored.
    """
    state = init.copy()
    layers = en.free_layers(kind, spec, phase)
    if phase.output_mode == "clamped":
        state.activities[spec.depth] = np.array(sample.target, dtype=np.float64, copy=True)
    _refresh_output(kind, spec, params, state, sample, phase)

    def lyapunov(b):
        value = en.feedback_weighted_energy(kind, spec, b, phase)
        if force is not None:
            value += sum(float(np.sum(force[l] * state.activities[l])) for l in layers if force[l] is not None)
        return value

    current = en.energy(kind, spec, params, state, sample, phase)
    energies = [current] if cfg.record_trace else None
    snapshots = [state.copy()] if cfg.record_trace else None
    previous_value = start_value = lyapunov(current)
    rises = 0
    converged = False
    change = np.inf
    steps = 0
    eta = cfg.step_size
    while steps < cfg.max_steps:
        grads = en.energy_activity_grad(kind, spec, params, state, sample, phase)
        change = 0.0
        for l in layers:
            g = grads[l] if force is None or force[l] is None else grads[l] + force[l]
            step = eta * g
            state.activities[l] = state.activities[l] - step
            change = max(change, float(np.max(np.abs(step))))
        _refresh_output(kind, spec, params, state, sample, phase)
        steps += 1
        current = en.energy(kind, spec, params, state, sample, phase)
        value = lyapunov(current)
        if not np.isfinite(value):
            raise DivergenceError(f"energy became non-finite after {steps} steps; reduce step_size (now {eta})")
        if value > previous_value:
            rises += 1
        reference = previous_value if cfg.divergence_check == "step" else start_value
        if value - reference > cfg.divergence_tol:
            raise DivergenceError(
                f"energy rose by {value - reference:.3g} at step {steps}; reduce step_size (now {eta})"
            )
        previous_value = value
        if cfg.record_trace:
            energies.append(current)
            snapshots.append(state.copy())
        if change <= cfg.convergence_tol:
            converged = True
            break
    return EquilibriumResult(
        phase=phase.output_mode,
        state=state,
        steps_taken=steps,
        converged=converged,
        energy_trace=energies,
        activity_trace=snapshots,
        last_change=change,
        config=phase,
        energy_rises=rises,
    )


def feedforward_state(spec, params, sample):
    return ActivityState(forward_pass(spec, params, sample.input))


def run_free_phase(kind, spec, params, sample, cfg, phase=None):
    """Free-phase equilibrium.

    For the PC energy this is the forward pass, returned without iterating.
    The Hopfield free phase starts from the forward pass and relaxes with
    ``lam = 0`` and the feedback gain of ``phase``.
    """
    phase = (phase or PhaseConfig()).with_mode("free", lam=0.0)
    init = feedforward_state(spec, params, sample)
    if kind == "pc":
        trace = [en.pc_energy(spec, params, init, sample, phase)] if cfg.record_trace else None
        snaps = [init.copy()] if cfg.record_trace else None
        return EquilibriumResult("free", init, 0, True, trace, snaps, 0.0, phase)
    if kind == "hopfield":
        en.check_hopfield_spec(spec)
        check_hopfield_stable(spec, params, phase)
        return relax(kind, spec, params, sample, cfg, phase, init)
    raise ValueError(f"unknown energy kind {kind!r}")


def check_hopfield_stable(spec, params, phase):
    low = en.hopfield_min_eigenvalue(spec, params, phase)
    if low <= 0:
        raise DivergenceError(
            f"Hopfield couplings too strong (smallest Jacobian eigenvalue {low:.3g}); "
            "the energy has no minimum, shrink the weights"
        )


def run_perturbed_phase(kind, spec, params, sample, cfg, phase, init):
    """Clamped or nudged phase started from ``init`` (usually the free equilibrium)."""
    if phase.output_mode == "free":
        raise ValueError("use run_free_phase for the free phase")
    return relax(kind, spec, params, sample, cfg, phase, init.state if isinstance(init, EquilibriumResult) else init)


def energy_trace_decomposition(result):
    if not result.energy_trace:
        raise ValueError("no energy trace recorded; run with record_trace=True")
    return [TraceRow(i, b.internal, b.supervised, b.total) for i, b in enumerate(result.energy_trace)]


def require_converged(result, what):
    if not result.converged:
        raise ConvergenceError(
            f"{what} phase did not converge in {result.steps_taken} steps "
            f"(last max-norm change {result.last_change:.3g})"
        )
    return result
