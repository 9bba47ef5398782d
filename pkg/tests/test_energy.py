import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_net, make_sample
from ebmcredit import energy as en
from ebmcredit.analysis import finite_diff_array, finite_diff_weight_grad, relative_error
from ebmcredit.dynamics import feedforward_state
from ebmcredit.experiments import check_finite_differences
from ebmcredit.model import NetworkSpec, ParameterSet, Sample


def _state(spec, params, sample, seed, noise=0.3):
    rng = np.random.default_rng(seed)
    state = feedforward_state(spec, params, sample)
    for l in range(1, spec.depth):
        state.activities[l] = state[l] + noise * rng.normal(size=state[l].shape)
    return state


def test_phase_config_validation():
    with pytest.raises(ValueError):
        en.PhaseConfig(lam=1.5)
    with pytest.raises(ValueError):
        en.PhaseConfig(feedback_gain=-0.1)
    with pytest.raises(ValueError):
        en.PhaseConfig(output_mode="half")
    assert en.FREE.effective_lambda == 0.0
    with pytest.raises(ValueError):
        en.PhaseConfig(precisions=[None, [-1.0]]).precision(1, 1)


def test_pc_energy_zero_at_feedforward_state():
    spec, params = make_net((5, 4, 3, 2), "relu", "softmax_crossentropy", seed=3)
    sample = make_sample(spec, 2, 3)
    b = en.pc_energy(spec, params, feedforward_state(spec, params, sample), sample, en.FREE)
    assert b.internal == 0.0
    assert b.total == 0.0
    assert b.supervised > 0.0


def test_pc_energy_hand_computed():
    spec = NetworkSpec((2, 2, 1), "tanh", "linear_squared_error")
    params = ParameterSet([np.array([[1.0, 0.0], [0.5, -1.0]]), np.array([[2.0, 1.0]])],
                          [np.array([0.0, 0.1]), np.array([0.5])])
    x0 = np.array([0.2, 0.4])
    x1 = np.array([0.3, -0.2])
    target = np.array([1.0])
    eps1 = x1 - np.tanh(np.array([0.2, 0.1 - 0.3]))
    out = 2.0 * 0.3 + 1.0 * (-0.2) + 0.5
    internal = eps1[0] ** 2 + eps1[1] ** 2
    supervised = (out - 1.0) ** 2
    state = en.ActivityState([x0, x1, np.array([out])])
    b = en.pc_energy(spec, params, state, Sample(x0, target), en.PhaseConfig(lam=0.25))
    assert np.isclose(b.internal, internal, atol=1e-15)
    assert np.isclose(b.supervised, supervised, atol=1e-15)
    assert np.isclose(b.total, internal + 0.25 * supervised, atol=1e-15)


def test_hopfield_energy_hand_computed():
    spec = NetworkSpec((1, 1, 1), "linear", "linear_squared_error")
    params = ParameterSet([np.array([[2.0]]), np.array([[3.0]])], [np.zeros(1), np.zeros(1)])
    state = en.ActivityState([np.array([1.0]), np.array([0.5]), np.array([1.0])])
    b = en.energy("hopfield", spec, params, state, Sample(np.array([1.0]), np.array([0.0])), en.PhaseConfig(lam=0.5))
    # layer 1: 0.125 - 1.0, layer 2: 0.5 - 1.5, loss 0.5 * 1
    assert np.isclose(b.internal, -1.875, atol=1e-15)
    assert np.isclose(b.supervised, 0.5, atol=1e-15)
    assert np.isclose(b.total, -1.625, atol=1e-15)


def test_hopfield_rejects_nonlinear_nets():
    spec, params = make_net((3, 2, 2), "relu", "linear_squared_error")
    with pytest.raises(ValueError):
        en.energy("hopfield", spec, params, feedforward_state(spec, params, make_sample(spec)),
                  make_sample(spec), en.FREE)


def test_pc_weight_grad_single_layer_closed_form():
    spec, params = make_net((4, 3, 2), "tanh", "linear_squared_error", seed=2)
    sample = make_sample(spec, 1, 2)
    state = _state(spec, params, sample, 0)
    x0, x1 = sample.input[0], state[1][0]
    pre = params.weights[0] @ x0 + params.biases[0]
    eps = x1 - np.tanh(pre)
    expected = np.outer(-2.0 * eps * (1 - np.tanh(pre) ** 2), x0)
    g = en.energy_weight_grad("pc", spec, params, state, sample, en.PhaseConfig(lam=0.3))
    assert np.allclose(g.weights[0], expected, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["relu", "tanh", "linear"]), st.sampled_from(["softmax_crossentropy", "linear_squared_error"]),
       st.sampled_from(["free", "clamped", "nudged"]), st.floats(0.0, 1.0), st.integers(0, 10**6))
def test_pc_activity_grad_matches_finite_differences(activation, head, mode, lam, seed):
    spec, params = make_net((5, 4, 3, 3), activation, head, seed=seed)
    sample = make_sample(spec, 2, seed)
    phase = en.PhaseConfig(lam=lam, output_mode=mode)
    state = _state(spec, params, sample, seed)
    grads = en.energy_activity_grad("pc", spec, params, state, sample, phase)
    for l in range(1, spec.depth):
        def total(x, l=l):
            s = state.copy()
            s.activities[l] = x
            if mode != "clamped":
                s.activities[spec.depth] = en.pc_output(spec, params, s[spec.depth - 1])
            return en.pc_energy(spec, params, s, sample, phase).total
        fd = finite_diff_array(total, state[l], 1e-6)
        assert relative_error(fd, grads[l]) <= 1e-4 or np.max(np.abs(fd - grads[l])) <= 1e-7


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["free", "clamped", "nudged"]), st.floats(0.0, 1.0), st.integers(0, 10**6))
def test_hopfield_grads_match_finite_differences(mode, lam, seed):
    spec, params = make_net((3, 4, 2), "linear", "linear_squared_error", seed=seed, scale=0.3)
    sample = make_sample(spec, 2, seed)
    phase = en.PhaseConfig(lam=lam, output_mode=mode)
    state = _state(spec, params, sample, seed)
    state.activities[2] = state[2] + 0.2
    grads = en.energy_activity_grad("hopfield", spec, params, state, sample, phase)
    for l in en.free_layers("hopfield", spec, phase):
        def total(x, l=l):
            s = state.copy()
            s.activities[l] = x
            return en.energy("hopfield", spec, params, s, sample, phase).total
        assert relative_error(finite_diff_array(total, state[l], 1e-5), grads[l]) <= 1e-7
    wg = en.energy_weight_grad("hopfield", spec, params, state, sample, phase)
    fd = finite_diff_weight_grad(lambda p: en.energy("hopfield", spec, p, state, sample, phase).total, params)
    assert relative_error(fd.flat(), wg.flat()) <= 1e-7


def test_pc_weight_grad_matches_finite_differences():
    for seed in range(5):
        spec, params = make_net((5, 4, 3, 3), "tanh", "softmax_crossentropy", seed=seed)
        sample = make_sample(spec, 2, seed)
        phase = en.PhaseConfig(lam=0.4)
        state = _state(spec, params, sample, seed)
        fd = finite_diff_weight_grad(lambda p: en.pc_energy(spec, p, state, sample, phase).total, params)
        g = en.energy_weight_grad("pc", spec, params, state, sample, phase)
        assert relative_error(fd.flat(), g.flat()) <= 1e-6


def test_feedback_gain_gradients_descend_weighted_energy():
    rows = check_finite_differences(n_configs=6, seed=4)
    assert max(r[-1] for r in rows) <= 1e-4


def test_feedback_weighted_energy_reduces_to_total_at_unit_gain():
    spec, params = make_net((4, 3, 3, 2), "tanh", "linear_squared_error", seed=1)
    sample = make_sample(spec, 2, 1)
    b = en.pc_energy(spec, params, _state(spec, params, sample, 1), sample, en.PhaseConfig(lam=0.5))
    assert en.feedback_weighted_energy("pc", spec, b, en.PhaseConfig(lam=0.5)) == b.total
    half = en.PhaseConfig(lam=0.5, feedback_gain=0.5)
    expected = b.per_layer_internal[0] + 0.5 * b.per_layer_internal[1] + 0.25 * 0.5 * b.supervised
    assert np.isclose(en.feedback_weighted_energy("pc", spec, b, half), expected, atol=1e-14)


def test_hopfield_min_eigenvalue_positive_for_small_weights():
    spec, params = make_net((4, 5, 3), "linear", "linear_squared_error", seed=0, scale=0.3)
    assert en.hopfield_min_eigenvalue(spec, params, en.FREE) > 0
    big = params.scale(10.0)
    assert en.hopfield_min_eigenvalue(spec, big, en.FREE) < 0
