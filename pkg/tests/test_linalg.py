import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebmcredit.linalg import ShapeError, activation_derivative, apply_activation, matvec, softmax


def test_matvec_examples():
    assert np.array_equal(matvec(np.eye(3), [1, 2, 3]), [1, 2, 3])
    assert np.array_equal(matvec(np.zeros((2, 3)), [5, 5, 5]), [0, 0])
    # 1*1 + 2*1, 3*1 + 4*1
    assert np.array_equal(matvec([[1, 2], [3, 4]], [1, 1]), [3, 7])


def test_matvec_batch_rows_are_independent():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(4, 3))
    v = rng.normal(size=(5, 3))
    out = matvec(m, v)
    for i in range(5):
        assert np.allclose(out[i], m @ v[i], atol=1e-15)


def test_matvec_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2,\)"):
        matvec(np.zeros((2, 3)), np.zeros(2))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_matvec_unit_vector_gives_column(rows, cols, seed):
    m = np.random.default_rng(seed).normal(size=(rows, cols))
    for i in range(cols):
        assert np.array_equal(matvec(m, np.eye(cols)[i]), m[:, i])


def test_activation_examples():
    assert np.array_equal(apply_activation("relu", [-1, 0, 2]), [0, 0, 2])
    v = np.array([0.3, -2.0])
    assert np.array_equal(apply_activation("linear", v), v)
    assert np.array_equal(apply_activation("softmax", [0.0, 0.0]), [0.5, 0.5])
    assert np.array_equal(activation_derivative("relu", [-1, 2]), [0, 1])
    assert np.array_equal(activation_derivative("tanh", [0.0]), [1.0])
    assert np.array_equal(activation_derivative("relu", [0.0]), [0.0])
    with pytest.raises(ValueError):
        activation_derivative("softmax", [0.0])


def test_softmax_is_stable_and_normalized():
    z = np.array([[1000.0, 1001.0, 999.0], [-5.0, 0.0, 5.0]])
    p = softmax(z)
    assert np.all(np.isfinite(p))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50)
@given(st.sampled_from(["relu", "tanh", "linear"]), st.lists(st.floats(-3, 3), min_size=1, max_size=8))
def test_derivative_matches_finite_difference(kind, values):
    v = np.array(values)
    if kind == "relu":
        v = v[np.abs(v) > 1e-3]
        if v.size == 0:
            return
    h = 1e-6
    fd = (apply_activation(kind, v + h) - apply_activation(kind, v - h)) / (2 * h)
    d = activation_derivative(kind, v)
    assert np.all(np.abs(fd - d) <= 1e-6 * np.maximum(1.0, np.abs(d)))
