"""Dense kernels shared by every other module.

Matrices and vectors are plain float64 numpy arrays.  Vectors may carry a
leading batch axis, in which case every row is treated independently.
"""

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear", "softmax")


class ShapeError(ValueError):
    pass


def as_float_array(a):
    return np.asarray(a, dtype=np.float64)


def matvec(m, v):
    """Matrix-vector product ``m @ v``.

    ``v`` may be a single vector of length ``m.shape[1]`` or a batch of such
    vectors stacked on axis 0; the batch form returns one product per row.
    """
    m = as_float_array(m)
    v = as_float_array(v)
    if m.ndim != 2 or v.shape[-1] != m.shape[1]:
        raise ShapeError(f"cannot multiply matrix {m.shape} by vector {v.shape}")
    return v @ m.T


def softmax(z):
    z = as_float_array(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = as_float_array(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def apply_activation(kind, v):
    v = as_float_array(v)
    if kind == "relu":
        return np.maximum(v, 0.0)
    if kind == "tanh":
        return np.tanh(v)
    if kind == "linear":
        return v
    if kind == "softmax":
        return softmax(v)
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivative(kind, v):
    """Elementwise derivative of ``kind`` evaluated at pre-activation ``v``.

    The relu derivative at exactly 0 is 0.  Softmax has no elementwise
    derivative; it only appears fused with cross-entropy at the output.
    """
    v = as_float_array(v)
    if kind == "relu":
        return (v > 0.0).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(v)
        return 1.0 - t * t
    if kind == "linear":
        return np.ones_like(v)
    if kind == "softmax":
        raise ValueError("softmax derivative is only available fused with cross-entropy")
    raise ValueError(f"unknown activation {kind!r}")
