"""Numpy reference implementation of the hot training kernels.

These are the functions the compiled extension (`_fastcore`) reimplements.
Both backends share the exact same signatures and math; the autodiff layer
calls whichever one `flmae._kernels` selected at import.

Shape conventions: elementwise kernels take arrays of any shape; row kernels
(softmax, layernorm) take 2-D arrays and operate along the last axis.
"""

import numpy as np

BACKEND = "python"

# tanh-approximation constants, fixed so both backends and the tests agree
GELU_K = 0.7978845608028654  # sqrt(2/pi)
GELU_C = 0.044715


def gelu_fwd(x):
    u = GELU_K * (x + GELU_C * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(x, dy):
    u = GELU_K * (x + GELU_C * x * x * x)
    t = np.tanh(u)
    du = GELU_K * (1.0 + 3.0 * GELU_C * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_fwd(x):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_bwd(y, dy):
    inner = np.sum(dy * y, axis=-1, keepdims=True)
    return y * (dy - inner)


def layernorm_fwd(x, gamma, beta, eps):
    """Normalize rows of a 2-D array; returns (y, mean, rstd) for backward."""
    mean = np.mean(x, axis=-1)
    d = x - mean[:, None]
    var = np.mean(d * d, axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = d * rstd[:, None]
    return xhat * gamma + beta, mean, rstd


def layernorm_bwd(x, gamma, mean, rstd, dy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dxhat = dy * gamma
    m1 = np.mean(dxhat, axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    dgamma = np.sum(dy * xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    return dx, dgamma, dbeta
