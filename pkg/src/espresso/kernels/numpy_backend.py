"""Pure-numpy implementations of the hot math kernels.

Every function here has a compiled twin in ``_ckernels.pyx``; the two backends
are interchangeable and must agree to floating-point roundoff.  Inputs are
C-contiguous float32 or float64 arrays in the canonical shapes the tensor
layer produces: matmul operands are 2-D (or 3-D with a matching leading batch
axis), row-wise kernels take 2-D ``[rows, width]`` views, and gelu takes a
flat vector.
"""

import numpy as np

SQRT_2_OVER_PI = 0.7978845608028654
GELU_CUBIC = 0.044715


def matmul(a, b):
    return np.matmul(a, b)


def softmax_lastdim(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y, grad_y):
    inner = (grad_y * y).sum(axis=-1, keepdims=True)
    return y * (grad_y - inner)


def gelu(x):
    u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_backward(x, grad_y):
    u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)
    t = np.tanh(u)
    du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
    dy_dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    return grad_y * dy_dx


def layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, xhat, inv_std[..., 0]


def layer_norm_backward(grad_y, xhat, inv_std, gain):
    grad_gain = (grad_y * xhat).sum(axis=0)
    grad_bias = grad_y.sum(axis=0)
    gxhat = grad_y * gain
    m1 = gxhat.mean(axis=-1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    grad_x = inv_std[:, None] * (gxhat - m1 - xhat * m2)
    return grad_x, grad_gain, grad_bias
