"""Per-kernel routing between the Cython extension and numpy.

Routing follows the bundled micro-benchmark (``espresso bench`` compares the
backends end to end): the compiled row-at-a-time loops win on softmax and
layer normalization, where numpy burns time on reduction temporaries, and
lose on matmul (BLAS) and gelu (SIMD tanh), so those stay on numpy.  The
compiled matmul and gelu kernels remain exposed for direct use and parity
testing.
"""

import numpy as np

from . import _ckernels
from . import numpy_backend as _nb

matmul = np.matmul


def softmax_lastdim(x):
    return _ckernels.softmax_lastdim(x)


def softmax_backward(y, grad_y):
    return _ckernels.softmax_backward(y, grad_y)


gelu = _nb.gelu
gelu_backward = _nb.gelu_backward


def layer_norm_forward(x, gain, bias, eps):
    return _ckernels.layer_norm_forward(x, gain, bias, eps)


def layer_norm_backward(grad_y, xhat, inv_std, gain):
    return _ckernels.layer_norm_backward(grad_y, xhat, inv_std, gain)
