"""Math kernel backends and import-time selection.

Two interchangeable backends implement the hot kernels: a pure-numpy fallback
that always works, and a Cython extension built at install time.  The
compiled backend is preferred when present; set ``ESPRESSO_KERNELS=numpy`` or
``ESPRESSO_KERNELS=compiled`` to force one.  ``set_backend`` switches at
runtime (used by the benchmark command to time both under one process).

Kernel contract (shared by both backends):

- ``matmul(a, b)``: ``[m,k] @ [k,r]`` or batched ``[g,m,k] @ [g,k,r]``
- ``softmax_lastdim(x)`` / ``softmax_backward(y, grad_y)``: rows of a 2-D view
- ``gelu(x)`` / ``gelu_backward(x, grad_y)``: flat vectors, tanh approximation
- ``layer_norm_forward(x, gain, bias, eps)`` -> ``(y, xhat, inv_std)`` and
  ``layer_norm_backward(grad_y, xhat, inv_std, gain)``: rows of a 2-D view

All arrays are C-contiguous float64 or float32; both operands of a kernel
must share one dtype.
"""

import os

from . import numpy_backend

_BACKENDS = {"numpy": numpy_backend}

try:
    from . import compiled_backend

    _BACKENDS["compiled"] = compiled_backend
except ImportError:
    compiled_backend = None


def available_backends():
    return tuple(sorted(_BACKENDS))


def set_backend(name):
    """Switch the active backend; raises on unknown or unbuilt names."""
    global _active, _active_name
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {available_backends()}"
        )
    _active = _BACKENDS[name]
    _active_name = name


def active_backend():
    return _active_name


_requested = os.environ.get("ESPRESSO_KERNELS", "auto")
if _requested == "auto":
    _requested = "compiled" if "compiled" in _BACKENDS else "numpy"
set_backend(_requested)


def matmul(a, b):
    return _active.matmul(a, b)


def softmax_lastdim(x):
    return _active.softmax_lastdim(x)


def softmax_backward(y, grad_y):
    return _active.softmax_backward(y, grad_y)


def gelu(x):
    return _active.gelu(x)


def gelu_backward(x, grad_y):
    return _active.gelu_backward(x, grad_y)


def layer_norm_forward(x, gain, bias, eps):
    return _active.layer_norm_forward(x, gain, bias, eps)


def layer_norm_backward(grad_y, xhat, inv_std, gain):
    return _active.layer_norm_backward(grad_y, xhat, inv_std, gain)
