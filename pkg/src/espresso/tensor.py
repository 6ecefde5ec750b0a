"""Dense tensors, tape-based reverse-mode gradients, and a MAC counter.

``DenseTensor`` stores a flat row-major buffer plus a shape; ``GradTape``
records operations in application order and replays them strictly in reverse,
accumulating gradients keyed by tensor identity.  Forward evaluation outside
a tape records nothing, so inference pays no bookkeeping cost.

Every operation validates shapes eagerly (errors name both offending shapes)
and requires both operands to share one floating dtype.  64-bit floats are
the default; 32-bit is an opt-in via the ``dtype`` arguments.

The instrumented multiply-accumulate counter (``count_macs``) observes every
matmul executed through this module, including the ones inside ``linear``.
It is the measurement side of the cost model's dual-route FLOP check and must
stay independent of any closed-form estimate.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator

import numpy as np

from . import kernels

_ALLOWED_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class DenseTensor:
    """A shaped view over a flat row-major float buffer.

    ``data`` is the flat 1-D numpy array; ``shape`` is the logical shape;
    ``nd`` returns a zero-copy shaped view.  Scalars use shape ``()``.
    """

    __slots__ = ("data", "shape")

    def __init__(self, values, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        shape = arr.shape  # before ascontiguousarray, which lifts 0-d to 1-d
        arr = np.ascontiguousarray(arr)
        if not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr.reshape(-1)
        self.shape = shape

    @property
    def nd(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data[0])

    def copy(self) -> "DenseTensor":
        return DenseTensor(self.nd.copy())

    def astype(self, dtype) -> "DenseTensor":
        """Precision cast; a fresh leaf, not connected to any tape."""
        return DenseTensor(self.nd.astype(dtype))

    def __repr__(self):
        return f"DenseTensor(shape={self.shape}, dtype={self.data.dtype})"


def zeros(shape, dtype=np.float64) -> DenseTensor:
    return DenseTensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64) -> DenseTensor:
    return DenseTensor(np.ones(shape, dtype=dtype))


def full(shape, value, dtype=np.float64) -> DenseTensor:
    return DenseTensor(np.full(shape, value, dtype=dtype))


# --------------------------------------------------------------------------
# gradient tape

_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Wengert list: operations in application order, replayed in reverse.

    Gradient accumulators are keyed by tensor identity; records hold strong
    references to their tensors so identities stay stable for the tape's
    lifetime.  One tape is active at a time per process (tapes are
    single-writer; forward evaluation outside any tape is side-effect free).
    """

    def __init__(self):
        self._records: list[tuple[DenseTensor, tuple[DenseTensor, ...], Callable]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("GradTape stack corrupted: exited out of order")
        return False

    def record(self, output: DenseTensor, inputs: tuple[DenseTensor, ...],
               backward: Callable[[np.ndarray], tuple]) -> None:
        """Append one operation.

        ``backward`` maps the output gradient (shaped ndarray) to one
        gradient per input (``None`` for inputs without a gradient).  The
        returned arrays become tape property and must not alias the output
        gradient or each other.
        """
        self._records.append((output, inputs, backward))

    def backward(self, loss: DenseTensor) -> None:
        """Accumulate gradients of a scalar loss into the tape."""
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads = self._grads
        grads[id(loss)] = np.ones(loss.shape, dtype=loss.dtype)
        for output, inputs, backward_fn in reversed(self._records):
            grad_out = grads.get(id(output))
            if grad_out is None:
                continue
            input_grads = backward_fn(grad_out)
            for tensor_in, grad_in in zip(inputs, input_grads):
                if grad_in is None:
                    continue
                acc = grads.get(id(tensor_in))
                if acc is None:
                    grads[id(tensor_in)] = grad_in
                else:
                    acc += grad_in

    def grad(self, t: DenseTensor) -> np.ndarray | None:
        """Accumulated gradient for ``t`` (shaped like ``t``), or None."""
        return self._grads.get(id(t))


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(output: DenseTensor, inputs: tuple[DenseTensor, ...],
              backward: Callable[[np.ndarray], tuple]) -> DenseTensor:
    """Record a custom operation on the active tape, if any.

    Low-level hook for fused operations defined outside this module (the
    training loss uses it); no-op when no tape is active.
    """
    tape = _active_tape()
    if tape is not None:
        tape.record(output, inputs, backward)
    return output


# --------------------------------------------------------------------------
# multiply-accumulate counter (instrumentation route of the FLOP check)

class MacCounter:
    """Counts multiply-accumulates of every matmul run while registered."""

    __slots__ = ("total",)

    def __init__(self):
        self.total = 0


_MAC_COUNTERS: list[MacCounter] = []


@contextmanager
def count_macs():
    counter = MacCounter()
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def _add_macs(n: int) -> None:
    for counter in _MAC_COUNTERS:
        counter.total += n


# --------------------------------------------------------------------------
# shape and dtype plumbing

def _check_same_dtype(*tensors: DenseTensor) -> None:
    first = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != first:
            raise ShapeError(f"mixed dtypes: {first} vs {t.dtype}")


def _c(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr)


def _reduce_to_shape(grad: np.ndarray, shape: tuple, owned: bool = False) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape.

    Returns an array safe for the tape to own: a copy is made when no
    reduction happened and the input was not already ours to give away.
    """
    reduced = grad
    extra = reduced.ndim - len(shape)
    if extra:
        reduced = reduced.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(reduced.shape, shape)) if s == 1 and g != 1)
    if axes:
        reduced = reduced.sum(axis=axes, keepdims=True)
    if reduced is grad and not owned:
        reduced = grad.copy()
    return np.ascontiguousarray(reduced.reshape(shape))


def _bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw kernel matmul on 2-D, or stacked operands flattened to one batch axis."""
    if a.ndim == 2:
        return kernels.matmul(_c(a), _c(b))
    lead = a.shape[:-2]
    a3 = _c(a).reshape(-1, a.shape[-2], a.shape[-1])
    b3 = _c(b).reshape(-1, b.shape[-2], b.shape[-1])
    out = kernels.matmul(a3, b3)
    return out.reshape(*lead, a.shape[-2], b.shape[-1])


# --------------------------------------------------------------------------
# differentiable operations

def matmul(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """Matrix product ``[m,k] @ [k,r]``; stacked operands with identical
    leading axes multiply slice-wise."""
    _check_same_dtype(a, b)
    if len(a.shape) < 2 or len(b.shape) < 2:
        raise ShapeError(f"matmul needs 2-D or stacked operands: {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading axes differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    a_nd, b_nd = a.nd, b.nd
    batch = 1
    for extent in a.shape[:-2]:
        batch *= extent
    _add_macs(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    out = DenseTensor(_bmm(a_nd, b_nd))

    def backward(grad_out):
        grad_a = _bmm(grad_out, b_nd.swapaxes(-1, -2))
        grad_b = _bmm(a_nd.swapaxes(-1, -2), grad_out)
        return grad_a, grad_b

    return record_op(out, (a, b), backward)


def linear(x: DenseTensor, weight: DenseTensor, bias: DenseTensor | None = None) -> DenseTensor:
    """Affine map on the last axis: ``y = x @ weight + bias``.

    ``x`` is ``[..., d_in]`` with any leading axes, ``weight`` is
    ``[d_in, d_out]``, ``bias`` is ``[d_out]`` or omitted.
    """
    if bias is None:
        _check_same_dtype(x, weight)
    else:
        _check_same_dtype(x, weight, bias)
    if len(weight.shape) != 2:
        raise ShapeError(f"linear weight must be 2-D, got {weight.shape}")
    if len(x.shape) < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear input/weight mismatch: {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias/weight mismatch: {bias.shape} vs {weight.shape}")
    d_in, d_out = weight.shape
    lead = x.shape[:-1]
    x2 = x.nd.reshape(-1, d_in)
    rows = x2.shape[0]
    _add_macs(rows * d_in * d_out)
    y2 = kernels.matmul(_c(x2), weight.nd)
    if bias is not None:
        y2 = y2 + bias.nd
    out = DenseTensor(y2.reshape(*lead, d_out))

    def backward(grad_out):
        g2 = _c(grad_out.reshape(-1, d_out))
        grad_x = kernels.matmul(g2, _c(weight.nd.T)).reshape(*lead, d_in)
        grad_w = kernels.matmul(_c(x2.T), g2)
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op(out, inputs, backward)


def add(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """Elementwise sum; ``b`` may also be a suffix shape broadcast over the
    leading axes of ``a`` (its gradient then sums over those axes)."""
    _check_same_dtype(a, b)
    if a.shape != b.shape and a.shape[len(a.shape) - len(b.shape):] != b.shape:
        raise ShapeError(f"add shapes incompatible: {a.shape} vs {b.shape}")
    out = DenseTensor(a.nd + b.nd)

    def backward(grad_out):
        return grad_out.copy(), _reduce_to_shape(grad_out, b.shape)

    return record_op(out, (a, b), backward)


def mul(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """Elementwise product with numpy broadcasting; gradients reduce back
    to each operand's shape."""
    _check_same_dtype(a, b)
    try:
        out_nd = a.nd * b.nd
    except ValueError:
        raise ShapeError(f"mul shapes not broadcastable: {a.shape} vs {b.shape}") from None
    out = DenseTensor(out_nd)
    a_nd, b_nd = a.nd, b.nd

    def backward(grad_out):
        return (_reduce_to_shape(grad_out * b_nd, a.shape, owned=True),
                _reduce_to_shape(grad_out * a_nd, b.shape, owned=True))

    return record_op(out, (a, b), backward)


def scale(x: DenseTensor, factor: float) -> DenseTensor:
    factor = float(factor)
    out = DenseTensor(x.nd * x.dtype.type(factor))

    def backward(grad_out):
        return (grad_out * x.dtype.type(factor),)

    return record_op(out, (x,), backward)


def broadcast_to(x: DenseTensor, shape: tuple) -> DenseTensor:
    """Broadcast ``x`` up to ``shape`` (x's shape must be a suffix of it);
    the gradient sums over the prepended axes."""
    shape = tuple(shape)
    if shape[len(shape) - len(x.shape):] != x.shape:
        raise ShapeError(f"broadcast_to needs a suffix match: {x.shape} vs {shape}")
    out = DenseTensor(np.broadcast_to(x.nd, shape))

    def backward(grad_out):
        return (_reduce_to_shape(grad_out, x.shape),)

    return record_op(out, (x,), backward)


def reshape(x: DenseTensor, shape: tuple) -> DenseTensor:
    shape = tuple(int(s) for s in shape)
    n = 1
    for s in shape:
        n *= s
    if n != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    out = DenseTensor(x.nd.reshape(shape))

    def backward(grad_out):
        return (grad_out.reshape(x.shape).copy(),)

    return record_op(out, (x,), backward)


def permute(x: DenseTensor, axes: tuple) -> DenseTensor:
    """Axis permutation as an explicit copy (the buffer stays row-major)."""
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(len(x.shape))):
        raise ShapeError(f"permute axes {axes} invalid for shape {x.shape}")
    out = DenseTensor(np.ascontiguousarray(x.nd.transpose(axes)))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(grad_out):
        g = np.ascontiguousarray(grad_out.transpose(inverse))
        return (g.copy() if g is grad_out else g,)

    return record_op(out, (x,), backward)


def concat(parts: list[DenseTensor], axis: int = 0) -> DenseTensor:
    """Concatenate along ``axis``; all other extents must agree."""
    if not parts:
        raise ShapeError("concat needs at least one part")
    _check_same_dtype(*parts)
    ndim = len(parts[0].shape)
    axis = axis % ndim if ndim else 0
    for p in parts[1:]:
        if len(p.shape) != ndim or any(
            i != axis and p.shape[i] != parts[0].shape[i] for i in range(ndim)
        ):
            raise ShapeError(f"concat extents differ: {parts[0].shape} vs {p.shape}")
    out = DenseTensor(np.concatenate([p.nd for p in parts], axis=axis))
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(grad_out):
        return tuple(g.copy() for g in np.split(grad_out, splits, axis=axis))

    return record_op(out, tuple(parts), backward)


def mean_axis(x: DenseTensor, axis: int) -> DenseTensor:
    """Arithmetic mean along one axis (the axis is removed)."""
    axis = axis % len(x.shape)
    extent = x.shape[axis]
    out = DenseTensor(x.nd.mean(axis=axis))

    def backward(grad_out):
        g = np.expand_dims(grad_out, axis) / extent
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op(out, (x,), backward)


def sum_all(x: DenseTensor) -> DenseTensor:
    """Sum of every element, as a scalar tensor."""
    out = DenseTensor(np.asarray(x.nd.sum(), dtype=x.dtype))

    def backward(grad_out):
        return (np.full(x.shape, grad_out, dtype=x.dtype),)

    return record_op(out, (x,), backward)


def softmax_lastdim(x: DenseTensor) -> DenseTensor:
    """Max-subtracted softmax along the last axis."""
    if len(x.shape) < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    width = x.shape[-1]
    y2 = kernels.softmax_lastdim(_c(x.nd.reshape(-1, width)))
    out = DenseTensor(y2.reshape(x.shape))

    def backward(grad_out):
        g = kernels.softmax_backward(y2, _c(grad_out.reshape(-1, width)))
        return (g.reshape(x.shape),)

    return record_op(out, (x,), backward)


def gelu(x: DenseTensor) -> DenseTensor:
    """Gaussian error linear unit (tanh approximation)."""
    flat = x.data
    out = DenseTensor(kernels.gelu(flat).reshape(x.shape))

    def backward(grad_out):
        g = kernels.gelu_backward(flat, _c(grad_out.reshape(-1)))
        return (g.reshape(x.shape),)

    return record_op(out, (x,), backward)


def layer_norm(x: DenseTensor, gain: DenseTensor, bias: DenseTensor,
               eps: float = 1e-5) -> DenseTensor:
    """Layer normalization over the last axis (population variance)."""
    _check_same_dtype(x, gain, bias)
    width = x.shape[-1] if x.shape else 0
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm gain/bias must be ({width},), got {gain.shape} and {bias.shape}"
        )
    x2 = _c(x.nd.reshape(-1, width))
    y2, xhat, inv_std = kernels.layer_norm_forward(x2, gain.nd, bias.nd, float(eps))
    out = DenseTensor(y2.reshape(x.shape))

    def backward(grad_out):
        g2 = _c(grad_out.reshape(-1, width))
        gx, ggain, gbias = kernels.layer_norm_backward(g2, xhat, inv_std, gain.nd)
        return gx.reshape(x.shape), ggain, gbias

    return record_op(out, (x, gain, bias), backward)


# --------------------------------------------------------------------------
# gradient verification and parameter traversal

def finite_diff_grad_check(f: Callable[[], DenseTensor], params: list[DenseTensor],
                           h: float = 1e-5) -> float:
    """Worst relative disagreement between tape and central differences.

    ``f`` re-evaluates the scalar loss from the current parameter values.
    For every entry of every parameter the central difference
    ``(f(x+h) - f(x-h)) / 2h`` is compared against the tape gradient as
    ``|analytic - numeric| / max(1, |numeric|)``; the maximum over all
    entries is returned.
    """
    with GradTape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = tape.grad(p)
        flat = analytic.reshape(-1) if analytic is not None else np.zeros(p.size)
        for i in range(p.size):
            saved = p.data[i]
            p.data[i] = saved + h
            up = f().item()
            p.data[i] = saved - h
            down = f().item()
            p.data[i] = saved
            numeric = (up - down) / (2.0 * h)
            err = abs(float(flat[i]) - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst


def iter_tensors(obj, prefix: str = "") -> Iterator[tuple[str, DenseTensor]]:
    """Yield ``(dotted_name, tensor)`` leaves of a parameter container.

    Walks dataclass fields, lists, and tuples in declaration order, so the
    traversal order is deterministic for a given container type.
    """
    if isinstance(obj, DenseTensor):
        yield prefix or "tensor", obj
    elif hasattr(obj, "__dataclass_fields__"):
        for name in obj.__dataclass_fields__:
            child = getattr(obj, name)
            yield from iter_tensors(child, f"{prefix}.{name}" if prefix else name)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from iter_tensors(child, f"{prefix}[{i}]")
