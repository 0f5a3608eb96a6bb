"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: contiguous numpy storage, an explicit
gradient tape, and exactly the operations the spiking layers need. Two
conventions hold everywhere:

* storage is float32 by default (float64 opt-in per tensor) while
  reductions, matrix products and convolutions accumulate in float64;
* five-axis activations are laid out [time, batch, channel, height, width]
  and nothing ever broadcasts implicitly across the time axis; temporal
  replication must be spelled out by the caller.

Gradients are recorded on a :class:`GradTape`. Recording order is execution
order, so the tape is already topologically sorted and ``backward`` can walk
it once in reverse. ``Tensor.grad`` accumulates across repeated backward
calls; use ``zero_grad`` (or assign ``None``) between steps.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "grad_check",
    "stack",
    "matmul",
    "set_checked",
    "is_checked",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_DEFAULT_DTYPE = np.dtype(np.float32)

# Checked mode validates every tensor on construction (finite values only)
# and enforces binary inputs where layers demand spikes. On by default; flip
# off for hot loops once a configuration is trusted.
_checked = True


def set_checked(flag: bool) -> bool:
    """Enable/disable checked mode. Returns the previous setting."""
    global _checked
    old = _checked
    _checked = bool(flag)
    return old


def is_checked() -> bool:
    return _checked


class Tensor:
    """A dense float array plus gradient bookkeeping.

    ``data`` is always a float32 or float64 ndarray. ``grad`` starts as
    ``None`` and is filled (accumulated) by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap ndarray or nested sequences, not a Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(np.dtype(dtype), copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if _checked and arr.size and not np.isfinite(arr).all():
            raise ValueError("non-finite values rejected in checked mode")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flags})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data severed from the gradient graph."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(np.dtype(dtype)), requires_grad=self.requires_grad)

    # -- factories -----------------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.dtype(dtype)), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=np.dtype(dtype)), requires_grad=requires_grad)

    @staticmethod
    def full(shape, value: float, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=np.dtype(dtype)), requires_grad=requires_grad)

    # -- arithmetic (tape ops) -------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return _ew_add(self, other)
        return _const_shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return _ew_sub(self, other)
        return _const_shift(self, -float(other))

    def __rsub__(self, other):
        return _const_rsub(self, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _ew_mul(self, other)
        return self.scale(float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _ew_div(self, other)
        return self.scale(1.0 / float(other))

    def __neg__(self):
        return self.scale(-1.0)

    def __pow__(self, exponent):
        return _power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _index(self, idx)

    def scale(self, s: float) -> "Tensor":
        """Multiply by a python scalar."""
        s = float(s)

        def bw(g):
            return (g * s,)

        return _record((self,), self.data * s, bw)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bw(g):
            return (g * out_data,)

        return _record((self,), out_data, bw)

    def log(self) -> "Tensor":
        x = self.data

        def bw(g):
            return (g / x,)

        return _record((self,), np.log(x), bw)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def bw(g):
            return (g * (0.5 / out_data),)

        return _record((self,), out_data, bw)

    # -- reductions (float64 accumulation) -------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        out64 = np.sum(self.data, axis=axes, keepdims=keepdims, dtype=np.float64)
        in_shape, dt = self.shape, self.dtype

        def bw(g):
            return (_spread(g, in_shape, axes, keepdims).astype(dt, copy=False),)

        return _record((self,), out64.astype(self.dtype), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        out64 = np.mean(self.data, axis=axes, keepdims=keepdims, dtype=np.float64)
        in_shape, dt = self.shape, self.dtype
        count = self.size / max(out64.size, 1)

        def bw(g):
            spread = _spread(g, in_shape, axes, keepdims)
            return ((spread / count).astype(dt, copy=False),)

        return _record((self,), out64.astype(self.dtype), bw)

    def var(self, axis=None, keepdims: bool = False) -> "Tensor":
        """Biased (population) variance, matching the normalization layers."""
        axes = _normalize_axes(axis, self.ndim)
        x = self.data
        out64 = np.var(x, axis=axes, keepdims=keepdims, dtype=np.float64)
        in_shape, dt = self.shape, self.dtype
        count = self.size / max(out64.size, 1)

        def bw(g):
            mu = np.mean(x, axis=axes, keepdims=True, dtype=np.float64)
            spread = _spread(g, in_shape, axes, keepdims)
            grad = spread * (2.0 / count) * (x.astype(np.float64) - mu)
            return (grad.astype(dt, copy=False),)

        return _record((self,), out64.astype(self.dtype), bw)

    # -- shape ops -------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.shape

        def bw(g):
            return (g.reshape(in_shape),)

        return _record((self,), self.data.reshape(shape), bw)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        if axes is None:
            axes = tuple(reversed(range(self.ndim)))
        axes = tuple(int(a) for a in axes)
        inverse = tuple(np.argsort(axes))

        def bw(g):
            return (np.transpose(g, inverse),)

        return _record((self,), np.transpose(self.data, axes), bw)


class TapeOp(NamedTuple):
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


class GradTape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, so every op's inputs appear
    earlier on the tape than the op itself (a topological order for free).
    Use as a context manager; tapes nest, and only the innermost active tape
    records.
    """

    def __init__(self):
        self.ops: list[TapeOp] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("gradient tapes exited out of order")

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
        self.ops.append(TapeOp(inputs, output, backward_fn))


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(inputs: tuple[Tensor, ...], data: np.ndarray, backward_fn) -> Tensor:
    """Create an op output and register it with the active tape (package hook
    for modules that define their own ops, e.g. convolutions and spikes)."""
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Reverse-mode sweep: accumulate dLoss/dT into ``t.grad`` for every
    ``requires_grad`` tensor reachable from ``loss`` through ``tape``.

    ``loss`` must be scalar. Each tape entry is visited exactly once, in
    reverse recording order. Repeated calls add into existing ``grad``
    buffers.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for op in reversed(tape.ops):
        out_grad = flowing.get(id(op.output))
        if out_grad is None:
            continue  # not on any path to the loss
        input_grads = op.backward(out_grad)
        if len(input_grads) != len(op.inputs):  # pragma: no cover - op author bug
            raise RuntimeError("backward fn returned wrong arity")
        for tensor, grad in zip(op.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in flowing:
                flowing[key] = flowing[key] + grad
            else:
                flowing[key] = grad
                holders[key] = tensor
    for key, tensor in holders.items():
        if tensor.requires_grad:
            g = flowing[key]
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def grad_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Compare tape gradients of a scalar-valued ``f`` against central
    differences, in float64.

    Returns ``max_i |analytic_i - numeric_i| / max(1, |numeric_i|)``. ``f``
    must be smooth at ``x`` (keep inputs away from kinks such as the spike
    threshold). Non-finite intermediates are reported via
    ``FloatingPointError`` rather than masked.
    """
    if not (1e-4 <= eps <= 1e-2):
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    tape = GradTape()
    with tape:
        out = f(x64)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("f must return a scalar tensor")
    backward(out, tape)
    analytic = x64.grad if x64.grad is not None else np.zeros_like(x64.data)
    if not np.isfinite(analytic).all():
        raise FloatingPointError("non-finite analytic gradient")

    base = x64.data
    worst = 0.0
    for i in range(base.size):
        bumped = base.copy()
        bumped.flat[i] += eps
        f_plus = float(f(Tensor(bumped)).data.reshape(()))
        bumped.flat[i] -= 2.0 * eps
        f_minus = float(f(Tensor(bumped)).data.reshape(()))
        numeric = (f_plus - f_minus) / (2.0 * eps)
        if not np.isfinite(numeric):
            raise FloatingPointError(f"non-finite central difference at flat index {i}")
        err = abs(float(analytic.flat[i]) - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


# -- elementwise helpers -------------------------------------------------------


def _guard_broadcast(a: Tensor, b: Tensor) -> None:
    # Five-axis activations never broadcast along time (axis 0): a [1, ...]
    # against [T, ...] stretch there is almost always a layout bug.
    if a.ndim == 5 and b.ndim == 5 and a.shape[0] != b.shape[0]:
        raise ValueError(
            f"refusing to broadcast across the time axis: {a.shape} vs {b.shape}; "
            "replicate along axis 0 explicitly"
        )
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


def _ew_add(a: Tensor, b: Tensor) -> Tensor:
    _guard_broadcast(a, b)
    a_shape, b_shape = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape))

    return _record((a, b), a.data + b.data, bw)


def _ew_sub(a: Tensor, b: Tensor) -> Tensor:
    _guard_broadcast(a, b)
    a_shape, b_shape = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape))

    return _record((a, b), a.data - b.data, bw)


def _ew_mul(a: Tensor, b: Tensor) -> Tensor:
    _guard_broadcast(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _record((a, b), ad * bd, bw)


def _ew_div(a: Tensor, b: Tensor) -> Tensor:
    _guard_broadcast(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _record((a, b), ad / bd, bw)


def _const_shift(x: Tensor, c: float) -> Tensor:
    def bw(g):
        return (g,)

    return _record((x,), x.data + c, bw)


def _const_rsub(x: Tensor, c: float) -> Tensor:
    def bw(g):
        return (-g,)

    return _record((x,), c - x.data, bw)


def _power(x: Tensor, p: float) -> Tensor:
    xd = x.data

    def bw(g):
        return (g * p * xd ** (p - 1.0),)

    return _record((x,), xd ** p, bw)


def _index(x: Tensor, idx) -> Tensor:
    in_shape, dt = x.shape, x.dtype
    fancy = _is_fancy(idx)

    def bw(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _record((x,), x.data[idx], bw)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


# -- reduction helpers ----------------------------------------------------------


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spread(grad: np.ndarray, in_shape: tuple[int, ...], axes, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back over the reduced axes."""
    if not keepdims:
        if axes is None:
            grad = grad.reshape((1,) * len(in_shape))
        else:
            kept = list(grad.shape)
            for a in sorted(axes):
                kept.insert(a, 1)
            grad = grad.reshape(kept)
    return np.broadcast_to(grad, in_shape)


# -- joining / linear algebra ----------------------------------------------------


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack along a new axis (the usual way time-major outputs are built)."""
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("stack needs at least one tensor")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ValueError(f"stack shape mismatch: {first} vs {t.shape}")
    axis = axis % (len(first) + 1)

    def bw(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return _record(tensors, np.stack([t.data for t in tensors], axis=axis), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product. Leading axes must match exactly, except that a
    plain 2-D operand acts as a shared matrix for the whole batch.

    Accumulates in float64 regardless of storage dtype.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a != lead_b and lead_a and lead_b:
        raise ValueError(f"leading axes must match exactly: {a.shape} @ {b.shape}")
    out_dtype = np.result_type(a.dtype, b.dtype)
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    a_dt, b_dt = a.dtype, b.dtype

    def bw(g):
        g64 = g.astype(np.float64, copy=False)
        da = g64 @ np.swapaxes(b64, -1, -2)
        db = np.swapaxes(a64, -1, -2) @ g64
        if da.shape != a64.shape:  # b carried batch axes a lacks
            da = da.sum(axis=tuple(range(da.ndim - 2)))
        if db.shape != b64.shape:
            db = db.sum(axis=tuple(range(db.ndim - 2)))
        return (da.astype(a_dt, copy=False), db.astype(b_dt, copy=False))

    return _record((a, b), (a64 @ b64).astype(out_dtype), bw)
