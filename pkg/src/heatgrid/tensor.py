"""Dense tensors with reverse-mode automatic differentiation.

Every operation records the inputs it needs for its adjoint on the output
tensor; :meth:`Tensor.backward` then walks the recorded graph in reverse
topological order and accumulates gradients into the leaves.

Arithmetic defaults to float32. Wrap gradient checks in
``with precision("float64"):`` to switch the default width.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import GradientError, ShapeError

_default_dtype = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """An n-dimensional array that can take part in differentiation.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    buffer of the same shape; :meth:`backward` adds into it and never clears
    it, so callers zero it between optimisation steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = np.dtype(dtype) if dtype is not None else _default_dtype
        self.data = np.array(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out.op = op
        return out

    # ------------------------------------------------------------------ info
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GradientError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -------------------------------------------------------------- autodiff
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise GradientError(f"backward() needs a single-element output, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("backward() called on a tensor that does not depend on any leaf with requires_grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                np.add(node.grad, g, out=node.grad)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


# --------------------------------------------------------------- elementwise
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._result(a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),), "scalar_mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.dtype.type(0))
    return Tensor._result(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    half = x.dtype.type(0.5)
    s = half * (np.tanh(half * x.data) + 1)

    def backward(g):
        return (g * s * (1 - s),)

    return Tensor._result(s, (x,), backward, "sigmoid")


def tanh_op(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor._result(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


def abs_all(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return Tensor._result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square_all(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._result(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


# ---------------------------------------------------------------- reductions
def mean_all(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape

    def backward(g):
        return (np.full(shape, g / n, dtype=g.dtype),)

    return Tensor._result(np.asarray(x.data.mean(dtype=x.dtype)), (x,), backward, "mean")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._result(
        np.asarray(x.data.sum(dtype=x.dtype)), (x,), lambda g: (np.full(shape, g, dtype=g.dtype),), "sum"
    )


# ---------------------------------------------------------------- structural
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}") from None
    old = x.shape
    return Tensor._result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along axis 1 (the channel axis of ``B x C x H x W``)."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    if not tensors:
        raise ShapeError("concat_channels: no operands")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:1] != ref[:1] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: non-channel extents differ: {ref} vs {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(sizes)))

    return Tensor._result(out, tensors, backward, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of a tensor with at least two axes."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}:{stop}] outside 0..{x.shape[1]}")
    return take(x, (slice(None), slice(start, stop)))


def take(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing with a scatter adjoint."""
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    elif not out.flags.c_contiguous:
        out = np.ascontiguousarray(out)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return Tensor._result(out, (x,), backward, "take")


# --------------------------------------------------------------- convolution
def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0, method: str | None = None) -> Tensor:
    """2-D cross-correlation with zero padding and unit stride.

    ``method`` selects the forward evaluation: ``"direct"`` sums the
    definition in fixed ``(c, i, j)`` order, ``"gemm"`` lowers to a patch
    matrix product. The default is direct for float64 (bitwise-reproducible
    reference) and gemm for float32 (training speed). The adjoint always
    uses the patch-matrix form.
    """
    if x.ndim != 4 or weight.ndim != 4 or bias.ndim != 1:
        raise ShapeError(
            f"conv2d: expected input B x Cin x H x W, weight Cout x Cin x kH x kW and bias Cout; "
            f"got {x.shape}, {weight.shape}, {bias.shape}"
        )
    B, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels {x.shape} but weight expects {Ci} {weight.shape}")
    if bias.shape[0] != Co:
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {Co} output channels of weight {weight.shape}")
    padding = int(padding)
    if padding < 0:
        raise ShapeError(f"conv2d: negative padding {padding}")
    Ho, Wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: output would be empty ({Ho}x{Wo}) for input {x.shape}, kernel {kh}x{kw}")
    if not (x.dtype == weight.dtype == bias.dtype):
        raise TypeError(f"conv2d: mixed dtypes {x.dtype}, {weight.dtype}, {bias.dtype}")
    if method is None:
        method = "direct" if x.dtype == np.float64 else "gemm"

    xd, wd, bd = x.data, weight.data, bias.data
    K, P = C * kh * kw, Ho * Wo
    w2 = wd.reshape(Co, K)
    cols = None
    if method == "gemm":
        cols = _kernels.im2col(xd, kh, kw, padding)  # (B, K, P)
        out = np.matmul(w2, cols)
        out += bd[None, :, None]
        out = out.reshape(B, Co, Ho, Wo)
    elif method == "direct":
        out = _kernels.conv2d_direct(xd, wd, bd, padding)
    else:
        raise ValueError(f"conv2d: unknown method {method!r}")
    if not weight.requires_grad:
        cols = None

    def backward(g):
        g3 = np.ascontiguousarray(g).reshape(B, Co, P)
        gx = gw = gb = None
        if weight.requires_grad:
            c = cols if cols is not None else _kernels.im2col(xd, kh, kw, padding)
            gw = np.matmul(g3, c.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gx = _kernels.col2im(np.matmul(w2.T, g3), B, C, H, W, kh, kw, padding)
        return gx, gw, gb

    return Tensor._result(out, (x, weight, bias), backward, "conv2d")


__all__ = [
    "Tensor",
    "precision",
    "default_dtype",
    "set_default_dtype",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "relu",
    "sigmoid",
    "tanh_op",
    "abs_all",
    "square_all",
    "mean_all",
    "sum_all",
    "reshape",
    "concat_channels",
    "slice_channels",
    "take",
    "conv2d",
]
