"""CNN baseline and ConvLSTM next-day thermal predictors.

Both models take a ``B x T x C x H x W`` tensor and return ``B x 1 x H x W``.
They are plain functions of a parameter dataclass so the trainer, checkpoint
code and gradient checks can treat parameters as an ordered name -> tensor
mapping.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict

import numpy as np

from .errors import ShapeError
from .tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    default_dtype,
    mul,
    relu,
    reshape,
    sigmoid,
    slice_channels,
    take,
    tanh_op,
)

ARCHITECTURES = ("cnn", "convlstm")
GATE_ORDER = "ifog"
CNN_WIDTHS = (64, 64, 32)


class _Params:
    arch = ""

    def named_tensors(self) -> Dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    @classmethod
    def from_named(cls, named: Dict[str, Tensor]):
        missing = [f.name for f in fields(cls) if f.name not in named]
        if missing:
            raise ShapeError(f"{cls.__name__}: missing tensors {missing}")
        return cls(**{f.name: named[f.name] for f in fields(cls)})

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()


@dataclass
class CnnParams(_Params):
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor
    head_w: Tensor
    head_b: Tensor

    arch = "cnn"

    @property
    def in_channels(self) -> int:
        return self.conv1_w.shape[1]


@dataclass
class ConvLstmParams(_Params):
    gate_w: Tensor  # (4*D_h, C + D_h, 3, 3), output blocks in GATE_ORDER
    gate_b: Tensor
    head1_w: Tensor
    head1_b: Tensor
    head2_w: Tensor
    head2_b: Tensor

    arch = "convlstm"

    @property
    def hidden_dim(self) -> int:
        return self.head1_w.shape[0]

    @property
    def in_channels(self) -> int:
        return self.gate_w.shape[1] - self.hidden_dim


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor


def _check_input(x: Tensor) -> None:
    if x.ndim != 5:
        raise ShapeError(f"expected input of shape B x T x C x H x W, got {x.shape}")


def cnn_forward(params: CnnParams, x: Tensor) -> Tensor:
    _check_input(x)
    B, T, C, H, W = x.shape
    if T * C != params.in_channels:
        raise ShapeError(
            f"cnn_forward: input has T*C = {T}*{C} = {T * C} channels, first layer expects {params.in_channels}"
        )
    h = reshape(x, (B, T * C, H, W))
    h = relu(conv2d(h, params.conv1_w, params.conv1_b, padding=1))
    h = relu(conv2d(h, params.conv2_w, params.conv2_b, padding=1))
    h = relu(conv2d(h, params.conv3_w, params.conv3_b, padding=1))
    return conv2d(h, params.head_w, params.head_b, padding=0)


def zero_state(params: ConvLstmParams, batch: int, height: int, width: int, dtype=None) -> LstmState:
    shape = (batch, params.hidden_dim, height, width)
    dtype = dtype or params.gate_w.dtype
    return LstmState(Tensor(np.zeros(shape), dtype=dtype), Tensor(np.zeros(shape), dtype=dtype))


def convlstm_cell_step(params: ConvLstmParams, x_t: Tensor, state: LstmState) -> LstmState:
    """One recurrent update; gates come from a single fused 3x3 convolution."""
    D = params.hidden_dim
    if x_t.ndim != 4:
        raise ShapeError(f"convlstm_cell_step: expected B x C x H x W input, got {x_t.shape}")
    B, C, H, W = x_t.shape
    want = (B, D, H, W)
    if state.hidden.shape != want or state.cell.shape != want:
        raise ShapeError(
            f"convlstm_cell_step: state {state.hidden.shape}/{state.cell.shape} inconsistent with input "
            f"{x_t.shape} and hidden dimension {D} (expected {want})"
        )
    if C != params.in_channels:
        raise ShapeError(f"convlstm_cell_step: input has {C} channels, gate conv expects {params.in_channels}")
    z = conv2d(concat_channels(x_t, state.hidden), params.gate_w, params.gate_b, padding=1)
    i = sigmoid(slice_channels(z, 0, D))
    f = sigmoid(slice_channels(z, D, 2 * D))
    o = sigmoid(slice_channels(z, 2 * D, 3 * D))
    g = tanh_op(slice_channels(z, 3 * D, 4 * D))
    cell = add(mul(f, state.cell), mul(i, g))
    hidden = mul(o, tanh_op(cell))
    return LstmState(hidden, cell)


def convlstm_head(params: ConvLstmParams, hidden: Tensor) -> Tensor:
    h = relu(conv2d(hidden, params.head1_w, params.head1_b, padding=1))
    return conv2d(h, params.head2_w, params.head2_b, padding=0)


def convlstm_forward(params: ConvLstmParams, x: Tensor) -> Tensor:
    _check_input(x)
    B, T, C, H, W = x.shape
    if T == 0:
        raise ShapeError("convlstm_forward: empty input sequence (T = 0)")
    state = zero_state(params, B, H, W, dtype=x.dtype)
    for t in range(T):
        state = convlstm_cell_step(params, take(x, (slice(None), t)), state)
    return convlstm_head(params, state.hidden)


def forward(params, x: Tensor) -> Tensor:
    if params.arch == "cnn":
        return cnn_forward(params, x)
    return convlstm_forward(params, x)


def _uniform_weight(rng: np.random.Generator, shape, dtype) -> Tensor:
    fan_in = shape[1] * shape[2] * shape[3]
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(n, dtype) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True, dtype=dtype)


def init_params(
    arch: str,
    T: int,
    C: int,
    hidden_dim: int = 32,
    seed: int = 0,
    *,
    cnn_widths=CNN_WIDTHS,
    forget_bias: float = 0.0,
    dtype=None,
):
    """Fresh parameters: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.

    ``fan_in`` is ``in_channels * kH * kW``. Tensors are drawn in declaration
    order from one generator seeded with ``seed``. ``forget_bias`` is added
    to the forget block of the ConvLSTM gate bias.
    """
    if min(T, C, hidden_dim) < 1:
        raise ShapeError(f"init_params: dimensions must be positive, got T={T}, C={C}, hidden_dim={hidden_dim}")
    dtype = np.dtype(dtype) if dtype is not None else default_dtype()
    rng = np.random.default_rng(seed)
    if arch == "cnn":
        w1, w2, w3 = cnn_widths
        return CnnParams(
            conv1_w=_uniform_weight(rng, (w1, T * C, 3, 3), dtype),
            conv1_b=_zeros(w1, dtype),
            conv2_w=_uniform_weight(rng, (w2, w1, 3, 3), dtype),
            conv2_b=_zeros(w2, dtype),
            conv3_w=_uniform_weight(rng, (w3, w2, 3, 3), dtype),
            conv3_b=_zeros(w3, dtype),
            head_w=_uniform_weight(rng, (1, w3, 1, 1), dtype),
            head_b=_zeros(1, dtype),
        )
    if arch == "convlstm":
        D = hidden_dim
        gate_b = _zeros(4 * D, dtype)
        gate_b.data[D:2 * D] = forget_bias
        return ConvLstmParams(
            gate_w=_uniform_weight(rng, (4 * D, C + D, 3, 3), dtype),
            gate_b=gate_b,
            head1_w=_uniform_weight(rng, (D, D, 3, 3), dtype),
            head1_b=_zeros(D, dtype),
            head2_w=_uniform_weight(rng, (1, D, 1, 1), dtype),
            head2_b=_zeros(1, dtype),
        )
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def params_from_named(arch: str, named: Dict[str, Tensor]):
    if arch == "cnn":
        return CnnParams.from_named(named)
    if arch == "convlstm":
        return ConvLstmParams.from_named(named)
    raise ValueError(f"unknown architecture {arch!r}")


def predict(params, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Forward a numpy batch without building a graph; returns ``N x 1 x H x W``."""
    dtype = params.tensors()[0].dtype
    frozen = params_from_named(params.arch, {k: Tensor(v.data, dtype=dtype) for k, v in params.named_tensors().items()})
    out = []
    for start in range(0, len(x), batch_size):
        xb = Tensor(x[start:start + batch_size], dtype=dtype)
        out.append(forward(frozen, xb).data)
    return np.concatenate(out, axis=0)
