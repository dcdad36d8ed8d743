"""Synthetic next-day fields with known dynamics, for skill checks and demos.

Each sample is a short daily history of smooth fields ``a_1..a_T`` with
``k`` broadcast forcing scalars per day. A hidden heat store evolves as

    s_t = g(f_t[0]) * B(s_{t-1}) + 2 * g(f_t[1]) * a_t,    s_0 = 0

where ``B`` is a 3x3 box blur and ``g(z) = sigmoid(1.5 z)``, so the forcing
decides how much heat is kept and how much of the day's field is absorbed.
The next day's field is ``s_t + 0.3 * f_t[2]`` plus smooth innovation noise,
and the target is ``y = s_T + 0.3 * f_T[2] + eps`` with ``eps ~ N(0, noise^2)``
per pixel. Recovering ``s_T`` means replaying the gated recursion in order.
"""
from __future__ import annotations

import datetime as dt

import numpy as np

from .pipeline import SampleTensor

START = dt.date(2015, 1, 1)
GATE_GAIN = 1.5


def box_blur(a: np.ndarray) -> np.ndarray:
    """3x3 mean over the last two axes with edge replication."""
    p = np.pad(a, [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    h, w = a.shape[-2:]
    out = np.zeros_like(a, dtype=np.float64)
    for i in range(3):
        for j in range(3):
            out += p[..., i:i + h, j:j + w]
    return out / 9.0


def smooth_noise(rng: np.random.Generator, shape, passes: int = 3) -> np.ndarray:
    """Unit-variance spatially correlated noise."""
    z = rng.standard_normal(shape)
    for _ in range(passes):
        z = box_blur(z)
    return z / z.std(axis=(-2, -1), keepdims=True)


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def generate(
    n: int,
    seed: int = 0,
    T: int = 3,
    n_forcing: int = 4,
    size: int = 32,
    noise: float = 0.1,
    innovation: float = 0.5,
) -> list[SampleTensor]:
    """``n`` independent samples with ``C = 1 + n_forcing`` channels per day.

    Target dates are consecutive calendar days, so a chronological split is
    well defined.
    """
    if n_forcing < 3:
        raise ValueError("the dynamics use three forcing channels; n_forcing must be >= 3")
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        f = rng.standard_normal((T, n_forcing))
        a = np.empty((T, size, size))
        store = np.zeros((size, size))
        drive = innovation * smooth_noise(rng, (size, size))
        for t in range(T):
            a[t] = drive
            store = storage_step(store, a[t], f[t])
            drive = store + 0.3 * f[t, 2] + innovation * smooth_noise(rng, (size, size))
        y = store + 0.3 * f[T - 1, 2] + noise * rng.standard_normal((size, size))
        x = np.empty((T, 1 + n_forcing, size, size), dtype=np.float32)
        x[:, 0] = a
        x[:, 1:] = f[:, :, None, None]
        first = START + dt.timedelta(days=k)
        dates = tuple(first + dt.timedelta(days=i) for i in range(T))
        out.append(SampleTensor(x, y[None].astype(np.float32), dates, dates[-1] + dt.timedelta(days=1)))
    return out


def storage_step(store, field, f):
    """Forcing-gated retention of the blurred store plus gated uptake of the day's field."""
    retain = _sigmoid(GATE_GAIN * f[0])
    uptake = _sigmoid(GATE_GAIN * f[1])
    return retain * box_blur(store) + 2.0 * uptake * field
