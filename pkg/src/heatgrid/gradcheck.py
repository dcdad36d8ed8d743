"""Central finite-difference checks of reverse-mode gradients.

The numeric side only ever evaluates the forward function on perturbed
copies of the input data, so it shares nothing with the adjoint code it
checks. Run under ``precision("float64")``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

EPS = 1e-5
ABS_FLOOR = 1e-7


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    checked: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _rel(a: float, n: float, floor: float) -> float:
    diff = abs(a - n)
    if diff <= floor:
        return 0.0
    return diff / max(abs(a), abs(n))


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.zero_grad()
    out = fn()
    out.backward()
    return [t.grad.copy() for t in inputs]


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = EPS,
    max_coords: int | None = None,
    directions: int = 0,
    rng: np.random.Generator | None = None,
    floor: float = ABS_FLOOR,
) -> GradCheckResult:
    """Compare the gradient of scalar ``fn()`` w.r.t. ``inputs`` against
    central differences.

    ``fn`` must rebuild its graph from the current ``.data`` of ``inputs`` on
    every call. At most ``max_coords`` coordinates per input are probed
    (all when ``None``); ``directions`` extra random directional derivatives
    cover every coordinate at once.
    """
    rng = rng or np.random.default_rng(0)
    grads = analytic_grads(fn, inputs)

    def f() -> float:
        return fn().item()

    worst, where, checked = 0.0, "", 0
    for k, (t, g) in enumerate(zip(inputs, grads)):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = range(n) if max_coords is None or max_coords >= n else rng.choice(n, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f()
            flat[c] = orig - eps
            fm = f()
            flat[c] = orig
            num = (fp - fm) / (2 * eps)
            err = _rel(float(g.reshape(-1)[c]), num, floor)
            checked += 1
            if err > worst:
                worst, where = err, f"input {k} coord {int(c)}"
    for d in range(directions):
        vs = [rng.standard_normal(t.shape) for t in inputs]
        saved = [t.data.copy() for t in inputs]
        for t, v, s in zip(inputs, vs, saved):
            t.data[...] = s + eps * v
        fp = f()
        for t, v, s in zip(inputs, vs, saved):
            t.data[...] = s - eps * v
        fm = f()
        for t, s in zip(inputs, saved):
            t.data[...] = s
        num = (fp - fm) / (2 * eps)
        ana = float(sum(np.sum(g * v) for g, v in zip(grads, vs)))
        err = _rel(ana, num, floor)
        checked += 1
        if err > worst:
            worst, where = err, f"direction {d}"
    return GradCheckResult(worst, where, checked)
