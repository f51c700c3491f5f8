"""Central finite-difference gradient checking in float64."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backprop


def numerical_grad(f: Callable[[], float], arr: np.ndarray, step: float) -> np.ndarray:
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + step
        fp = f()
        arr[idx] = old - step
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    rel_step: float = 1e-6,
) -> float:
    """Largest relative error between analytic and numeric input gradients.

    ``fn`` maps float64 Tensors to a Tensor; the scalar checked is a fixed
    random projection of its output. The error per input is
    ``|analytic - numeric| / max(|analytic|, |numeric|)`` in the 2-norm.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe: list[np.ndarray] = []

    def scalar() -> float:
        out = fn(*[Tensor(a) for a in arrays]).data
        if not probe:
            probe.append(rng.standard_normal(out.shape))
        return float((out * probe[0]).sum())

    scalar()
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    backprop(out, grad=probe[0].astype(np.float64))
    worst = 0.0
    for t, a in zip(tensors, arrays):
        scale = max(float(np.abs(a).max()), 1.0)
        num = numerical_grad(scalar, a, rel_step * scale)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst
