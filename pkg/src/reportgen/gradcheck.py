"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, default_dtype


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences; ``f`` reads ``arr`` in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Largest relative error between tape gradients and finite differences.

    ``fn`` maps float64 tensors to a scalar tensor.  The error of each entry is
    ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    with default_dtype(np.float64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*ts)
        backward(out)
        worst = 0.0
        for t, a in zip(ts, arrays):
            def f():
                return float(fn(*[Tensor(x) for x in arrays]).data)
            num = numerical_grad(f, a, h)
            ana = t.grad if t.grad is not None else np.zeros_like(a)
            worst = max(worst, max_rel_error(ana, num))
    return worst
