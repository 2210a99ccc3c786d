"""Central finite-difference gradient oracle shared by the test modules."""
from __future__ import annotations

import numpy as np

from vistalab.autodiff import Tensor

STEP = 1e-5


def numeric_grad(f, arrays: list[np.ndarray], i: int, step: float = STEP) -> np.ndarray:
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        hi = f(*[Tensor(a) for a in arrays]).item()
        x[idx] = old - step
        lo = f(*[Tensor(a) for a in arrays]).item()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * step)
    return g


def analytic_grads(f, arrays: list[np.ndarray]) -> list[np.ndarray]:
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    f(*ts).backward()
    return [t.grad for t in ts]


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
    return float(np.linalg.norm(a - n) / scale)


def max_rel_error(f, arrays: list[np.ndarray], which=None) -> float:
    """Worst relative error over the inputs listed in ``which`` (default: all)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    which = range(len(arrays)) if which is None else which
    grads = analytic_grads(f, arrays)
    return max(rel_error(grads[i], numeric_grad(f, arrays, i)) for i in which)
