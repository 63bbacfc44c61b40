"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, grad

STEP = 1e-4
RTOL = 1e-4


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int,
                     step: float = STEP) -> np.ndarray:
    """Elementwise central differences of scalar ``fn`` w.r.t. ``inputs[index]``."""
    base = [t.data for t in inputs]
    x = base[index].astype(np.float64).copy()
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = _eval(fn, base, index, x)
        flat[i] = orig - step
        lo = _eval(fn, base, index, x)
        flat[i] = orig
        out.reshape(-1)[i] = (hi - lo) / (2 * step)
    return out


def _eval(fn, base, index, x) -> float:
    args = [Tensor(b) for b in base]
    args[index] = Tensor(x)
    return fn(*args).item()


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                    step: float = STEP) -> list:
    """Relative error between tape and finite-difference gradients, per input."""
    _, analytic = grad(fn, list(inputs))
    return [relative_error(analytic[i].data, numeric_gradient(fn, inputs, i, step))
            for i in range(len(inputs))]


def check_directional(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                      rng: Optional[np.random.Generator] = None, step: float = STEP) -> float:
    """Compare <grad, v> with a central difference along a random direction v.

    Cheap enough for whole networks with many parameters.
    """
    rng = rng or np.random.default_rng(0)
    _, analytic = grad(fn, list(inputs))
    dirs = [rng.standard_normal(t.shape) for t in inputs]
    norm = np.sqrt(np.sum([np.sum(d * d) for d in dirs]))
    dirs = [d / norm for d in dirs]
    predicted = float(np.sum([np.sum(g.data * d) for g, d in zip(analytic, dirs)]))
    hi = fn(*[Tensor(t.data + step * d) for t, d in zip(inputs, dirs)]).item()
    lo = fn(*[Tensor(t.data - step * d) for t, d in zip(inputs, dirs)]).item()
    measured = (hi - lo) / (2 * step)
    return abs(predicted - measured) / max(abs(predicted), abs(measured), 1e-12)
