"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every element of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute discrepancy scaled by the largest gradient magnitude.

    Normalizing by the tensor-wide scale rather than per element keeps entries
    whose true gradient is ~0 from producing meaningless ratios.
    """
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                    h_scale: float = 1e-6) -> Dict[int, float]:
    """Compare tape gradients of ``fn(*tensors)`` against central differences.

    ``fn`` may return a tensor of any shape; it is contracted with a fixed
    random projection to form the scalar being differentiated.  Inputs are
    used in 64-bit precision.  Returns the relative error for each input index.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    proj = None

    def scalar() -> float:
        out = fn(*[Tensor(a) for a in arrays])
        return float(np.sum(out.data * proj))

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        proj = rng.standard_normal(out.shape)
        loss = (out * Tensor(proj)).sum()
    tape.backward(loss)

    errors = {}
    for i, (t, a) in enumerate(zip(tensors, arrays)):
        h = h_scale * max(1.0, float(np.abs(a).max()))
        numeric = numerical_gradient(scalar, a, h)
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        errors[i] = relative_error(analytic, numeric)
    return errors
