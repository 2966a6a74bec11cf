from typing import Callable, List, Sequence

import numpy as np

from tensor import Tensor


def finite_diff_grad(f: Callable[[], float], params: Sequence[Tensor], eps: float = 1e-4) -> List[np.ndarray]:
    """
    Central-difference gradient of a scalar function of the given tensors.

    Each coordinate is nudged in place by +/-eps, ``f`` re-evaluated, and the
    original value restored, so ``f`` must read the tensors' current data and be
    deterministic.

    Args:
        f: Zero-argument function returning the scalar objective
        params: Tensors to differentiate with respect to
        eps (float): Perturbation size

    Returns:
        List[np.ndarray]: One gradient array per tensor
    """
    grads = []
    for p in params:
        grad = np.zeros(p.data.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        g_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = float(f())
            flat[i] = original - eps
            minus = float(f())
            flat[i] = original
            g_flat[i] = (plus - minus) / (2.0 * eps)
        grads.append(grad)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm relative error, with a floor so all-zero gradients compare cleanly."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
