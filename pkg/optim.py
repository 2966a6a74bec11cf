import logging
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np

import config
from exceptions import NonFiniteError
from tensor import Parameter

logger = logging.getLogger('vla.optim')


def _trainable(params: Iterable[Parameter]) -> List[Parameter]:
    # Frozen parameters never enter the optimizer's list
    return [p for p in params if not p.frozen]


def _check_grad(p: Parameter) -> np.ndarray:
    if p.grad is None:
        return np.zeros_like(p.data)
    if not np.all(np.isfinite(p.grad)):
        raise NonFiniteError(f"Non-finite gradient for parameter {p.name!r}")
    return p.grad


def sgd_step(params: Sequence[Parameter], lr: float) -> None:
    """
    One plain gradient-descent update, in place.

    Args:
        params: Parameters with populated ``.grad``; frozen ones are skipped
        lr (float): Learning rate
    """
    for p in _trainable(params):
        g = _check_grad(p)
        p.data -= p.data.dtype.type(lr) * g


class SGD:
    def __init__(self, params: Iterable[Parameter], lr: float):
        self.params = _trainable(params)
        self.lr = lr
        self.step_count = 0

    def step(self) -> None:
        sgd_step(self.params, self.lr)
        self.step_count += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> Dict[str, Any]:
        return {"kind": "sgd", "lr": self.lr, "step": self.step_count, "slots": {}}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.lr = state["lr"]
        self.step_count = int(state["step"])


class AdamW:
    """
    Adam with decoupled weight decay.

    Moment buffers live in the parameter dtype so that a saved and reloaded
    optimizer continues bit-exactly.
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = config.ADAMW_LR,
        betas: Tuple[float, float] = config.ADAMW_BETAS,
        eps: float = config.ADAMW_EPS,
        weight_decay: float = config.ADAMW_WEIGHT_DECAY,
    ):
        self.params = _trainable(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("AdamW needs unique parameter names")

    def step(self) -> None:
        grads = [_check_grad(p) for p in self.params]
        self.step_count += 1
        adamw_step(
            self.params, grads, self.m, self.v, self.step_count,
            self.lr, self.betas, self.eps, self.weight_decay,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> Dict[str, Any]:
        slots = {}
        for p in self.params:
            slots[f"m/{p.name}"] = self.m[p.name]
            slots[f"v/{p.name}"] = self.v[p.name]
        return {
            "kind": "adamw",
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step_count,
            "slots": slots,
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.lr = float(state["lr"])
        self.betas = (float(state["betas"][0]), float(state["betas"][1]))
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        self.step_count = int(state["step"])
        for p in self.params:
            self.m[p.name] = np.array(state["slots"][f"m/{p.name}"], dtype=p.data.dtype)
            self.v[p.name] = np.array(state["slots"][f"v/{p.name}"], dtype=p.data.dtype)


def adamw_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    m: Dict[str, np.ndarray],
    v: Dict[str, np.ndarray],
    t: int,
    lr: float,
    betas: Tuple[float, float] = config.ADAMW_BETAS,
    eps: float = config.ADAMW_EPS,
    weight_decay: float = config.ADAMW_WEIGHT_DECAY,
) -> None:
    """
    Apply one AdamW update in place.

    Args:
        params: Non-frozen parameters
        grads: Gradients aligned with ``params``
        m, v: First/second moment buffers keyed by parameter name (updated in place)
        t (int): 1-based step number for bias correction
        lr, betas, eps, weight_decay: Optimizer hyperparameters
    """
    b1, b2 = betas
    for p, g in zip(params, grads):
        if p.frozen:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"Non-finite gradient for parameter {p.name!r}")
        dt = p.data.dtype.type
        m[p.name] = dt(b1) * m[p.name] + dt(1 - b1) * g
        v[p.name] = dt(b2) * v[p.name] + dt(1 - b2) * g * g
        m_hat = m[p.name] / dt(1 - b1 ** t)
        v_hat = v[p.name] / dt(1 - b2 ** t)
        if weight_decay:
            p.data -= dt(lr * weight_decay) * p.data
        p.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
