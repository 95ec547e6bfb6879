"""
Learning-rate warmup and the Adagrad / SGD parameter updates
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from src.errors import ShapeMismatchError


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, constant afterwards (no decay)"""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


@dataclass
class OptimizerState:
    """Per-parameter squared-gradient accumulators plus the update counter"""

    accumulators: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "OptimizerState":
        return cls({name: np.zeros_like(value) for name, value in params.items()})


def _check_shapes(params, grads):
    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != np.shape(grad):
            raise ShapeMismatchError(f"update of {name}", params[name].shape, np.shape(grad))


def adagrad_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
                 lr: float, eps: float) -> None:
    """G += g^2; w -= lr * g / (sqrt(G) + eps), in place"""
    _check_shapes(params, grads)
    for name, grad in grads.items():
        grad = np.asarray(grad, dtype=params[name].dtype)
        accum = state.accumulators.setdefault(name, np.zeros_like(params[name]))
        accum += grad * grad
        denom = np.sqrt(accum) + eps
        # g == 0 with G == 0 and eps == 0 would divide 0 by 0
        update = np.divide(grad, denom, out=np.zeros_like(grad), where=denom > 0)
        params[name] -= (lr * update).astype(params[name].dtype)
    state.step += 1


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
             lr: float, eps: float = 0.0) -> None:
    _check_shapes(params, grads)
    for name, grad in grads.items():
        params[name] -= (lr * np.asarray(grad)).astype(params[name].dtype)
    state.step += 1


OPTIMIZER_STEPS = {"adagrad": adagrad_step, "sgd": sgd_step}
