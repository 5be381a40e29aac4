# File: src/app/models/optim.py
from typing import Dict

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.app.models.tensor import Tensor
from src.app.schemas.training import OptimConfig
from src.app.utils.exceptions import NonFiniteException


class OptimState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: OptimConfig
    step: int = 0
    first_moment: Dict[str, np.ndarray] = {}
    second_moment: Dict[str, np.ndarray] = {}

    @classmethod
    def for_params(cls, params: Dict[str, Tensor], config: OptimConfig) -> "OptimState":
        return cls(
            config=config,
            first_moment={name: np.zeros_like(p.values) for name, p in params.items()},
            second_moment={name: np.zeros_like(p.values) for name, p in params.items()},
        )

    def learning_rate(self) -> float:
        """Linear warmup to config.lr over warmup_steps, constant afterwards."""
        warmup = self.config.warmup_steps
        if warmup == 0:
            return self.config.lr
        return self.config.lr * min(1.0, self.step / warmup)


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g**2)) for g in grads.values())))
    if norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def adamw_step(params: Dict[str, Tensor], state: OptimState) -> float:
    """
    One AdamW update from the params' accumulated .grad.

    Global-norm clipping at grad_clip, decoupled weight decay, bias-corrected
    moments. Non-finite gradients abort the step before anything is changed.
    Returns the pre-clip gradient norm.
    """
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.values))
        for name, p in params.items()
    }
    bad = sorted(name for name, g in grads.items() if not np.all(np.isfinite(g)))
    if bad:
        raise NonFiniteException(
            "Non-finite gradients; optimizer step aborted.",
            {"step": state.step + 1, "params": bad},
        )

    cfg = state.config
    norm = clip_by_global_norm(grads, cfg.grad_clip)

    state.step += 1
    lr = state.learning_rate()
    beta1, beta2 = cfg.betas
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step

    for name, p in params.items():
        g = grads[name]
        m = state.first_moment[name] = beta1 * state.first_moment[name] + (1.0 - beta1) * g
        v = state.second_moment[name] = beta2 * state.second_moment[name] + (1.0 - beta2) * g**2
        p.values -= lr * cfg.weight_decay * p.values
        p.values -= lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)

    return norm
