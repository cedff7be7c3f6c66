"""
Optimizer and learning-rate schedule.

Adaptive-moment updates over a named parameter dictionary; the learning
rate rises linearly from 0 to the peak over the warm-up steps, then
follows a cosine decay to 0 at the final step.
"""

import math
from typing import Dict

import numpy as np

from src.tensor_core import Tensor


def lr_at(step: int, cfg) -> float:
    """
    Learning rate for a 0-based step.

    Args:
        step: Step index
        cfg: OptimConfig (peak_lr, warmup_steps, total_steps)

    Returns:
        0 at step 0, peak_lr at step warmup_steps, about 0 at total_steps
    """
    peak, warmup, total = cfg.peak_lr, cfg.warmup_steps, cfg.total_steps
    if step <= 0:
        return 0.0
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    decay_steps = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / decay_steps)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adam over Tensors keyed by name; moments live in plain arrays."""

    def __init__(self, params: Dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        """Update every parameter in place; names missing from grads get a zero gradient."""
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for name, param in self.params.items():
            grad = grads.get(name)
            if grad is None:
                grad = np.zeros_like(param.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"adam.step": np.asarray(self.step_count, dtype=np.int64)}
        for name in self.params:
            state[f"adam.m.{name}"] = self.m[name]
            state[f"adam.v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.step_count = int(state["adam.step"])
        for name, param in self.params.items():
            m, v = state[f"adam.m.{name}"], state[f"adam.v.{name}"]
            if m.shape != param.shape or v.shape != param.shape:
                raise ValueError(f"optimizer state for {name} has shape {m.shape}, "
                                 f"parameter has {param.shape}")
            self.m[name] = np.array(m, dtype=np.float64)
            self.v[name] = np.array(v, dtype=np.float64)
