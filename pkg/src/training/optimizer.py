"""
Optimizer Module
SGD with heavy-ball momentum and L2 weight decay
"""

from typing import List

import numpy as np

from src.autodiff.tensor import Tensor
from src.utils.errors import ConfigError, ShapeError


class SGD:
    """v <- mu * v + (g + wd * p);  p <- p - lr * v"""

    def __init__(self, parameters: List[Tensor], learning_rate: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if learning_rate < 0:
            raise ConfigError(f"learning rate must be >= 0, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        self.parameters = parameters
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in parameters]

    def zero_grad(self) -> None:
        for param in self.parameters:
            param.zero_grad()

    def step(self) -> None:
        for param, velocity in zip(self.parameters, self.velocity):
            grad = param.grad if param.grad is not None else np.zeros_like(param.data)
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            velocity *= self.momentum
            velocity += grad
            param.data = param.data - self.learning_rate * velocity

    def velocity_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.velocity])

    def load_velocity_flat(self, flat: np.ndarray) -> None:
        total = sum(v.size for v in self.velocity)
        if flat.size != total:
            raise ShapeError(f"momentum blob has {flat.size} values, optimizer needs {total}")
        offset = 0
        for i, v in enumerate(self.velocity):
            self.velocity[i] = flat[offset:offset + v.size].reshape(v.shape).copy()
            offset += v.size
