"""
Losses Module
Mean cross-entropy and Focal loss over unscaled logits
"""

from typing import Callable, Dict

import numpy as np

from src.autodiff.tensor import Tensor, TensorLike, as_tensor, exp, log_softmax, pick, softmax_cross_entropy

LossFn = Callable[[TensorLike, np.ndarray], Tensor]


def cross_entropy(logits: TensorLike, y: np.ndarray) -> Tensor:
    return softmax_cross_entropy(logits, y)


def focal_loss(logits: TensorLike, y: np.ndarray, gamma_f: float = 2.0) -> Tensor:
    """Mean of -(1 - p_y)^gamma_f * log p_y; gamma_f = 0 is exactly cross-entropy"""
    if gamma_f < 0:
        raise ValueError(f"focal gamma must be >= 0, got {gamma_f}")
    if gamma_f == 0:
        return softmax_cross_entropy(logits, y)
    log_p = pick(log_softmax(as_tensor(logits)), y)
    weight = (1.0 - exp(log_p)) ** gamma_f
    return -(weight * log_p).mean()


LOSSES = ('cross_entropy', 'focal')


def get_loss(name: str, focal_gamma: float = 2.0) -> LossFn:
    registry: Dict[str, LossFn] = {
        'cross_entropy': cross_entropy,
        'focal': lambda logits, y: focal_loss(logits, y, focal_gamma),
    }
    if name not in registry:
        raise ValueError(f"unknown loss '{name}', expected one of {LOSSES}")
    return registry[name]
