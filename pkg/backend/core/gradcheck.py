"""Central finite-difference check of analytic gradients."""
import logging
from typing import Callable, Sequence

import numpy as np

from core.errors import ContractError
from core.tensor import Tensor

logger = logging.getLogger(__name__)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """
    Compare backward() against central differences for every parameter entry.

    `f` rebuilds the scalar loss from the current parameter values on every
    call. Returns max |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    for p in params:
        p.grad = None

    loss = f()
    if loss.requires_grad:
        loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = f().item()
            flat[i] = original - eps
            minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = grad_flat[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    logger.debug("finite-difference check over %d tensors: max relative error %.3e", len(params), worst)
    return worst
