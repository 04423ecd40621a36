"""Loss functions, each a fused op with an analytic backward."""
from typing import Union

import numpy as np

from core.errors import ContractError, DimensionError
from core.tensor import ArrayLike, Tensor


def _target_array(pred: Tensor, target: Union[ArrayLike, Tensor]) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    t = np.broadcast_to(t, pred.shape) if t.ndim == 0 else t
    if t.shape != pred.shape:
        raise DimensionError(f"target shape {t.shape} does not match prediction {pred.shape}")
    if not np.all(np.isfinite(t)):
        raise ContractError("loss target must be finite")
    return t


def smooth_l1(pred: Tensor, target: Union[ArrayLike, Tensor]) -> Tensor:
    """Elementwise 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise, with x = pred - target."""
    x = pred.data - _target_array(pred, target)
    small = np.abs(x) < 1.0
    loss = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)
    slope = np.where(small, x, np.sign(x))
    return Tensor._from_op(loss, (pred,), "smooth_l1", lambda g: (g * slope,))


def bce_with_logits(logits: Tensor, targets: ArrayLike) -> Tensor:
    """Elementwise binary cross-entropy on logits, computed without overflow."""
    t = _target_array(logits, targets)
    z = logits.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    prob = 0.5 * (1.0 + np.tanh(0.5 * z))
    return Tensor._from_op(loss, (logits,), "bce_with_logits", lambda g: (g * (prob - t),))


def cross_entropy_with_logits(logits: Tensor, index: int) -> Tensor:
    """-log softmax(logits)[index], computed through log-sum-exp."""
    if logits.ndim != 1 or not 0 <= index < logits.shape[0]:
        raise DimensionError(f"class index {index} out of range for logits {logits.shape}")
    z = logits.data
    top = z.max()
    e = np.exp(z - top)
    total = e.sum()
    loss = np.log(total) + top - z[index]
    grad = e / total
    grad[index] -= 1.0
    return Tensor._from_op(loss, (logits,), "cross_entropy", lambda g: (g * grad,))