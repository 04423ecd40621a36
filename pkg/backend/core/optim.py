"""Adam with bias correction."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from core.errors import DimensionError, NonFiniteError
from core.tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_LEARNING_RATE = 5e-4


@dataclass
class AdamState:
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Optional[Sequence[Optional[np.ndarray]]] = None) -> None:
    """
    Apply one update to `params` in place.

    Gradients come from `grads` when given (one entry per parameter), else
    from each parameter's `.grad`. A None gradient means the parameter did
    not take part in the loss and is skipped. Every gradient is validated
    before anything is mutated.
    """
    if grads is None:
        grads = [p.grad for p in params]
    elif len(grads) != len(params):
        raise DimensionError(f"got {len(grads)} gradients for {len(params)} parameters")
    grads = [None if g is None else np.asarray(g, dtype=np.float64) for g in grads]
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise DimensionError(f"optimizer tracks {len(state.first_moment)} parameters, got {len(params)}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.first_moment[i].shape != p.shape:
            raise DimensionError(f"parameter {i} has shape {p.shape}, moments have {state.first_moment[i].shape}")
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise DimensionError(f"gradient {i} has shape {np.shape(g)}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of parameter {i} is not finite")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.first_moment[i] = b1 * state.first_moment[i] + (1.0 - b1) * g
        v = state.second_moment[i] = b2 * state.second_moment[i] + (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


class Adam:
    """Holds the parameter list and its AdamState."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float = DEFAULT_LEARNING_RATE):
        self.params = list(params)
        self.state = AdamState(learning_rate=learning_rate)

    def step(self) -> None:
        adam_step(self.state, self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
