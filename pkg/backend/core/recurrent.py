"""
LSTM and GRU cells plus sequence runners.

Gate layout (columns of W_x, W_h and b, each block `hidden_size` wide):

    LSTM  [i, f, g, o]   i, f, o = sigmoid, g = tanh
          c_t = f * c_{t-1} + i * g
          h_t = o * tanh(c_t)

    GRU   [r, u, n]      r, u = sigmoid, n = tanh
          n   = tanh(x W_xn + b_n + r * (h_{t-1} W_hn))
          h_t = (1 - u) * h_{t-1} + u * n

Under this GRU convention a saturated update gate (u -> 1) hands the
candidate n through; it does not copy h_{t-1}.

Cells accept a single vector (input_size,) or a batch (batch, input_size).
"""
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ContractError, DegenerateInputError, DimensionError
from core.nn import Module, add_bias, glorot_uniform
from core.tensor import (
    Tensor,
    add,
    concat,
    constant,
    getitem,
    matmul,
    mul,
    parameter,
    sigmoid,
    sub,
    tanh,
)


class RecurrentKind(str, Enum):
    LSTM = "lstm"
    GRU = "gru"


class LSTMState(NamedTuple):
    h: Tensor
    c: Tensor


def _gate(z: Tensor, index: int, hidden: int) -> Tensor:
    block = slice(index * hidden, (index + 1) * hidden)
    return getitem(z, block if z.ndim == 1 else (slice(None), block))


class RecurrentCell(Module):
    kind: RecurrentKind
    num_gates: int

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        super().__init__()
        if input_size <= 0 or hidden_size <= 0:
            raise ContractError(f"cell sizes must be positive, got input={input_size} hidden={hidden_size}")
        self.input_size = input_size
        self.hidden_size = hidden_size
        width = self.num_gates * hidden_size
        self.W_x = parameter(glorot_uniform(rng, input_size, width))
        self.W_h = parameter(glorot_uniform(rng, hidden_size, width))
        self.b = parameter(np.zeros(width))

    def _check(self, x: Tensor, h: Tensor) -> None:
        if x.shape[-1] != self.input_size:
            raise DimensionError(f"{self.kind.value} cell expects input size {self.input_size}, got {x.shape}")
        if h.shape[-1] != self.hidden_size or h.ndim != x.ndim:
            raise DimensionError(f"{self.kind.value} cell state {h.shape} does not fit hidden size {self.hidden_size}")

    def zeros(self, batch: Optional[int] = None) -> Tensor:
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return constant(np.zeros(shape))


class LSTMCell(RecurrentCell):
    kind = RecurrentKind.LSTM
    num_gates = 4

    def initial_state(self, batch: Optional[int] = None) -> LSTMState:
        return LSTMState(self.zeros(batch), self.zeros(batch))

    def forward(self, x: Tensor, state: LSTMState, input_offset: Optional[Tensor] = None) -> LSTMState:
        """`input_offset` is added to x W_x, for inputs whose weights live elsewhere."""
        self._check(x, state.h)
        hs = self.hidden_size
        x_part = matmul(x, self.W_x)
        if input_offset is not None:
            x_part = add(x_part, input_offset)
        z = add_bias(add(x_part, matmul(state.h, self.W_h)), self.b)
        i = sigmoid(_gate(z, 0, hs))
        f = sigmoid(_gate(z, 1, hs))
        g = tanh(_gate(z, 2, hs))
        o = sigmoid(_gate(z, 3, hs))
        c = add(mul(f, state.c), mul(i, g))
        return LSTMState(mul(o, tanh(c)), c)


class GRUCell(RecurrentCell):
    kind = RecurrentKind.GRU
    num_gates = 3

    def initial_state(self, batch: Optional[int] = None) -> Tensor:
        return self.zeros(batch)

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        self._check(x, h)
        hs = self.hidden_size
        xz = add_bias(matmul(x, self.W_x), self.b)
        hz = matmul(h, self.W_h)
        r = sigmoid(add(_gate(xz, 0, hs), _gate(hz, 0, hs)))
        u = sigmoid(add(_gate(xz, 1, hs), _gate(hz, 1, hs)))
        n = tanh(add(_gate(xz, 2, hs), mul(r, _gate(hz, 2, hs))))
        keep = sub(constant(np.ones(h.shape)), u)
        return add(mul(keep, h), mul(u, n))


RecurrentState = Union[LSTMState, Tensor]


def recurrent_step(cell: RecurrentCell, x_t: Tensor, state: RecurrentState) -> RecurrentState:
    """One time step of either cell kind."""
    return cell(x_t, state)


def _blend(new: Tensor, old: Tensor, keep: np.ndarray) -> Tensor:
    """Row-wise select: rows where keep is True take `new`, the rest keep `old`."""
    k = np.repeat(keep.astype(np.float64)[:, None], new.shape[1], axis=1)
    return add(mul(new, constant(k)), mul(old, constant(1.0 - k)))


def run_sequence(
    cell: RecurrentCell,
    steps: Sequence[Tensor],
    mask: Optional[np.ndarray] = None,
    reverse: bool = False,
) -> Tuple[RecurrentState, List[Tensor]]:
    """
    Run a cell over a sequence of (batch, input_size) steps.

    `mask[b, t]` False means step t of row b is padding: the row's state is
    carried through unchanged, so padded positions never touch the result.
    Returns the final state and the hidden state after every step (in input order).
    """
    if not steps:
        raise DegenerateInputError("run_sequence: empty sequence")
    batch = steps[0].shape[0]
    if mask is not None and mask.shape != (batch, len(steps)):
        raise DimensionError(f"mask shape {mask.shape} does not match (batch={batch}, steps={len(steps)})")

    state = cell.initial_state(batch)
    outputs: List[Optional[Tensor]] = [None] * len(steps)
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    for t in order:
        new_state = cell(steps[t], state)
        if mask is not None and not mask[:, t].all():
            if isinstance(new_state, LSTMState):
                new_state = LSTMState(
                    _blend(new_state.h, state.h, mask[:, t]),
                    _blend(new_state.c, state.c, mask[:, t]),
                )
            else:
                new_state = _blend(new_state, state, mask[:, t])
        state = new_state
        outputs[t] = state.h if isinstance(state, LSTMState) else state
    return state, outputs


class BiLSTM(Module):
    """Forward and backward LSTMs; the encoding is [h_forward_final, h_backward_final]."""

    def __init__(self, input_size: int, hidden_per_direction: int, rng: np.random.Generator):
        super().__init__()
        self.forward_cell = LSTMCell(input_size, hidden_per_direction, rng)
        self.backward_cell = LSTMCell(input_size, hidden_per_direction, rng)

    @property
    def output_size(self) -> int:
        return 2 * self.forward_cell.hidden_size

    def forward(self, steps: Sequence[Tensor], mask: Optional[np.ndarray] = None) -> Tensor:
        fwd, _ = run_sequence(self.forward_cell, steps, mask)
        bwd, _ = run_sequence(self.backward_cell, steps, mask, reverse=True)
        return concat([fwd.h, bwd.h], axis=1)
