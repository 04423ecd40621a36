import numpy as np
import pytest

from core.errors import CheckpointError, DimensionError, NonFiniteError
from core.nn import BatchNorm1d, Linear, Module
from core.optim import Adam, AdamState, adam_step
from core.recurrent import BiLSTM, GRUCell, LSTMCell, LSTMState, run_sequence
from core.tensor import constant, parameter, reduce_sum


def _zero_weights(cell):
    for p in cell.parameters():
        p.data = np.zeros_like(p.data)


# ============================================================================
# Cells
# ============================================================================

def test_lstm_gate_order_with_zero_weights():
    cell = LSTMCell(2, 3, np.random.default_rng(0))
    _zero_weights(cell)
    state = LSTMState(constant(np.zeros(3)), constant(np.full(3, 2.0)))
    out = cell(constant([1.0, -1.0]), state)
    # every sigmoid gate is 0.5 and the candidate is tanh(0) = 0
    np.testing.assert_allclose(out.c.numpy(), np.full(3, 1.0))
    np.testing.assert_allclose(out.h.numpy(), 0.5 * np.tanh(np.full(3, 1.0)))


def test_lstm_input_offset_is_added_to_input_projection():
    cell = LSTMCell(2, 3, np.random.default_rng(0))
    _zero_weights(cell)
    offset = np.zeros(12)
    offset[6:9] = 1.0  # candidate block
    out = cell(constant([0.0, 0.0]), cell.initial_state(), input_offset=constant(offset))
    np.testing.assert_allclose(out.c.numpy(), 0.5 * np.tanh(1.0) * np.ones(3))


def test_gru_blend_with_zero_weights():
    cell = GRUCell(2, 3, np.random.default_rng(0))
    _zero_weights(cell)
    h = cell(constant([1.0, 1.0]), constant(np.full(3, 4.0)))
    np.testing.assert_allclose(h.numpy(), np.full(3, 2.0))


def test_cell_rejects_wrong_input_size():
    cell = GRUCell(2, 3, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        cell(constant([1.0, 1.0, 1.0]), cell.initial_state())


def test_run_sequence_carries_state_through_padding():
    rng = np.random.default_rng(1)
    cell = GRUCell(2, 3, rng)
    steps = [constant(rng.standard_normal((2, 2))) for _ in range(4)]
    mask = np.array([[True, True, True, True], [True, True, False, False]])
    final, outputs = run_sequence(cell, steps, mask=mask)
    short, _ = run_sequence(cell, [constant(s.data[1:2]) for s in steps[:2]])
    np.testing.assert_allclose(final.numpy()[1], short.numpy()[0], atol=1e-12)
    np.testing.assert_allclose(outputs[3].numpy()[1], outputs[1].numpy()[1])


def test_run_sequence_rejects_mask_of_wrong_shape():
    cell = GRUCell(2, 3, np.random.default_rng(0))
    steps = [constant(np.ones((2, 2)))] * 3
    with pytest.raises(DimensionError):
        run_sequence(cell, steps, mask=np.ones((3, 2), dtype=bool))


def test_bilstm_concatenates_both_directions():
    encoder = BiLSTM(4, 3, np.random.default_rng(2))
    steps = [constant(np.ones((5, 4))) for _ in range(2)]
    assert encoder.output_size == 6
    assert encoder(steps).shape == (5, 6)


# ============================================================================
# Adam
# ============================================================================

def test_adam_first_step_moves_by_learning_rate():
    p = parameter([1.0, -2.0, 3.0])
    p.grad = np.array([0.5, -4.0, 1e-2])
    adam_step(AdamState(learning_rate=0.1), [p])
    # first bias-corrected step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-6)


def test_adam_takes_explicit_gradients():
    p, q = parameter([1.0, -2.0]), parameter([5.0])
    p.grad = np.array([100.0, 100.0])
    adam_step(AdamState(learning_rate=0.1), [p, q], grads=[[-1.0, 2.0], None])
    np.testing.assert_allclose(p.data, [1.1, -2.1], atol=1e-6)
    np.testing.assert_array_equal(q.data, [5.0])
    with pytest.raises(DimensionError):
        adam_step(AdamState(), [p, q], grads=[[1.0, 1.0]])
    with pytest.raises(DimensionError):
        adam_step(AdamState(), [p], grads=[[1.0, 1.0, 1.0]])


def test_adam_zero_learning_rate_leaves_parameters_unchanged():
    p = parameter([1.0, 2.0])
    optimizer = Adam([p], learning_rate=0.0)
    for _ in range(3):
        reduce_sum(p * p).backward()
        optimizer.step()
        optimizer.zero_grad()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_validates_every_gradient_before_updating():
    a, b = parameter([1.0]), parameter([2.0])
    a.grad = np.array([1.0])
    b.grad = np.array([np.nan])
    state = AdamState(learning_rate=0.1)
    with pytest.raises(NonFiniteError):
        adam_step(state, [a, b])
    np.testing.assert_array_equal(a.data, [1.0])
    assert state.step_count == 0


def test_adam_skips_parameters_without_gradient():
    a, b = parameter([1.0]), parameter([2.0])
    a.grad = np.array([1.0])
    adam_step(AdamState(learning_rate=0.1), [a, b])
    np.testing.assert_array_equal(b.data, [2.0])
    assert a.data[0] < 1.0


def test_adam_decreases_a_quadratic():
    p = parameter([3.0, -2.0])
    optimizer = Adam([p], learning_rate=0.1)
    for _ in range(200):
        reduce_sum(p * p).backward()
        optimizer.step()
        optimizer.zero_grad()
    assert np.abs(p.data).max() < 0.25


# ============================================================================
# Module state
# ============================================================================

class _Toy(Module):
    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(0)
        self.first = Linear(3, 4, rng)
        self.norm = BatchNorm1d(4)
        self.layers = [Linear(4, 2, rng), Linear(2, 1, rng, bias=False)]


def test_named_parameters_and_buffers():
    toy = _Toy()
    names = [name for name, _ in toy.named_parameters()]
    assert names == [
        "first.weight", "first.bias", "norm.gamma", "norm.beta",
        "layers.0.weight", "layers.0.bias", "layers.1.weight",
    ]
    assert [name for name, _ in toy.named_buffers()] == ["norm.running_mean", "norm.running_var"]
    assert toy.num_parameters() == 12 + 4 + 4 + 4 + 8 + 2 + 2


def test_state_dict_round_trip_is_exact():
    source, target = _Toy(), _Toy()
    for p in source.parameters():
        p.data = np.random.default_rng(5).standard_normal(p.shape)
    source.norm.running_mean = np.arange(4.0)
    target.load_state_dict(source.state_dict())
    for (name, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)
    np.testing.assert_array_equal(target.norm.running_mean, np.arange(4.0))


def test_load_state_dict_rejects_mismatch():
    toy = _Toy()
    state = toy.state_dict()
    state.pop("param/first.bias")
    with pytest.raises(CheckpointError):
        toy.load_state_dict(state)
    state = toy.state_dict()
    state["param/first.weight"] = np.zeros((2, 2))
    with pytest.raises(CheckpointError):
        toy.load_state_dict(state)


def test_train_and_eval_propagate_to_children():
    toy = _Toy()
    toy.eval()
    assert not toy.norm.training
    toy.train()
    assert toy.norm.training
