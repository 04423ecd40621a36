import numpy as np
import pytest

from core.errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    GraphStateError,
    NonFiniteError,
)
from core.gradcheck import finite_diff_check
from core.losses import bce_with_logits, cross_entropy_with_logits, smooth_l1
from core.nn import BatchNorm1d, Linear, batch_norm
from core.tensor import (
    add,
    concat,
    constant,
    elementwise,
    expand_rows,
    log,
    matmul,
    mul,
    parameter,
    reduce,
    reduce_sum,
    scatter_rows,
    softmax_masked,
    tanh,
)
from harness.gradcheck_suite import DEFAULT_TOLERANCE, op_cases, run_suite


# ============================================================================
# Shapes and contracts
# ============================================================================

def test_elementwise_ops_refuse_to_broadcast():
    with pytest.raises(DimensionError):
        add(constant(np.ones((2, 3))), constant(np.ones(3)))
    with pytest.raises(DimensionError):
        mul(constant(np.ones((2, 3))), constant(np.ones((3, 2))))


def test_matmul_shapes():
    a = constant(np.ones((2, 3)))
    assert matmul(a, constant(np.ones((3, 4)))).shape == (2, 4)
    assert matmul(constant(np.ones(3)), constant(np.ones((3, 4)))).shape == (4,)
    assert matmul(a, constant(np.ones(3))).shape == (2,)
    with pytest.raises(DimensionError):
        matmul(a, constant(np.ones((2, 4))))


def test_matmul_matrix_vector_values_and_gradient():
    a = parameter(np.arange(6.0).reshape(2, 3))
    v = parameter(np.array([1.0, -1.0, 2.0]))
    out = matmul(a, v)
    np.testing.assert_allclose(out.data, [3.0, 9.0])
    reduce_sum(out, axis=0).backward()
    np.testing.assert_allclose(a.grad, np.tile(v.data, (2, 1)))
    np.testing.assert_allclose(v.grad, [3.0, 5.0, 7.0])
    assert matmul(constant(np.ones(3)), constant(np.ones(3))).shape == ()

    names = ["matmul_vector", "matmul_matrix_vector"]
    results = run_suite(seed=4, include_models=False, names=names)
    assert [r.name for r in results] == names
    assert all(r.passed for r in results)


def test_concat_rejects_bad_axis_and_shapes():
    a, b = constant(np.ones((2, 3))), constant(np.ones((2, 4)))
    assert concat([a, b], axis=1).shape == (2, 7)
    assert concat([a, b], axis=-1).shape == (2, 7)
    with pytest.raises(DimensionError):
        concat([a, b], axis=0)
    with pytest.raises(DimensionError):
        concat([a, b], axis=2)


def test_reduce_rejects_unknown_op_and_axis():
    t = constant(np.arange(6.0).reshape(2, 3))
    assert reduce(t, "max", axis=-1).numpy().tolist() == [2.0, 5.0]
    with pytest.raises(ContractError):
        reduce(t, "median")
    with pytest.raises(DimensionError):
        reduce(t, "sum", axis=2)


def test_elementwise_dispatch_by_name():
    a = constant([0.5, -0.5])
    np.testing.assert_allclose(elementwise("tanh", a).numpy(), np.tanh([0.5, -0.5]))
    with pytest.raises(ContractError):
        elementwise("cosh", a)
    with pytest.raises(ContractError):
        elementwise("add", a)


def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError):
        log(constant([1.0, 0.0]))
    with pytest.raises(NonFiniteError):
        log(constant([-1.0]))


# ============================================================================
# Backward
# ============================================================================

def test_backward_of_simple_expression():
    x = parameter([1.0, 2.0, 3.0])
    w = parameter([0.5, -1.0, 2.0])
    loss = reduce_sum(mul(x, w))
    loss.backward()
    np.testing.assert_allclose(x.grad, w.data)
    np.testing.assert_allclose(w.grad, x.data)


def test_backward_accumulates_over_shared_use():
    x = parameter([2.0])
    loss = reduce_sum(add(mul(x, x), x))
    loss.backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_requires_scalar_loss():
    x = parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        tanh(x).backward()


def test_backward_twice_on_same_graph_raises():
    x = parameter([1.0, 2.0])
    loss = reduce_sum(tanh(x))
    loss.backward()
    x.grad = None
    with pytest.raises(GraphStateError):
        loss.backward()


def test_backward_with_stale_gradients_raises():
    x = parameter([1.0, 2.0])
    reduce_sum(tanh(x)).backward()
    with pytest.raises(GraphStateError):
        reduce_sum(tanh(x)).backward()
    x.grad = None
    reduce_sum(tanh(x)).backward()
    assert x.grad is not None


def test_scatter_rows_places_rows_and_routes_gradient():
    a = parameter([[1.0, 2.0], [3.0, 4.0]])
    out = scatter_rows(a, [2, 0], 3)
    np.testing.assert_array_equal(out.numpy(), [[3.0, 4.0], [0.0, 0.0], [1.0, 2.0]])
    reduce_sum(mul(out, constant([[1.0, 1.0], [5.0, 5.0], [2.0, 3.0]]))).backward()
    np.testing.assert_array_equal(a.grad, [[2.0, 3.0], [1.0, 1.0]])
    with pytest.raises(ContractError):
        scatter_rows(a, [1, 1], 3)


def test_finite_diff_check_catches_a_wrong_gradient():
    x = parameter([0.3, -0.7])

    def honest():
        return reduce_sum(tanh(x))

    assert finite_diff_check(honest, [x]) < 1e-8

    # backward cannot see through the constant copy
    def broken():
        return reduce_sum(tanh(add(constant(x.data), mul(x, constant([0.0, 0.0])))))

    assert finite_diff_check(broken, [x]) > 0.1


@pytest.mark.parametrize("name,build", op_cases(), ids=[name for name, _ in op_cases()])
def test_op_gradients_match_finite_differences(name, build):
    f, params = build(np.random.default_rng(11))
    assert finite_diff_check(f, params) < DEFAULT_TOLERANCE


def test_suite_runner_reports_every_op():
    results = run_suite(seed=3, include_models=False)
    assert len(results) == len(op_cases())
    assert all(r.passed for r in results), [(r.name, r.error) for r in results if not r.passed]


# ============================================================================
# Softmax
# ============================================================================

def test_softmax_masked_normalises_on_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rows, cols = rng.integers(1, 5), rng.integers(1, 8)
        scores = constant(rng.normal(scale=5.0, size=(rows, cols)))
        mask = rng.random((rows, cols)) < 0.7
        mask[np.arange(rows), rng.integers(0, cols, size=rows)] = True
        y = softmax_masked(scores, mask).numpy()
        assert np.all(y >= 0)
        assert np.all(y[~mask] == 0.0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_masked_all_masked_row_raises():
    with pytest.raises(DegenerateInputError):
        softmax_masked(constant([1.0, 2.0]), np.array([False, False]))
    with pytest.raises(DegenerateInputError):
        softmax_masked(constant(np.ones((2, 2))), np.array([[True, False], [False, False]]))


def test_softmax_is_stable_for_large_scores():
    y = softmax_masked(constant([1000.0, 1000.0, -1000.0])).numpy()
    np.testing.assert_allclose(y, [0.5, 0.5, 0.0], atol=1e-12)


# ============================================================================
# Losses
# ============================================================================

def test_smooth_l1_values():
    loss = smooth_l1(constant([0.0, 0.5, 3.0, -2.0]), [0.0, 0.0, 0.0, 0.0]).numpy()
    np.testing.assert_allclose(loss, [0.0, 0.125, 2.5, 1.5])


def test_smooth_l1_target_shape_must_match():
    with pytest.raises(DimensionError):
        smooth_l1(constant([0.0, 1.0]), [0.0, 1.0, 2.0])


def test_bce_with_logits_is_finite_for_extreme_logits():
    loss = bce_with_logits(constant([800.0, -800.0]), [1.0, 0.0]).numpy()
    np.testing.assert_allclose(loss, [0.0, 0.0], atol=1e-12)


def test_cross_entropy_matches_log_softmax():
    z = np.array([1.0, 2.0, 0.5])
    expected = -np.log(np.exp(z[1]) / np.exp(z).sum())
    assert cross_entropy_with_logits(constant(z), 1).item() == pytest.approx(expected)
    with pytest.raises(DimensionError):
        cross_entropy_with_logits(constant(z), 3)


# ============================================================================
# Layers
# ============================================================================

def test_linear_rejects_wrong_width():
    layer = Linear(3, 2, np.random.default_rng(0))
    assert layer(constant(np.ones((4, 3)))).shape == (4, 2)
    with pytest.raises(DimensionError):
        layer(constant(np.ones((4, 2))))


def test_batch_norm_train_mode_statistics():
    x = np.array([[1.0, 10.0], [3.0, 20.0], [5.0, 60.0]])
    out, mean, var = batch_norm(
        constant(x), parameter(np.ones(2)), parameter(np.zeros(2)), np.zeros(2), np.ones(2), training=True
    )
    np.testing.assert_allclose(out.numpy().mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batch_norm_needs_two_rows_in_train_mode():
    norm = BatchNorm1d(3)
    with pytest.raises(DegenerateInputError):
        norm(constant(np.ones((1, 3))))
    norm.eval()
    out = norm(constant(np.full((1, 3), 2.0)))
    np.testing.assert_allclose(out.numpy(), 2.0 / np.sqrt(1.0 + 1e-5) * np.ones((1, 3)))


def test_expand_rows_repeats_vector():
    v = parameter([1.0, 2.0])
    out = expand_rows(v, 3)
    assert out.shape == (3, 2)
    reduce_sum(out).backward()
    np.testing.assert_array_equal(v.grad, [3.0, 3.0])
