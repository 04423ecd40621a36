"""
Finite-difference gradient suite over every differentiable op and every model
at toy sizes. Used by `lat grad-check` and the test suite.
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core.gradcheck import finite_diff_check
from core.losses import bce_with_logits, cross_entropy_with_logits, smooth_l1
from core.nn import BatchNorm1d
from core.recurrent import BiLSTM, GRUCell, LSTMCell, run_sequence
from core.tensor import (
    Tensor,
    add,
    concat,
    constant,
    exp,
    expand_cols,
    expand_rows,
    expand_scalar,
    getitem,
    log,
    matmul,
    mul,
    neg,
    outer_product,
    parameter,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    scatter_rows,
    sigmoid,
    softmax_masked,
    stack,
    sub,
    take_rows,
    tanh,
    transpose,
)
from features.embeddings import QuestionFeatures
from features.scene import SceneFeatures
from models.captioning_model import CaptionModel, CaptionModelConfig, END_ID, START_ID, caption_loss
from models.counting_model import CountingModel, CountingModelConfig, collate
from models.vqa_adapters import MurelPooling, VqaModelConfig, build_adapter

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4

Build = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], Sequence[Tensor]]]


@dataclass
class GradCheckResult:
    name: str
    error: float
    seconds: float
    passed: bool


# ============================================================================
# Toy inputs
# ============================================================================

def toy_scene(rng: np.random.Generator, m: int, visual_dim: int, embedding_dim: int) -> SceneFeatures:
    return SceneFeatures(
        V=rng.standard_normal((m, visual_dim)),
        L=rng.standard_normal((m, embedding_dim)),
        B=rng.uniform(0.05, 0.95, size=(m, 5)),
        labels=tuple(f"object{i}" for i in range(m)),
    )


def toy_question(rng: np.random.Generator, n: int, embedding_dim: int, max_len: Optional[int] = None) -> QuestionFeatures:
    max_len = max_len or n
    Q = np.zeros((max_len, embedding_dim))
    Q[:n] = rng.standard_normal((n, embedding_dim))
    mask = np.zeros(max_len, dtype=bool)
    mask[:n] = True
    return QuestionFeatures(Q=Q, mask=mask, tokens=tuple(f"word{j}" for j in range(n)))


def _weighted_sum(t: Tensor, weights: np.ndarray) -> Tensor:
    return reduce_sum(mul(t, constant(weights)))


def _op_case(fn: Callable[..., Tensor], *shapes: Tuple[int, ...], low: float = -1.5, high: float = 1.5) -> Build:
    """Weighted sum of fn(params) with weights fixed at build time."""

    def build(rng: np.random.Generator):
        params = [parameter(rng.uniform(low, high, size=shape)) for shape in shapes]
        weights = rng.standard_normal(fn(*params).shape)
        return (lambda: _weighted_sum(fn(*params), weights)), params

    return build


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# ============================================================================
# Op cases
# ============================================================================

def _relu_case(rng: np.random.Generator):
    p = parameter(_away_from_zero(rng, (3, 4)))
    weights = rng.standard_normal((3, 4))
    return (lambda: _weighted_sum(relu(p), weights)), [p]


def _smooth_l1_case(rng: np.random.Generator):
    pred = parameter(rng.standard_normal(6))
    # targets in both the quadratic and the linear zones
    offsets = np.array([0.3, -0.4, 2.0, -2.5, 0.1, 1.7])
    target = pred.data + offsets
    return (lambda: reduce_mean(smooth_l1(pred, target))), [pred]


def _max_case(rng: np.random.Generator):
    p = parameter(rng.permutation(12).reshape(3, 4) * 0.5 + rng.uniform(0, 0.1, size=(3, 4)))
    weights = rng.standard_normal(4)
    return (lambda: _weighted_sum(reduce_max(p, axis=0), weights)), [p]


def _softmax_case(rng: np.random.Generator):
    p = parameter(rng.standard_normal((3, 5)))
    mask = np.ones((3, 5), dtype=bool)
    mask[0, 3:] = False
    mask[2, 0] = False
    weights = rng.standard_normal((3, 5))
    return (lambda: _weighted_sum(softmax_masked(p, mask), weights)), [p]


def _batch_norm_case(rng: np.random.Generator):
    norm = BatchNorm1d(3)
    norm.gamma.data = rng.uniform(0.5, 1.5, size=3)
    norm.beta.data = rng.standard_normal(3)
    x = parameter(rng.standard_normal((5, 3)))
    weights = rng.standard_normal((5, 3))
    return (lambda: _weighted_sum(norm(x), weights)), [x] + norm.parameters()


def _scatter_case(rng: np.random.Generator):
    p = parameter(rng.standard_normal((3, 2)))
    weights = rng.standard_normal((5, 2))
    return (lambda: _weighted_sum(scatter_rows(p, [4, 0, 2], 5), weights)), [p]


def _lstm_case(rng: np.random.Generator):
    cell = LSTMCell(3, 4, rng)
    xs = [constant(rng.standard_normal((2, 3))) for _ in range(3)]
    offset = parameter(rng.standard_normal((2, 16)) * 0.1)
    weights = rng.standard_normal((2, 4))

    def f():
        state = cell.initial_state(2)
        for i, x in enumerate(xs):
            state = cell(x, state, input_offset=offset if i == 0 else None)
        return _weighted_sum(state.h, weights)

    return f, cell.parameters() + [offset]


def _gru_case(rng: np.random.Generator):
    cell = GRUCell(3, 4, rng)
    xs = [constant(rng.standard_normal((2, 3))) for _ in range(3)]
    mask = np.array([[True, True, True], [True, False, False]])
    weights = rng.standard_normal((2, 4))

    def f():
        h, _ = run_sequence(cell, xs, mask=mask)
        return _weighted_sum(h, weights)

    return f, cell.parameters()


def _bilstm_case(rng: np.random.Generator):
    encoder = BiLSTM(3, 2, rng)
    xs = [parameter(rng.standard_normal((2, 3))) for _ in range(3)]
    mask = np.array([[True, True, True], [True, True, False]])
    weights = rng.standard_normal((2, 4))
    return (lambda: _weighted_sum(encoder(xs, mask), weights)), encoder.parameters() + xs


def _loss_cases() -> List[Tuple[str, Build]]:
    def bce(rng):
        logits = parameter(rng.standard_normal(5))
        targets = np.array([1.0, 0.0, 0.0, 1.0, 0.0])
        return (lambda: reduce_mean(bce_with_logits(logits, targets))), [logits]

    def cross_entropy(rng):
        logits = parameter(rng.standard_normal(6))
        return (lambda: cross_entropy_with_logits(logits, 2)), [logits]

    return [("smooth_l1", _smooth_l1_case), ("bce_with_logits", bce), ("cross_entropy", cross_entropy)]


def op_cases() -> List[Tuple[str, Build]]:
    return [
        ("add", _op_case(add, (3, 4), (3, 4))),
        ("sub", _op_case(sub, (3, 4), (3, 4))),
        ("mul", _op_case(mul, (3, 4), (3, 4))),
        ("neg", _op_case(neg, (5,))),
        ("scale", _op_case(lambda a: scale(a, -2.5), (2, 3))),
        ("tanh", _op_case(tanh, (3, 4))),
        ("sigmoid", _op_case(sigmoid, (3, 4))),
        ("relu", _relu_case),
        ("exp", _op_case(exp, (3, 4))),
        ("log", _op_case(log, (3, 4), low=0.3, high=2.0)),
        ("matmul", _op_case(matmul, (3, 4), (4, 2))),
        ("matmul_vector", _op_case(matmul, (4,), (4, 3))),
        ("matmul_matrix_vector", _op_case(matmul, (3, 4), (4,))),
        ("outer_product", _op_case(outer_product, (3,), (3,))),
        ("transpose", _op_case(transpose, (3, 4))),
        ("reshape", _op_case(lambda a: reshape(a, (2, 6)), (3, 4))),
        ("getitem", _op_case(lambda a: getitem(a, (slice(0, 2), 1)), (3, 4))),
        ("take_rows", _op_case(lambda a: take_rows(a, [2, 0, 2]), (3, 4))),
        ("expand_rows", _op_case(lambda a: expand_rows(a, 3), (4,))),
        ("expand_cols", _op_case(lambda a: expand_cols(a, 3), (4,))),
        ("expand_scalar", _op_case(lambda a: expand_scalar(a, 3), (1,))),
        ("scatter_rows", _scatter_case),
        ("concat", _op_case(lambda a, b: concat([a, b], axis=1), (3, 2), (3, 4))),
        ("stack", _op_case(lambda a, b: stack([a, b]), (4,), (4,))),
        ("reduce_sum", _op_case(lambda a: reduce_sum(a, axis=1), (3, 4))),
        ("reduce_mean", _op_case(lambda a: reduce_mean(a, axis=0), (3, 4))),
        ("reduce_max", _max_case),
        ("softmax_masked", _softmax_case),
        ("batch_norm", _batch_norm_case),
        ("lstm", _lstm_case),
        ("gru", _gru_case),
        ("bilstm", _bilstm_case),
    ] + _loss_cases()


# ============================================================================
# Model cases
# ============================================================================

TOY_VISUAL_DIM = 4
TOY_EMBEDDING_DIM = 5


def _counting_case(rng: np.random.Generator):
    model = CountingModel(CountingModelConfig(
        visual_dim=TOY_VISUAL_DIM, embedding_dim=TOY_EMBEDDING_DIM, hidden_dim=8, rank=3, seed=int(rng.integers(1 << 16))
    ))
    samples = [
        (toy_scene(rng, 3, TOY_VISUAL_DIM, TOY_EMBEDDING_DIM), toy_question(rng, 4, TOY_EMBEDDING_DIM, 5)),
        (toy_scene(rng, 2, TOY_VISUAL_DIM, TOY_EMBEDDING_DIM), toy_question(rng, 3, TOY_EMBEDDING_DIM, 5)),
    ]
    batch = collate(samples)
    scores, _ = model.forward_batch(batch)
    target = scores.data + np.array([0.4, -0.3])
    return (lambda: reduce_mean(smooth_l1(model.forward_batch(batch)[0], target))), model.parameters()


def _vqa_case(kind: str, pooling: MurelPooling = MurelPooling.ATTENTION) -> Build:
    def build(rng: np.random.Generator):
        model = build_adapter(VqaModelConfig(
            kind=kind,
            visual_dim=TOY_VISUAL_DIM,
            embedding_dim=TOY_EMBEDDING_DIM,
            hidden_dim=4,
            joint_dim=3,
            num_answers=3,
            pooling=pooling,
            seed=int(rng.integers(1 << 16)),
        ))
        scene = toy_scene(rng, 3, TOY_VISUAL_DIM, TOY_EMBEDDING_DIM)
        question = toy_question(rng, 3, TOY_EMBEDDING_DIM)
        for p in model.lat_parameters():
            if not np.any(p.data):
                p.data = rng.standard_normal(p.shape) * 0.3
        return (lambda: model.loss(scene, question, 1)), model.parameters()

    return build


def _caption_case(rng: np.random.Generator):
    model = CaptionModel(
        CaptionModelConfig(
            visual_dim=TOY_VISUAL_DIM,
            embedding_dim=TOY_EMBEDDING_DIM,
            hidden_dim=8,
            output_hidden_dim=6,
            attention_dim=4,
            vocab_size=6,
            seed=int(rng.integers(1 << 16)),
        ),
        word_vectors=rng.standard_normal((6, TOY_EMBEDDING_DIM)),
    )
    scene = toy_scene(rng, 2, TOY_VISUAL_DIM, TOY_EMBEDDING_DIM)
    ids = [START_ID, 4, 5, END_ID]
    return (lambda: caption_loss(model, scene, ids)), model.parameters()


def model_cases() -> List[Tuple[str, Build]]:
    return [
        ("counting_model", _counting_case),
        ("updn_lat", _vqa_case("updn")),
        ("murel_lat", _vqa_case("murel")),
        ("murel_max", _vqa_case("murel", MurelPooling.MAX)),
        ("ban_lat", _vqa_case("ban")),
        ("caption_model", _caption_case),
    ]


def run_suite(
    seed: int = 7,
    tolerance: float = DEFAULT_TOLERANCE,
    include_models: bool = True,
    names: Optional[Sequence[str]] = None,
) -> List[GradCheckResult]:
    cases = op_cases() + (model_cases() if include_models else [])
    if names is not None:
        wanted = set(names)
        cases = [(name, build) for name, build in cases if name in wanted]
    results = []
    for i, (name, build) in enumerate(cases):
        start = time.perf_counter()
        f, params = build(np.random.default_rng([seed, 3, i]))
        error = finite_diff_check(f, params)
        result = GradCheckResult(name=name, error=error, seconds=time.perf_counter() - start, passed=error < tolerance)
        level = logging.INFO if result.passed else logging.WARNING
        logger.log(level, "grad-check %-16s max rel error %.2e (%.2fs)", name, error, result.seconds)
        results.append(result)
    return results
