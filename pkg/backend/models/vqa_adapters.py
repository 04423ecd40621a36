"""
Linguistically-aware attention injected into three VQA decoders.

Each model draws its baseline parameters from `default_rng(seed)` and its
linguistic branch from `default_rng([seed, 1])`, so a model built with
`use_lat=False` holds exactly the baseline parameters of its LAT counterpart.
Zeroing `lat_parameters()` then reproduces the baseline forward bit for bit.

Answers are classes; the heads return logits for per-class sigmoid + BCE.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from core.errors import ContractError, DimensionError
from core.losses import bce_with_logits
from core.nn import Linear, Module, add_bias, glorot_uniform
from core.recurrent import GRUCell, run_sequence
from core.tensor import (
    Tensor,
    add,
    concat,
    constant,
    expand_rows,
    expand_scalar,
    getitem,
    matmul,
    mul,
    parameter,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_masked,
    take_rows,
    tanh,
    transpose,
)
from features.embeddings import QuestionFeatures
from features.scene import SceneFeatures

logger = logging.getLogger(__name__)


class AdapterKind(str, Enum):
    UPDN = "updn"
    MUREL = "murel"
    BAN = "ban"


class MurelPooling(str, Enum):
    MAX = "max"
    ATTENTION = "attention"


class VqaModelConfig(BaseModel):
    kind: AdapterKind
    visual_dim: int = Field(..., ge=1)
    embedding_dim: int = Field(..., ge=1)
    hidden_dim: int = Field(64, ge=1, description="d, GRU state and fused feature size")
    joint_dim: int = Field(64, ge=1, description="C, bilinear joint size (BAN)")
    num_answers: int = Field(..., ge=2, description="d_o")
    use_lat: bool = True
    pooling: MurelPooling = MurelPooling.ATTENTION
    seed: int = 7


# ============================================================================
# Building blocks
# ============================================================================

def gated_tanh(x: Tensor, W: Tensor, b: Tensor, W_gate: Tensor, b_gate: Tensor) -> Tensor:
    """tanh(x W + b) * sigmoid(x W' + b')."""
    return mul(tanh(add_bias(matmul(x, W), b)), sigmoid(add_bias(matmul(x, W_gate), b_gate)))


class GatedTanh(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.in_features = in_features
        self.W = parameter(glorot_uniform(rng, in_features, out_features))
        self.b = parameter(np.zeros(out_features))
        self.W_gate = parameter(glorot_uniform(rng, in_features, out_features))
        self.b_gate = parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"gated tanh expects {self.in_features} features, got {x.shape}")
        return gated_tanh(x, self.W, self.b, self.W_gate, self.b_gate)


class LatVisualAttention(Module):
    """
    s_i = w_v . f_v([v_i, q]) + sum_j (w_l . f_l(l_i * q_j) + w_l . b_l), gamma = softmax(s).

    The sum runs over real question words. Without the linguistic branch only
    the first term remains.
    """

    def __init__(
        self,
        visual_dim: int,
        hidden_dim: int,
        embedding_dim: int,
        rng: np.random.Generator,
        lat_rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        self.f_v = GatedTanh(visual_dim + hidden_dim, embedding_dim, rng)
        self.w_v = parameter(glorot_uniform(rng, embedding_dim, 1, shape=(embedding_dim,)))
        self.use_lat = lat_rng is not None
        if self.use_lat:
            self.f_l = GatedTanh(embedding_dim, embedding_dim, lat_rng)
            self.w_l = parameter(glorot_uniform(lat_rng, embedding_dim, 1, shape=(embedding_dim,)))
            self.b_l = parameter(np.zeros(embedding_dim))

    def lat_parameters(self) -> List[Tensor]:
        if not self.use_lat:
            return []
        return self.f_l.parameters() + [self.w_l, self.b_l]

    def scores(self, V: Tensor, L: Tensor, Q: Tensor, q: Tensor) -> Tensor:
        m = V.shape[0]
        if L.shape[0] != m:
            raise DimensionError(f"V has {m} rows but L has {L.shape[0]}")
        joint = concat([V, expand_rows(q, m)], axis=1)
        s = matmul(self.f_v(joint), self.w_v)
        if not self.use_lat:
            return s
        if L.shape[1] != Q.shape[1]:
            raise DimensionError(f"L width {L.shape[1]} differs from word width {Q.shape[1]}")
        n = Q.shape[0]
        i_idx, j_idx = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
        pairs = mul(take_rows(L, i_idx.reshape(-1)), take_rows(Q, j_idx.reshape(-1)))
        per_pair = reshape(matmul(self.f_l(pairs), self.w_l), (m, n))
        bias = scale(reduce_sum(mul(self.w_l, self.b_l)), float(n))
        return add(s, add(reduce_sum(per_pair, axis=1), expand_scalar(bias, m)))

    def forward(self, V: Tensor, L: Tensor, Q: Tensor, q: Tensor) -> Tensor:
        return softmax_masked(self.scores(V, L, Q, q))


def lat_visual_attention(
    V: Tensor,
    L: Tensor,
    Q: Tensor,
    q: Tensor,
    attention: LatVisualAttention,
    word_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """gamma over the m objects; masked question rows are dropped first."""
    if word_mask is not None:
        keep = np.flatnonzero(np.asarray(word_mask, dtype=bool))
        if keep.size == 0:
            raise ContractError("question has no unmasked words")
        Q = take_rows(Q, keep)
    return attention(V, L, Q, q)


def murel_lat_pool(fused: Tensor, gamma: Tensor) -> Tensor:
    """sum_i gamma_i s_i over the per-object fused rows."""
    if fused.ndim != 2 or gamma.shape != (fused.shape[0],):
        raise DimensionError(f"pool weights {gamma.shape} do not fit fused rows {fused.shape}")
    return matmul(gamma, fused)


@dataclass
class BilinearOutput:
    joint: Tensor
    A: Tensor


class BilinearCoAttention(Module):
    """
    One low-rank bilinear glimpse between the rows of X and the rows of Y.

    A[i, j] = softmax over all pairs of (relu(X U)_i * p) . relu(Y V)_j and the
    joint vector is sum_ij A[i, j] relu(X U)_i * relu(Y V)_j.
    """

    def __init__(self, x_features: int, y_features: int, joint_dim: int, rng: np.random.Generator):
        super().__init__()
        self.U = parameter(glorot_uniform(rng, x_features, joint_dim))
        self.V = parameter(glorot_uniform(rng, y_features, joint_dim))
        self.p = parameter(glorot_uniform(rng, joint_dim, 1, shape=(joint_dim,)))

    def forward(self, X: Tensor, Y: Tensor) -> BilinearOutput:
        return bilinear_coattention(X, Y, self.U, self.V, self.p)


def bilinear_coattention(X: Tensor, Y: Tensor, U: Tensor, V: Tensor, p: Tensor) -> BilinearOutput:
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ContractError("bilinear attention needs at least one row on each side")
    rows_x, rows_y = X.shape[0], Y.shape[0]
    Xp = relu(matmul(X, U))
    Yp = relu(matmul(Y, V))
    logits = matmul(mul(Xp, expand_rows(p, rows_x)), transpose(Yp))
    A = reshape(softmax_masked(reshape(logits, (rows_x * rows_y,))), (rows_x, rows_y))
    joint = reduce_sum(mul(Xp, matmul(A, Yp)), axis=0)
    return BilinearOutput(joint=joint, A=A)


class AnswerHead(Module):
    """Logits over d_o answer classes from a fused vector."""

    def __init__(self, in_features: int, num_answers: int, rng: np.random.Generator):
        super().__init__()
        if num_answers < 2:
            raise ContractError(f"answer vocabulary needs at least 2 entries, got {num_answers}")
        self.num_answers = num_answers
        self.output = Linear(in_features, num_answers, rng)

    def forward(self, fused: Tensor) -> Tensor:
        return self.output(fused)


def encode_words(gru: GRUCell, Q: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Run the GRU over real word rows; returns (final state (d,), all states (n, d))."""
    steps = [constant(Q[t : t + 1]) for t in range(Q.shape[0])]
    final, outputs = run_sequence(gru, steps)
    return getitem(final, 0), concat(outputs, axis=0)


def _real_words(question: QuestionFeatures) -> np.ndarray:
    if not question.mask.any():
        raise ContractError("question has no unmasked words")
    return question.Q[question.mask]


# ============================================================================
# Models
# ============================================================================

class VqaModel(Module):
    """Shared surface: logits for training, sigmoid scores and argmax for evaluation."""

    def __init__(self, config: VqaModelConfig):
        super().__init__()
        self.config = config

    def lat_parameters(self) -> List[Tensor]:
        raise NotImplementedError

    def loss(self, scene: SceneFeatures, question: QuestionFeatures, answer: int) -> Tensor:
        return self.loss_from_logits(self(scene, question), answer)

    def loss_from_logits(self, logits: Tensor, answer: int) -> Tensor:
        """Mean binary cross-entropy against the one-hot answer."""
        if not 0 <= answer < self.config.num_answers:
            raise ContractError(f"answer {answer} outside 0..{self.config.num_answers - 1}")
        target = np.zeros(self.config.num_answers)
        target[answer] = 1.0
        return reduce_mean(bce_with_logits(logits, target))

    def answer_scores(self, scene: SceneFeatures, question: QuestionFeatures) -> np.ndarray:
        return sigmoid(self(scene, question)).numpy()

    def predict(self, scene: SceneFeatures, question: QuestionFeatures) -> int:
        return int(np.argmax(self(scene, question).data))


class UpDnLatModel(VqaModel):
    """GRU question vector, gamma-weighted image vector, elementwise fusion, answer head."""

    def __init__(self, config: VqaModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        lat_rng = np.random.default_rng([config.seed, 1]) if config.use_lat else None
        d = config.hidden_dim
        self.question_encoder = GRUCell(config.embedding_dim, d, rng)
        self.attention = LatVisualAttention(config.visual_dim, d, config.embedding_dim, rng, lat_rng)
        self.image_projection = Linear(config.visual_dim, d, rng)
        self.head = AnswerHead(d, config.num_answers, rng)

    def lat_parameters(self) -> List[Tensor]:
        return self.attention.lat_parameters()

    def attend(self, scene: SceneFeatures, question: QuestionFeatures) -> Tuple[Tensor, Tensor]:
        """(gamma, q)."""
        Q = _real_words(question)
        q, _ = encode_words(self.question_encoder, Q)
        gamma = self.attention(constant(scene.V), constant(scene.L), constant(Q), q)
        return gamma, q

    def forward(self, scene: SceneFeatures, question: QuestionFeatures) -> Tensor:
        gamma, q = self.attend(scene, question)
        f = self.image_projection(matmul(gamma, constant(scene.V)))
        return self.head(mul(f, q))


class MurelLatModel(VqaModel):
    """
    Per-object fusion s_i = tanh(v_i W_v) * tanh(q W_q), pooled into one vector.

    The original pooling is a global max over objects; the attention pooling
    replaces it with the gamma-weighted average.
    """

    def __init__(self, config: VqaModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        lat_rng = (
            np.random.default_rng([config.seed, 1])
            if config.use_lat and config.pooling == MurelPooling.ATTENTION
            else None
        )
        d = config.hidden_dim
        self.question_encoder = GRUCell(config.embedding_dim, d, rng)
        self.visual_fusion = Linear(config.visual_dim, d, rng)
        self.question_fusion = Linear(d, d, rng)
        self.head = AnswerHead(d, config.num_answers, rng)
        self.attention: Optional[LatVisualAttention] = None
        if config.pooling == MurelPooling.ATTENTION:
            self.attention = LatVisualAttention(config.visual_dim, d, config.embedding_dim, rng, lat_rng)

    def lat_parameters(self) -> List[Tensor]:
        return self.attention.lat_parameters() if self.attention is not None else []

    def fuse(self, scene: SceneFeatures, q: Tensor) -> Tensor:
        m = scene.m
        visual = tanh(self.visual_fusion(constant(scene.V)))
        question = tanh(self.question_fusion(q))
        return mul(visual, expand_rows(question, m))

    def attend(self, scene: SceneFeatures, question: QuestionFeatures) -> Optional[Tensor]:
        """gamma, or None under max pooling."""
        if self.attention is None:
            return None
        Q = _real_words(question)
        q, _ = encode_words(self.question_encoder, Q)
        return self.attention(constant(scene.V), constant(scene.L), constant(Q), q)

    def forward(self, scene: SceneFeatures, question: QuestionFeatures) -> Tensor:
        Q = _real_words(question)
        q, _ = encode_words(self.question_encoder, Q)
        fused = self.fuse(scene, q)
        if self.attention is None:
            pooled = reduce_max(fused, axis=0)
        else:
            gamma = self.attention(constant(scene.V), constant(scene.L), constant(Q), q)
            pooled = murel_lat_pool(fused, gamma)
        return self.head(pooled)


def ban_lat_combine(
    Q_hat: Tensor,
    V: Tensor,
    Q: Tensor,
    L: Tensor,
    visual_block: BilinearCoAttention,
    linguistic_block: Optional[BilinearCoAttention],
) -> Tensor:
    """f_o = BAN(Q_hat, V) + BAN(Q, L), the two glimpses with separate parameters."""
    f_v = visual_block(Q_hat, V).joint
    if linguistic_block is None:
        return f_v
    return add(f_v, linguistic_block(Q, L).joint)


class BanLatModel(VqaModel):
    def __init__(self, config: VqaModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        C, d = config.joint_dim, config.hidden_dim
        self.question_encoder = GRUCell(config.embedding_dim, d, rng)
        self.visual_block = BilinearCoAttention(d, config.visual_dim, C, rng)
        self.head = AnswerHead(C, config.num_answers, rng)
        self.linguistic_block: Optional[BilinearCoAttention] = None
        if config.use_lat:
            lat_rng = np.random.default_rng([config.seed, 1])
            self.linguistic_block = BilinearCoAttention(config.embedding_dim, config.embedding_dim, C, lat_rng)

    def lat_parameters(self) -> List[Tensor]:
        return self.linguistic_block.parameters() if self.linguistic_block is not None else []

    def glimpses(
        self, scene: SceneFeatures, question: QuestionFeatures
    ) -> Tuple[BilinearOutput, Optional[BilinearOutput]]:
        """The visual glimpse and, with the linguistic branch, the word-label glimpse."""
        Q = _real_words(question)
        _, Q_hat = encode_words(self.question_encoder, Q)
        visual = self.visual_block(Q_hat, constant(scene.V))
        linguistic = None
        if self.linguistic_block is not None:
            linguistic = self.linguistic_block(constant(Q), constant(scene.L))
        return visual, linguistic

    def forward(self, scene: SceneFeatures, question: QuestionFeatures) -> Tensor:
        Q = _real_words(question)
        _, Q_hat = encode_words(self.question_encoder, Q)
        f_o = ban_lat_combine(
            Q_hat, constant(scene.V), constant(Q), constant(scene.L), self.visual_block, self.linguistic_block
        )
        return self.head(f_o)


ADAPTERS = {
    AdapterKind.UPDN: UpDnLatModel,
    AdapterKind.MUREL: MurelLatModel,
    AdapterKind.BAN: BanLatModel,
}


def build_adapter(config: VqaModelConfig) -> VqaModel:
    return ADAPTERS[config.kind](config)
