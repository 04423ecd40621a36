"""
Counting model: semantic dense co-attention over objects and question words,
followed by a low-rank bilinear count regressor.

Per-sample shapes: O is m x (d_v + 5), L is m x d_w, Q is n x d_w, the encoded
image f and question q have length d, the Tucker factors W_q and W_f are d x k
and the core T_c is k x k.

Batched code pads objects to M rows and words to N rows per sample. Padded
rows are zero and carry False in the object / word masks. Masked score
entries are stored as 0 rather than -inf (every tensor stays finite); the
softmaxes take the masks explicitly.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from tensorly import tucker_to_tensor

from core.errors import ContractError, DimensionError
from core.losses import smooth_l1
from core.nn import BatchNorm1d, Linear, Module, glorot_uniform
from core.recurrent import BiLSTM
from core.tensor import (
    Tensor,
    add,
    constant,
    expand_cols,
    expand_scalar,
    getitem,
    matmul,
    mul,
    parameter,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scatter_rows,
    softmax_masked,
    take_rows,
    tanh,
)
from features.embeddings import QuestionFeatures
from features.scene import BOX_FEATURES, SceneFeatures, concat_visual_box

logger = logging.getLogger(__name__)


class CountingVariant(str, Enum):
    FULL = "full"
    NO_COATTENTION = "no_coattention"
    NO_L = "no_L"
    NO_VB = "no_VB"
    NO_B = "no_B"
    LINEAR_REGRESSION = "linear_regression"
    ONEHOT_SEPARATE = "onehot_separate"
    ONEHOT_SHARED = "onehot_shared"

    @property
    def one_hot(self) -> bool:
        return self in (CountingVariant.ONEHOT_SEPARATE, CountingVariant.ONEHOT_SHARED)


class CountingModelConfig(BaseModel):
    visual_dim: int = Field(..., ge=1, description="d_v, length of an object visual feature")
    embedding_dim: int = Field(..., ge=1, description="d_w, word-vector length")
    hidden_dim: int = Field(64, ge=2, description="d, length of f and q")
    rank: int = Field(8, ge=1, description="k, Tucker rank of the regressor")
    variant: CountingVariant = CountingVariant.FULL
    vocabulary: List[str] = Field(default_factory=list, description="word list for the one-hot variants")
    seed: int = 7

    @model_validator(mode="after")
    def _check_dims(self) -> "CountingModelConfig":
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even (two LSTM directions of d/2)")
        if self.rank > self.hidden_dim:
            raise ValueError("rank must not exceed hidden_dim")
        if self.variant.one_hot and not self.vocabulary:
            raise ValueError(f"variant {self.variant.value} needs a vocabulary")
        return self


@dataclass
class CoAttentionWeights:
    """mu over objects, nu over words, and the score matrix they came from."""

    mu: Tensor
    nu: Tensor
    S: Tensor


@dataclass(frozen=True)
class CountingBatch:
    O: np.ndarray            # (B, M, d_v + 5)
    V: np.ndarray            # (B, M, d_v)
    L: np.ndarray            # (B, M, d_w)
    Q: np.ndarray            # (B, N, d_w)
    object_mask: np.ndarray  # (B, M)
    word_mask: np.ndarray    # (B, N)
    labels: Tuple[Tuple[str, ...], ...]
    tokens: Tuple[Tuple[str, ...], ...]

    @property
    def size(self) -> int:
        return self.O.shape[0]


def collate(samples: Sequence[Tuple[SceneFeatures, QuestionFeatures]]) -> CountingBatch:
    """Pad a list of (scene, question) pairs into one batch."""
    if not samples:
        raise ContractError("cannot collate an empty batch")
    d_v = samples[0][0].V.shape[1]
    d_w = samples[0][0].L.shape[1]
    n = samples[0][1].Q.shape[0]
    M = max(scene.m for scene, _ in samples)
    B = len(samples)

    O = np.zeros((B, M, d_v + BOX_FEATURES))
    L = np.zeros((B, M, d_w))
    Q = np.zeros((B, n, d_w))
    object_mask = np.zeros((B, M), dtype=bool)
    word_mask = np.zeros((B, n), dtype=bool)
    for b, (scene, question) in enumerate(samples):
        if scene.V.shape[1] != d_v or scene.L.shape[1] != d_w or question.Q.shape != (n, d_w):
            raise DimensionError(f"sample {b} does not share the batch feature sizes")
        O[b, : scene.m] = concat_visual_box(scene)
        L[b, : scene.m] = scene.L
        Q[b] = question.Q
        object_mask[b, : scene.m] = True
        word_mask[b] = question.mask
    return CountingBatch(
        O=O,
        V=O[:, :, :d_v].copy(),
        L=L,
        Q=Q,
        object_mask=object_mask,
        word_mask=word_mask,
        labels=tuple(scene.labels for scene, _ in samples),
        tokens=tuple(question.tokens for _, question in samples),
    )


# ============================================================================
# Co-attention
# ============================================================================

def pairwise_scores(
    object_term: Tensor,
    Q: Tensor,
    W_a: Tensor,
    b_a: Tensor,
    object_mask: np.ndarray,
    word_mask: np.ndarray,
) -> Tensor:
    """
    S[b, i, j] = W_a . tanh(object_term[b, i] * Q[b, j]) + b_a over a padded batch.

    object_term is (B, M, d_w), already the product of the projected visual
    term and L (or whichever factors the variant keeps). Entries where the
    object or the word is padding are 0.
    """
    if object_term.ndim != 3 or Q.ndim != 3 or object_term.shape[0] != Q.shape[0]:
        raise DimensionError(f"pairwise_scores: expected (B, M, d) and (B, N, d), got {object_term.shape} and {Q.shape}")
    if object_term.shape[2] != Q.shape[2]:
        raise DimensionError(f"object features have width {object_term.shape[2]}, question words {Q.shape[2]}")
    B, M, d_w = object_term.shape
    N = Q.shape[1]

    b_idx, i_idx, j_idx = np.meshgrid(np.arange(B), np.arange(M), np.arange(N), indexing="ij")
    left = take_rows(reshape(object_term, (B * M, d_w)), (b_idx * M + i_idx).reshape(-1))
    right = take_rows(reshape(Q, (B * N, d_w)), (b_idx * N + j_idx).reshape(-1))
    raw = add(matmul(tanh(mul(left, right)), W_a), expand_scalar(b_a, B * M * N))

    joint = object_mask[:, :, None] & word_mask[:, None, :]
    return mul(reshape(raw, (B, M, N)), constant(joint.astype(np.float64)))


def score_matrix(
    object_term: Tensor,
    Q: Tensor,
    W_a: Tensor,
    b_a: Tensor,
    word_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Single-sample S (m x n); masked word columns are 0."""
    m, n = object_term.shape[0], Q.shape[0]
    words = np.ones(n, dtype=bool) if word_mask is None else np.asarray(word_mask, dtype=bool)
    S = pairwise_scores(
        reshape(object_term, (1,) + object_term.shape),
        reshape(Q, (1,) + Q.shape),
        W_a,
        b_a,
        np.ones((1, m), dtype=bool),
        words[None, :],
    )
    return getitem(S, 0)


def coattention_weights(
    S: Tensor,
    word_mask: np.ndarray,
    object_mask: Optional[np.ndarray] = None,
    uniform_words: bool = False,
) -> CoAttentionWeights:
    """
    mu = softmax over objects of the row sums of S, nu = softmax over words of
    the column sums. Works on one (m, n) matrix or a (B, M, N) batch.

    With uniform_words every real word gets the same weight.
    """
    word_mask = np.asarray(word_mask, dtype=bool)
    if object_mask is None:
        object_mask = np.ones(S.shape[:-1], dtype=bool)
    mu = softmax_masked(reduce_sum(S, axis=-1), object_mask)
    if uniform_words:
        counts = word_mask.sum(axis=-1, keepdims=True)
        nu = constant(word_mask / np.maximum(counts, 1))
    else:
        nu = softmax_masked(reduce_sum(S, axis=-2), word_mask)
    return CoAttentionWeights(mu=mu, nu=nu, S=S)


def encode_image(V: Tensor, mu: Tensor, W_s: Tensor) -> Tensor:
    """f = sum_i mu_i (v_i W_s), for one scene (m, d_v) or a batch (B, M, d_v)."""
    if V.ndim == 2:
        return matmul(mu, matmul(V, W_s))
    B, M, d_v = V.shape
    d = W_s.shape[1]
    projected = matmul(reshape(V, (B * M, d_v)), W_s)
    weighted = mul(projected, expand_cols(reshape(mu, (B * M,)), d))
    return reduce_sum(reshape(weighted, (B, M, d)), axis=1)


def encode_question(Q: Tensor, nu: Tensor, word_mask: np.ndarray, encoder: BiLSTM) -> Tensor:
    """
    Run the Bi-LSTM over nu_j * q_j; padded positions carry the state through.

    Q is (n, d_w) with nu (n,) or a batch (B, N, d_w) with nu (B, N).
    """
    single = nu.ndim == 1
    mask = np.asarray(word_mask, dtype=bool)
    if single:
        Q = reshape(Q, (1,) + Q.shape)
        nu = reshape(nu, (1, nu.shape[0]))
        mask = mask[None, :]
    if not mask.any():
        raise ContractError("question has no unmasked words")
    d_w = Q.shape[2]
    # trailing all-padding steps leave both directions untouched
    length = int(np.flatnonzero(mask.any(axis=0)).max()) + 1
    steps = [
        mul(getitem(Q, (slice(None), t)), expand_cols(getitem(nu, (slice(None), t)), d_w))
        for t in range(length)
    ]
    q = encoder(steps, mask[:, :length])
    return getitem(q, 0) if single else q


# ============================================================================
# Count regression
# ============================================================================

def predict_count(f: Tensor, q: Tensor, W_q: Tensor, T_c: Tensor, W_f: Tensor, b_r: Tensor) -> Tensor:
    """(f W_q) T_c (q W_f)^T + b_r without ever forming W_r."""
    if f.shape != q.shape:
        raise DimensionError(f"f {f.shape} and q {q.shape} must match")
    product = mul(matmul(matmul(f, W_q), T_c), matmul(q, W_f))
    if f.ndim == 1:
        return add(reduce_sum(product), reshape(b_r, ()))
    return add(reduce_sum(product, axis=1), expand_scalar(b_r, f.shape[0]))


def reconstruct_wr(W_q: np.ndarray, T_c: np.ndarray, W_f: np.ndarray) -> np.ndarray:
    """W_r = W_q T_c W_f^T. Only used to check predict_count."""
    return np.asarray(tucker_to_tensor((np.asarray(T_c), [np.asarray(W_q), np.asarray(W_f)])))


def round_count(score: float) -> int:
    """Round half away from zero, then clamp at zero."""
    value = float(score)
    if not np.isfinite(value):
        raise ContractError("cannot round a non-finite score")
    rounded = np.sign(value) * np.floor(abs(value) + 0.5)
    return max(int(rounded), 0)


def training_loss(score: Tensor, target) -> Tensor:
    """Mean smooth L1 between raw scores and integer targets."""
    target = np.asarray(target, dtype=np.float64)
    if np.any(target < 0):
        raise ContractError("count targets must be non-negative")
    return reduce_mean(smooth_l1(score, target))


class CountPredictor(Module):
    def __init__(self, hidden_dim: int, rank: int, rng: np.random.Generator):
        super().__init__()
        self.W_q = parameter(glorot_uniform(rng, hidden_dim, rank))
        self.T_c = parameter(glorot_uniform(rng, rank, rank))
        self.W_f = parameter(glorot_uniform(rng, hidden_dim, rank))
        self.b_r = parameter(np.zeros(1))

    def forward(self, f: Tensor, q: Tensor) -> Tensor:
        return predict_count(f, q, self.W_q, self.T_c, self.W_f, self.b_r)

    def reconstruct(self) -> np.ndarray:
        return reconstruct_wr(self.W_q.data, self.T_c.data, self.W_f.data)


class LinearRegressionHead(Module):
    """w . (f * q) + b, the regressor without the bilinear interaction."""

    def __init__(self, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.w = parameter(glorot_uniform(rng, hidden_dim, 1, shape=(hidden_dim,)))
        self.b = parameter(np.zeros(1))

    def forward(self, f: Tensor, q: Tensor) -> Tensor:
        if f.shape != q.shape:
            raise DimensionError(f"f {f.shape} and q {q.shape} must match")
        out = matmul(mul(f, q), self.w)
        if f.ndim == 1:
            return add(out, reshape(self.b, ()))
        return add(out, expand_scalar(self.b, f.shape[0]))


class VisualProjection(Module):
    """Two linear layers with batch norm and ReLU in between."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.first = Linear(in_features, out_features, rng)
        self.norm = BatchNorm1d(out_features)
        self.second = Linear(out_features, out_features, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.second(relu(self.norm(self.first(x))))


class CoAttention(Module):
    def __init__(self, embedding_dim: int, rng: np.random.Generator):
        super().__init__()
        self.W_a = parameter(glorot_uniform(rng, embedding_dim, 1, shape=(embedding_dim,)))
        self.b_a = parameter(np.zeros(1))

    def forward(self, object_term: Tensor, Q: Tensor, object_mask: np.ndarray, word_mask: np.ndarray) -> Tensor:
        return pairwise_scores(object_term, Q, self.W_a, self.b_a, object_mask, word_mask)


def bag_of_words(groups: Sequence[Sequence[str]], index: Dict[str, int]) -> np.ndarray:
    """One row per group: the mean one-hot of its in-vocabulary words."""
    bag = np.zeros((len(groups), len(index)))
    for r, words in enumerate(groups):
        hits = [index[w.casefold()] for w in words if w.casefold() in index]
        for h in hits:
            bag[r, h] += 1.0 / len(hits)
    return bag


# ============================================================================
# Full model
# ============================================================================

class CountingModel(Module):
    """
    Semantic dense co-attention encoder plus the count regressor.

    Variants switch off single pieces of the full model; every variant keeps
    the same training and evaluation surface.
    """

    def __init__(self, config: CountingModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        variant = config.variant
        d_v, d_w, d, k = config.visual_dim, config.embedding_dim, config.hidden_dim, config.rank

        self.projection: Optional[VisualProjection] = None
        if variant != CountingVariant.NO_VB:
            in_features = d_v if variant == CountingVariant.NO_B else d_v + BOX_FEATURES
            self.projection = VisualProjection(in_features, d_w, rng)
        self.coattention = CoAttention(d_w, rng)
        self.W_s = parameter(glorot_uniform(rng, d_v, d))
        self.question_encoder = BiLSTM(d_w, d // 2, rng)
        if variant == CountingVariant.LINEAR_REGRESSION:
            self.predictor: Module = LinearRegressionHead(d, rng)
        else:
            self.predictor = CountPredictor(d, k, rng)

        self._vocab_index = {w.casefold(): i for i, w in enumerate(config.vocabulary)}
        if variant == CountingVariant.ONEHOT_SHARED:
            self.onehot_table = parameter(glorot_uniform(rng, len(self._vocab_index), d_w))
        elif variant == CountingVariant.ONEHOT_SEPARATE:
            self.label_table = parameter(glorot_uniform(rng, len(self._vocab_index), d_w))
            self.word_table = parameter(glorot_uniform(rng, len(self._vocab_index), d_w))

    @property
    def variant(self) -> CountingVariant:
        return self.config.variant

    def regression_parameter_count(self) -> int:
        return self.predictor.num_parameters()

    def _linguistic(self, batch: CountingBatch) -> Tuple[Tensor, Tensor]:
        """L as (B, M, d_w) and Q as (B, N, d_w)."""
        if not self.variant.one_hot:
            return constant(batch.L), constant(batch.Q)
        if self.variant == CountingVariant.ONEHOT_SHARED:
            label_table = word_table = self.onehot_table
        else:
            label_table, word_table = self.label_table, self.word_table
        B, M, N = batch.size, batch.O.shape[1], batch.Q.shape[1]
        d_w = self.config.embedding_dim
        label_groups = [
            scene_labels[i].split() if i < len(scene_labels) else []
            for scene_labels in batch.labels
            for i in range(M)
        ]
        word_groups = [
            [tokens[j]] if j < len(tokens) else []
            for tokens in batch.tokens
            for j in range(N)
        ]
        L = matmul(constant(bag_of_words(label_groups, self._vocab_index)), label_table)
        Q = matmul(constant(bag_of_words(word_groups, self._vocab_index)), word_table)
        return reshape(L, (B, M, d_w)), reshape(Q, (B, N, d_w))

    def _object_term(self, batch: CountingBatch, L: Tensor) -> Tensor:
        if self.variant == CountingVariant.NO_VB:
            return L
        B, M = batch.object_mask.shape
        source = batch.V if self.variant == CountingVariant.NO_B else batch.O
        real = np.flatnonzero(batch.object_mask.reshape(-1))
        flat = source.reshape(B * M, source.shape[2])
        projected = scatter_rows(self.projection(constant(flat[real])), real, B * M)
        projected = reshape(projected, (B, M, self.config.embedding_dim))
        return projected if self.variant == CountingVariant.NO_L else mul(projected, L)

    def forward_batch(self, batch: CountingBatch) -> Tuple[Tensor, CoAttentionWeights]:
        """Raw scores (B,) and the batched attention weights."""
        if batch.V.shape[2] != self.config.visual_dim:
            raise DimensionError(f"model expects d_v={self.config.visual_dim}, batch has {batch.V.shape[2]}")
        if batch.L.shape[2] != self.config.embedding_dim:
            raise DimensionError(f"model expects d_w={self.config.embedding_dim}, batch has {batch.L.shape[2]}")
        L, Q = self._linguistic(batch)
        S = self.coattention(self._object_term(batch, L), Q, batch.object_mask, batch.word_mask)
        weights = coattention_weights(
            S,
            batch.word_mask,
            batch.object_mask,
            uniform_words=self.variant == CountingVariant.NO_COATTENTION,
        )
        f = encode_image(constant(batch.V), weights.mu, self.W_s)
        q = encode_question(Q, weights.nu, batch.word_mask, self.question_encoder)
        return self.predictor(f, q), weights

    def forward(self, scene: SceneFeatures, question: QuestionFeatures) -> Tuple[Tensor, CoAttentionWeights]:
        scores, weights = self.forward_batch(collate([(scene, question)]))
        m = scene.m
        return getitem(scores, 0), CoAttentionWeights(
            mu=getitem(weights.mu, (0, slice(0, m))),
            nu=getitem(weights.nu, 0),
            S=getitem(weights.S, (0, slice(0, m))),
        )

    def predict(self, scene: SceneFeatures, question: QuestionFeatures) -> int:
        score, _ = self.forward(scene, question)
        return round_count(score.item())
