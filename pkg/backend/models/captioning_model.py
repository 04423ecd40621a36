"""
Captioning with a visual and a linguistic attention stream.

Per step t:

    h_v = V-LSTM([h_o(t-1), mean(V), q_t])        h_l = L-LSTM([h_o(t-1), mean(L), q_t])
    alpha = softmax(tanh(V W^v + h_v W_h^v) w_a^v)  beta = softmax(tanh(L W^l + h_l W_h^l) w_a^l)
    o_v = alpha^T V                                 o_l = beta^T L
    h_o = O-LSTM([o_v, o_l, h_v, h_l])              y = softmax(h_o W_y + b_y)

q_t is the fixed word vector of the current input token (zero for special
tokens). The O-LSTM input weights for the linguistic slots [o_l, h_l] are held
in `linguistic_input` so the model without the linguistic stream is exactly
the same computation minus those terms.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from core.errors import ContractError, DimensionError, ParseError
from core.losses import cross_entropy_with_logits
from core.nn import Linear, Module, glorot_uniform
from core.recurrent import LSTMCell, LSTMState
from core.tensor import (
    Tensor,
    add,
    concat,
    constant,
    expand_rows,
    matmul,
    parameter,
    reduce_mean,
    softmax_masked,
    stack,
    tanh,
)
from features.embeddings import EmbeddingTable
from features.scene import SceneFeatures

logger = logging.getLogger(__name__)

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
SPECIAL_TOKENS = (PAD, START, END, UNK)
START_ID = SPECIAL_TOKENS.index(START)
END_ID = SPECIAL_TOKENS.index(END)


class CaptionVocabulary:
    """Token list with the four special tokens first; index = position."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ContractError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def start_id(self) -> int:
        return self.index[START]

    @property
    def end_id(self) -> int:
        return self.index[END]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        ids = []
        for token in tokens:
            if token not in self.index:
                logger.warning("caption word '%s' is not in the vocabulary", token)
            ids.append(self.index.get(token, self.index[UNK]))
        return ids

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CaptionVocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        for n, line in enumerate(lines, start=1):
            if not line or " " in line:
                raise ParseError("vocabulary lines hold exactly one token", line=n)
        return cls(lines)


def build_caption_vocabulary(captions: Iterable[Sequence[str]]) -> CaptionVocabulary:
    """Every word seen at least once, in first-seen order, after the specials."""
    seen = list(SPECIAL_TOKENS)
    known = set(seen)
    for caption in captions:
        for token in caption:
            if token not in known:
                known.add(token)
                seen.append(token)
    return CaptionVocabulary(seen)


def caption_word_vectors(vocabulary: CaptionVocabulary, table: EmbeddingTable) -> np.ndarray:
    vectors = np.zeros((len(vocabulary), table.dim))
    for i, token in enumerate(vocabulary.tokens):
        if token not in SPECIAL_TOKENS:
            vectors[i] = table.embed_label(token)
    return vectors


class CaptionModelConfig(BaseModel):
    visual_dim: int = Field(..., ge=1, description="d_v")
    embedding_dim: int = Field(..., ge=1, description="d_w")
    hidden_dim: int = Field(64, ge=1, description="d_e, hidden size of the V-LSTM and L-LSTM")
    output_hidden_dim: Optional[int] = Field(None, ge=1, description="O-LSTM hidden size; defaults to hidden_dim")
    attention_dim: int = Field(64, ge=1, description="d, attention projection size")
    vocab_size: int = Field(..., ge=len(SPECIAL_TOKENS), description="d_o")
    use_lat: bool = True
    seed: int = 7

    @property
    def o_hidden_dim(self) -> int:
        return self.output_hidden_dim if self.output_hidden_dim is not None else self.hidden_dim


@dataclass
class CaptionState:
    v: LSTMState
    l: Optional[LSTMState]
    o: LSTMState


@dataclass
class StepOutput:
    logits: Tensor
    alpha: Tensor
    beta: Optional[Tensor]
    state: CaptionState

    @property
    def y(self) -> Tensor:
        return softmax_masked(self.logits)


class AttentionHead(Module):
    """softmax(tanh(X W + 1 h^T W_h) w_a) over the rows of X."""

    def __init__(self, feature_dim: int, hidden_dim: int, attention_dim: int, rng: np.random.Generator):
        super().__init__()
        self.W = parameter(glorot_uniform(rng, feature_dim, attention_dim))
        self.W_h = parameter(glorot_uniform(rng, hidden_dim, attention_dim))
        self.w_a = parameter(glorot_uniform(rng, attention_dim, 1, shape=(attention_dim,)))

    def forward(self, X: Tensor, h: Tensor) -> Tensor:
        m = X.shape[0]
        hidden = expand_rows(matmul(h, self.W_h), m)
        return softmax_masked(matmul(tanh(add(matmul(X, self.W), hidden)), self.w_a))


class CaptionModel(Module):
    buffer_names = ("word_vectors",)

    def __init__(self, config: CaptionModelConfig, word_vectors: Optional[np.ndarray] = None):
        super().__init__()
        self.config = config
        d_v, d_w, d_e, d = config.visual_dim, config.embedding_dim, config.hidden_dim, config.attention_dim
        d_h = config.o_hidden_dim
        if word_vectors is None:
            word_vectors = np.zeros((config.vocab_size, d_w))
        if word_vectors.shape != (config.vocab_size, d_w):
            raise DimensionError(f"word vectors {word_vectors.shape} do not fit ({config.vocab_size}, {d_w})")
        self.word_vectors = np.array(word_vectors, dtype=np.float64)

        rng = np.random.default_rng(config.seed)
        self.v_lstm = LSTMCell(d_h + d_v + d_w, d_e, rng)
        self.v_attention = AttentionHead(d_v, d_e, d, rng)
        self.o_lstm = LSTMCell(d_v + d_e, d_h, rng)
        self.output = Linear(d_h, config.vocab_size, rng)

        self.l_lstm: Optional[LSTMCell] = None
        self.l_attention: Optional[AttentionHead] = None
        if config.use_lat:
            lat_rng = np.random.default_rng([config.seed, 1])
            self.l_lstm = LSTMCell(d_h + d_w + d_w, d_e, lat_rng)
            self.l_attention = AttentionHead(d_w, d_e, d, lat_rng)
            self.linguistic_input = parameter(glorot_uniform(lat_rng, d_w + d_e, 4 * d_h))

    @property
    def use_lat(self) -> bool:
        return self.l_lstm is not None

    def lat_parameters(self) -> List[Tensor]:
        if not self.use_lat:
            return []
        return self.l_lstm.parameters() + self.l_attention.parameters() + [self.linguistic_input]

    def initial_state(self) -> CaptionState:
        return CaptionState(
            v=self.v_lstm.initial_state(),
            l=self.l_lstm.initial_state() if self.use_lat else None,
            o=self.o_lstm.initial_state(),
        )

    # -- the three layers --------------------------------------------------

    def input_layer_step(
        self, h_o_prev: Tensor, V_mean: Tensor, L_mean: Tensor, q_t: Tensor, state: CaptionState
    ) -> Tuple[Tensor, Optional[Tensor], CaptionState]:
        v_state = self.v_lstm(concat([h_o_prev, V_mean, q_t]), state.v)
        l_state = None
        if self.use_lat:
            l_state = self.l_lstm(concat([h_o_prev, L_mean, q_t]), state.l)
        new_state = CaptionState(v=v_state, l=l_state, o=state.o)
        return v_state.h, (l_state.h if l_state is not None else None), new_state

    def dual_attention(
        self, V: Tensor, L: Tensor, h_v: Tensor, h_l: Optional[Tensor]
    ) -> Tuple[Tensor, Optional[Tensor]]:
        alpha = self.v_attention(V, h_v)
        beta = self.l_attention(L, h_l) if self.use_lat else None
        return alpha, beta

    def output_layer_step(
        self,
        o_v: Tensor,
        o_l: Optional[Tensor],
        h_v: Tensor,
        h_l: Optional[Tensor],
        state: CaptionState,
    ) -> Tuple[Tensor, CaptionState]:
        """Logits over the vocabulary (y = softmax of these) and the new state."""
        offset = None
        if self.use_lat:
            offset = matmul(concat([o_l, h_l]), self.linguistic_input)
        o_state = self.o_lstm(concat([o_v, h_v]), state.o, input_offset=offset)
        logits = self.output(o_state.h)
        return logits, CaptionState(v=state.v, l=state.l, o=o_state)

    # -- unrolling -----------------------------------------------------------

    def step(self, scene: SceneFeatures, token_id: int, state: CaptionState) -> StepOutput:
        V, L = constant(scene.V), constant(scene.L)
        V_mean, L_mean = constant(scene.V.mean(axis=0)), constant(scene.L.mean(axis=0))
        q_t = constant(self.word_vectors[token_id])
        h_v, h_l, state = self.input_layer_step(state.o.h, V_mean, L_mean, q_t, state)
        alpha, beta = self.dual_attention(V, L, h_v, h_l)
        o_v, o_l = attend_encode(V, alpha, L, beta)
        logits, state = self.output_layer_step(o_v, o_l, h_v, h_l, state)
        return StepOutput(logits=logits, alpha=alpha, beta=beta, state=state)

    def forward(self, scene: SceneFeatures, caption_ids: Sequence[int]) -> Tensor:
        return caption_loss(self, scene, caption_ids)


def attend_encode(
    V: Tensor, alpha: Tensor, L: Tensor, beta: Optional[Tensor]
) -> Tuple[Tensor, Optional[Tensor]]:
    """o_v = sum_i alpha_i v_i, o_l = sum_i beta_i l_i."""
    if alpha.shape != (V.shape[0],):
        raise DimensionError(f"alpha {alpha.shape} does not fit {V.shape[0]} objects")
    o_v = matmul(alpha, V)
    o_l = matmul(beta, L) if beta is not None else None
    return o_v, o_l


def caption_loss(model: CaptionModel, scene: SceneFeatures, caption_ids: Sequence[int]) -> Tensor:
    """Teacher-forced mean of -log y_t[next token] over the caption."""
    ids = list(caption_ids)
    if len(ids) < 2 or ids[0] != START_ID or ids[-1] != END_ID:
        raise ContractError("reference caption must start with <start> and end with <end>")
    state = model.initial_state()
    losses = []
    for current, target in zip(ids[:-1], ids[1:]):
        out = model.step(scene, current, state)
        state = out.state
        losses.append(cross_entropy_with_logits(out.logits, target))
    return reduce_mean(stack(losses))


def generate_caption(model: CaptionModel, scene: SceneFeatures, max_len: int) -> List[int]:
    """Greedy decode from <start>; stops at <end> (not emitted) or after max_len tokens."""
    if max_len < 0:
        raise ContractError("max_len must be non-negative")
    state = model.initial_state()
    token = START_ID
    emitted: List[int] = []
    while len(emitted) < max_len:
        out = model.step(scene, token, state)
        state = out.state
        token = int(np.argmax(out.logits.data))
        if token == END_ID:
            break
        emitted.append(token)
    return emitted

