import numpy as np
import pytest

from core.errors import ContractError, ParseError
from core.optim import Adam
from features.embeddings import EmbeddingTable
from harness.gradcheck_suite import DEFAULT_TOLERANCE, run_suite, toy_scene
from models.captioning_model import (
    END_ID,
    SPECIAL_TOKENS,
    START_ID,
    UNK,
    CaptionModel,
    CaptionModelConfig,
    CaptionVocabulary,
    build_caption_vocabulary,
    caption_loss,
    caption_word_vectors,
    generate_caption,
)

D_V, D_W = 4, 5


def _model(use_lat=True, vocab_size=8, hidden_dim=8, seed=3, output_hidden_dim=None):
    rng = np.random.default_rng(seed)
    config = CaptionModelConfig(
        visual_dim=D_V,
        embedding_dim=D_W,
        hidden_dim=hidden_dim,
        output_hidden_dim=output_hidden_dim,
        attention_dim=4,
        vocab_size=vocab_size,
        use_lat=use_lat,
        seed=seed,
    )
    return CaptionModel(config, word_vectors=rng.standard_normal((vocab_size, D_W)))


# ============================================================================
# Vocabulary
# ============================================================================

def test_vocabulary_keeps_first_seen_order():
    vocab = build_caption_vocabulary([["a", "red", "car"], ["a", "bus"]])
    assert vocab.tokens == list(SPECIAL_TOKENS) + ["a", "red", "car", "bus"]
    assert vocab.start_id == START_ID and vocab.end_id == END_ID
    assert vocab.encode(["red", "tram"]) == [5, vocab.index[UNK]]
    assert vocab.decode([6, 7]) == ["car", "bus"]


def test_vocabulary_save_and_load(tmp_path):
    vocab = build_caption_vocabulary([["two", "cars"]])
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert CaptionVocabulary.load(path).tokens == vocab.tokens


def test_vocabulary_load_rejects_bad_lines(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("<pad>\n<start>\n<end>\n<unk>\ntwo words\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        CaptionVocabulary.load(path)
    assert info.value.line == 5
    with pytest.raises(ContractError):
        CaptionVocabulary(["car", "<pad>", "<start>", "<end>", "<unk>"])


def test_word_vectors_leave_special_tokens_zero():
    table = EmbeddingTable(2, {"car": np.array([1.0, 2.0])})
    vectors = caption_word_vectors(build_caption_vocabulary([["car"]]), table)
    np.testing.assert_array_equal(vectors[: len(SPECIAL_TOKENS)], 0.0)
    np.testing.assert_array_equal(vectors[-1], [1.0, 2.0])


# ============================================================================
# Model
# ============================================================================

def test_attention_weights_are_distributions():
    model = _model()
    rng = np.random.default_rng(0)
    for _ in range(50):
        scene = toy_scene(rng, int(rng.integers(1, 6)), D_V, D_W)
        state = model.initial_state()
        for token in (START_ID, 5):
            out = model.step(scene, token, state)
            state = out.state
            for weights in (out.alpha.numpy(), out.beta.numpy(), out.y.numpy()):
                assert np.all(weights >= 0)
                assert abs(weights.sum() - 1.0) < 1e-9
            assert out.alpha.shape == (scene.m,)


def test_zeroed_linguistic_stream_reproduces_baseline():
    lat, baseline = _model(use_lat=True), _model(use_lat=False)
    assert baseline.lat_parameters() == []
    for p in lat.lat_parameters():
        p.data = np.zeros_like(p.data)
    scene = toy_scene(np.random.default_rng(1), 3, D_V, D_W)
    lat_state, base_state = lat.initial_state(), baseline.initial_state()
    for token in (START_ID, 4, 6):
        a = lat.step(scene, token, lat_state)
        b = baseline.step(scene, token, base_state)
        np.testing.assert_array_equal(a.logits.numpy(), b.logits.numpy())
        np.testing.assert_array_equal(a.alpha.numpy(), b.alpha.numpy())
        assert b.beta is None
        lat_state, base_state = a.state, b.state


def test_output_lstm_size_is_separate_from_input_lstms():
    assert _model().o_lstm.hidden_size == 8
    lat, baseline = _model(output_hidden_dim=6), _model(use_lat=False, output_hidden_dim=6)
    assert lat.o_lstm.hidden_size == 6 and lat.v_lstm.hidden_size == 8
    assert lat.output.weight.shape == (6, 8)
    for p in lat.lat_parameters():
        p.data = np.zeros_like(p.data)
    scene = toy_scene(np.random.default_rng(5), 2, D_V, D_W)
    a = lat.step(scene, START_ID, lat.initial_state())
    b = baseline.step(scene, START_ID, baseline.initial_state())
    assert a.state.o.h.shape == (6,)
    np.testing.assert_array_equal(a.logits.numpy(), b.logits.numpy())
    with pytest.raises(ValueError):
        CaptionModelConfig(visual_dim=D_V, embedding_dim=D_W, vocab_size=8, output_hidden_dim=0)


def test_caption_loss_needs_delimiters():
    model = _model()
    scene = toy_scene(np.random.default_rng(2), 2, D_V, D_W)
    assert caption_loss(model, scene, [START_ID, 4, END_ID]).item() > 0
    with pytest.raises(ContractError):
        caption_loss(model, scene, [4, 5, END_ID])
    with pytest.raises(ContractError):
        caption_loss(model, scene, [START_ID, 4])


def test_generate_respects_max_len():
    model = _model()
    scene = toy_scene(np.random.default_rng(3), 2, D_V, D_W)
    assert generate_caption(model, scene, 0) == []
    ids = generate_caption(model, scene, 5)
    assert len(ids) <= 5 and END_ID not in ids
    with pytest.raises(ContractError):
        generate_caption(model, scene, -1)


def test_single_caption_overfit_and_greedy_decode():
    model = _model(hidden_dim=16, seed=5)
    scene = toy_scene(np.random.default_rng(4), 3, D_V, D_W)
    caption = [START_ID, 4, 5, 6, END_ID]
    optimizer = Adam(model.parameters(), learning_rate=0.01)
    for _ in range(500):
        loss = caption_loss(model, scene, caption)
        loss.backward()
        optimizer.step()
        optimizer.zero_grad()
    assert caption_loss(model, scene, caption).item() < 0.1
    assert generate_caption(model, scene, 10) == [4, 5, 6]


def test_caption_model_gradient():
    [result] = run_suite(seed=2, names=["caption_model"])
    assert result.error < DEFAULT_TOLERANCE
