import numpy as np
import pytest
from pydantic import ValidationError

from core.errors import ContractError
from core.tensor import constant
from features.embeddings import QuestionFeatures
from harness.gradcheck_suite import DEFAULT_TOLERANCE, run_suite, toy_question, toy_scene
from models.vqa_adapters import (
    AdapterKind,
    BanLatModel,
    MurelLatModel,
    MurelPooling,
    UpDnLatModel,
    VqaModelConfig,
    bilinear_coattention,
    build_adapter,
    murel_lat_pool,
)

D_V, D_W = 4, 5


def _config(kind, **overrides):
    values = dict(kind=kind, visual_dim=D_V, embedding_dim=D_W, hidden_dim=6, joint_dim=4, num_answers=3, seed=11)
    values.update(overrides)
    return VqaModelConfig(**values)


def _sample(seed=0, m=4, n=3, max_len=5):
    rng = np.random.default_rng(seed)
    return toy_scene(rng, m, D_V, D_W), toy_question(rng, n, D_W, max_len)


@pytest.mark.parametrize("kind", list(AdapterKind), ids=[k.value for k in AdapterKind])
def test_zeroed_linguistic_branch_reproduces_baseline(kind):
    lat = build_adapter(_config(kind))
    baseline = build_adapter(_config(kind, use_lat=False))
    assert lat.lat_parameters() and not baseline.lat_parameters()
    for p in lat.lat_parameters():
        p.data = np.zeros_like(p.data)
    for seed in range(5):
        scene, question = _sample(seed)
        np.testing.assert_array_equal(lat(scene, question).numpy(), baseline(scene, question).numpy())


@pytest.mark.parametrize("kind", list(AdapterKind), ids=[k.value for k in AdapterKind])
def test_linguistic_branch_changes_the_logits(kind):
    model = build_adapter(_config(kind))
    baseline = build_adapter(_config(kind, use_lat=False))
    rng = np.random.default_rng(1)
    for p in model.lat_parameters():
        p.data = rng.standard_normal(p.shape)
    scene, question = _sample()
    assert not np.array_equal(model(scene, question).numpy(), baseline(scene, question).numpy())


def test_updn_gamma_is_a_distribution_over_objects():
    model = UpDnLatModel(_config(AdapterKind.UPDN))
    rng = np.random.default_rng(2)
    for p in model.lat_parameters():
        p.data = rng.standard_normal(p.shape)
    for _ in range(50):
        m, n = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        gamma, q = model.attend(toy_scene(rng, m, D_V, D_W), toy_question(rng, n, D_W, 6))
        g = gamma.numpy()
        assert g.shape == (m,) and np.all(g >= 0)
        assert abs(g.sum() - 1.0) < 1e-9
        assert q.shape == (6,)


def test_updn_attention_ignores_padding_rows():
    model = UpDnLatModel(_config(AdapterKind.UPDN))
    rng = np.random.default_rng(3)
    for p in model.lat_parameters():
        p.data = rng.standard_normal(p.shape)
    scene, question = _sample(max_len=5)
    padded = QuestionFeatures(
        Q=np.vstack([question.Q, np.zeros((4, D_W))]),
        mask=np.concatenate([question.mask, np.zeros(4, dtype=bool)]),
        tokens=question.tokens,
    )
    np.testing.assert_array_equal(model(scene, question).numpy(), model(scene, padded).numpy())


def test_murel_pooling_variants():
    attention = MurelLatModel(_config(AdapterKind.MUREL))
    scene, question = _sample()
    gamma = attention.attend(scene, question)
    assert abs(gamma.numpy().sum() - 1.0) < 1e-9

    max_pool = MurelLatModel(_config(AdapterKind.MUREL, pooling=MurelPooling.MAX))
    assert max_pool.attend(scene, question) is None
    assert max_pool.lat_parameters() == []
    assert max_pool(scene, question).shape == (3,)


def test_murel_pool_is_weighted_sum():
    fused = np.array([[1.0, 2.0], [3.0, 4.0]])
    pooled = murel_lat_pool(constant(fused), constant([0.25, 0.75])).numpy()
    np.testing.assert_allclose(pooled, [2.5, 3.5])


def test_bilinear_attention_map_sums_to_one():
    rng = np.random.default_rng(4)
    for _ in range(50):
        rows_x, rows_y = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        out = bilinear_coattention(
            constant(rng.standard_normal((rows_x, 3))),
            constant(rng.standard_normal((rows_y, 2))),
            constant(rng.standard_normal((3, 4))),
            constant(rng.standard_normal((2, 4))),
            constant(rng.standard_normal(4)),
        )
        A = out.A.numpy()
        assert A.shape == (rows_x, rows_y) and np.all(A >= 0)
        assert abs(A.sum() - 1.0) < 1e-9
        assert out.joint.shape == (4,)


def test_ban_glimpses():
    model = BanLatModel(_config(AdapterKind.BAN))
    scene, question = _sample(n=3, m=4)
    visual, linguistic = model.glimpses(scene, question)
    assert visual.A.shape == (3, 4)
    assert linguistic.A.shape == (3, 4)
    _, none = BanLatModel(_config(AdapterKind.BAN, use_lat=False)).glimpses(scene, question)
    assert none is None


def test_loss_and_prediction_surface():
    model = build_adapter(_config(AdapterKind.UPDN))
    scene, question = _sample()
    loss = model.loss(scene, question, 2)
    assert loss.item() > 0
    scores = model.answer_scores(scene, question)
    assert scores.shape == (3,) and np.all((scores > 0) & (scores < 1))
    assert model.predict(scene, question) == int(np.argmax(scores))
    with pytest.raises(ContractError):
        model.loss(scene, question, 3)


def test_all_masked_question_is_rejected():
    model = build_adapter(_config(AdapterKind.BAN))
    scene, question = _sample()
    empty = QuestionFeatures(Q=question.Q, mask=np.zeros_like(question.mask), tokens=())
    with pytest.raises(ContractError):
        model(scene, empty)


def test_answer_vocabulary_needs_two_entries():
    with pytest.raises(ValidationError):
        _config(AdapterKind.UPDN, num_answers=1)


@pytest.mark.parametrize("name", ["updn_lat", "murel_lat", "murel_max", "ban_lat"])
def test_adapter_gradients(name):
    [result] = run_suite(seed=9, names=[name])
    assert result.error < DEFAULT_TOLERANCE
