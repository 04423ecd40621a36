import numpy as np
import pytest

from core.errors import CheckpointError, ContractError
from harness.ablation import (
    ABLATION_FILE,
    MEAN_PREDICTOR,
    SEMANTIC_GAP_RATIO,
    AblationRow,
    AblationTable,
    ablate,
    check_ablation_directions,
)
from harness.checkpoints import CHECKPOINT_FILE, VOCAB_FILE, load_checkpoint, read_checkpoint
from harness.config import ExperimentConfig, ModelKind
from harness.training import (
    METRICS_FILE,
    batches,
    evaluate,
    evaluate_model,
    load_experiment,
    make_model,
    mean_predictor_rmse,
    rmse,
    train,
)
from harness.world import EMBEDDINGS_FILE, generate_world
from models.counting_model import CountingVariant

from conftest import TINY_WORLD


# ============================================================================
# Helpers
# ============================================================================

def test_batches_merge_a_trailing_single():
    assert batches(list(range(9)), 4) == [[0, 1, 2, 3], [4, 5, 6, 7, 8]]
    assert batches(list(range(8)), 4) == [[0, 1, 2, 3], [4, 5, 6, 7]]
    assert batches([5], 4) == [[5]]


def test_rmse_and_mean_predictor():
    assert rmse([1.0, 3.0], [1.0, 1.0]) == pytest.approx(np.sqrt(2.0))
    with pytest.raises(ContractError):
        rmse([], [])
    with pytest.raises(ContractError):
        rmse([1.0], [1.0, 2.0])
    counts = [0, 2, 2, 4]
    assert mean_predictor_rmse(counts) == pytest.approx(rmse([2.0] * 4, counts))


# ============================================================================
# Training runs
# ============================================================================

def test_zero_learning_rate_keeps_initial_parameters(tmp_path, tiny_config, world_dir, tiny_data):
    config = tiny_config.model_copy(update={"learning_rate": 0.0, "epochs": 1})
    initial, _ = make_model(config, tiny_data)
    result = train(config, world_dir, tmp_path, data=tiny_data)
    for (name, a), (_, b) in zip(initial.named_parameters(), result.model.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_training_is_deterministic(tmp_path, tiny_config, world_dir, tiny_data, trained_runs):
    _, results = trained_runs
    again = train(tiny_config, world_dir, tmp_path, data=tiny_data)
    first = results[ModelKind.COUNTING]
    assert [(r.split, r.loss, r.rmse, r.raw_rmse) for r in again.metrics] == [
        (r.split, r.loss, r.rmse, r.raw_rmse) for r in first.metrics
    ]
    assert again.best_epoch == first.best_epoch


def test_run_directory_layout(trained_runs, tiny_config):
    root, results = trained_runs
    counting = root / "counting"
    for name in (CHECKPOINT_FILE, METRICS_FILE, EMBEDDINGS_FILE):
        assert (counting / name).exists()
    lines = (counting / METRICS_FILE).read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch,split,rmse,loss,seconds,fingerprint"
    assert len(lines) == 1 + 2 * tiny_config.epochs
    assert (root / "caption" / VOCAB_FILE).exists()
    assert results[ModelKind.CAPTION].vocabulary is not None


def test_checkpoint_round_trip_is_exact(trained_runs):
    root, results = trained_runs
    kind, model, meta = load_checkpoint(root / "counting" / CHECKPOINT_FILE)
    assert kind == ModelKind.COUNTING
    assert meta["fingerprint"] == results[kind].fingerprint
    expected = results[kind].model.state_dict()
    loaded = model.state_dict()
    assert set(loaded) == set(expected)
    for key, value in expected.items():
        np.testing.assert_array_equal(loaded[key], value, err_msg=key)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.npz")
    (tmp_path / "garbage.npz").write_bytes(b"not an archive")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "garbage.npz")


def test_evaluate_matches_in_memory_model(trained_runs, world_dir, tiny_config, tiny_data):
    root, results = trained_runs
    result = results[ModelKind.COUNTING]
    from_disk = evaluate(root / "counting", world_dir, "test-seen", tiny_config)
    in_memory = evaluate_model(ModelKind.COUNTING, result.model, tiny_data, "test-seen", result.fingerprint)
    assert from_disk.rmse == in_memory.rmse
    assert from_disk.raw_rmse == in_memory.raw_rmse
    assert 0.0 <= from_disk.accuracy <= 1.0


def test_evaluate_rejects_unknown_split(trained_runs, tiny_data):
    _, results = trained_runs
    result = results[ModelKind.COUNTING]
    with pytest.raises(ContractError):
        evaluate_model(ModelKind.COUNTING, result.model, tiny_data, "holdout", result.fingerprint)


def test_evaluate_rejects_mismatched_dataset(tmp_path, trained_runs):
    root, _ = trained_runs
    other = ExperimentConfig(**{**TINY_WORLD, "embedding_dim": 10, "train_scenes": 4, "val_scenes": 0, "test_scenes": 2})
    generate_world(other, tmp_path)
    with pytest.raises(CheckpointError):
        evaluate(root / "counting", tmp_path, "test-seen", other)


def test_caption_evaluation_reports_accuracy(trained_runs, tiny_data):
    _, results = trained_runs
    result = results[ModelKind.CAPTION]
    record = evaluate_model(
        ModelKind.CAPTION, result.model, tiny_data, "test-seen", result.fingerprint, vocabulary=result.vocabulary
    )
    assert record.rmse is None
    assert 0.0 <= record.accuracy <= 1.0


@pytest.mark.parametrize("kind", [ModelKind.UPDN, ModelKind.MUREL, ModelKind.BAN])
def test_vqa_adapters_train(tmp_path, tiny_config, world_dir, tiny_data, kind):
    config = tiny_config.model_copy(update={"model": kind, "epochs": 1})
    result = train(config, world_dir, tmp_path, data=tiny_data)
    val = [r for r in result.metrics if r.split == "val"]
    assert val and val[0].rmse is not None
    assert np.isfinite(val[0].loss)


# ============================================================================
# Ablation
# ============================================================================

def test_ablation_table_and_csv(tmp_path, tiny_config, world_dir, tiny_data):
    config = tiny_config.model_copy(update={"epochs": 1})
    table = ablate(config, world_dir, tmp_path, [CountingVariant.NO_L], data=tiny_data)
    variants = {row.variant for row in table.rows}
    assert variants == {"full", "no_L", MEAN_PREDICTOR}
    assert (tmp_path / ABLATION_FILE).read_text(encoding="utf-8").startswith("variant,split,rmse,raw_rmse\n")
    assert (tmp_path / "no_L" / CHECKPOINT_FILE).exists()
    assert "test-synonym" in table.render()


def _table(values):
    return AblationTable(
        fingerprint="x",
        rows=[AblationRow(variant=v, split=s, rmse=r) for (v, s), r in values.items()],
    )


def test_ablation_direction_checks():
    good = _table({
        ("full", "test-synonym"): 1.0,
        ("no_L", "test-synonym"): 1.5,
        ("onehot_shared", "test-synonym"): 1.2,
        ("onehot_separate", "test-synonym"): 1.3,
        ("full", "test-seen"): 0.4,
        ("linear_regression", "test-seen"): 0.6,
        ("no_coattention", "test-seen"): 0.7,
    })
    assert check_ablation_directions(good) == []

    weak_gap = _table({("full", "test-synonym"): 1.0, ("no_L", "test-synonym"): 1.1})
    [failure] = check_ablation_directions(weak_gap)
    assert "no_L" in failure

    assert check_ablation_directions(_table({("full", "test-seen"): 0.4})) == []


def test_semantic_gap_check_uses_the_ratio():
    wide = _table({("full", "test-synonym"): 1.0, ("no_L", "test-synonym"): 1.3})
    assert check_ablation_directions(wide) == []

    narrow = _table({("full", "test-synonym"): 0.9, ("no_L", "test-synonym"): 1.0})
    [failure] = check_ablation_directions(narrow)
    assert failure.startswith("test-synonym:")
    assert f"{SEMANTIC_GAP_RATIO:g} x no_L" in failure


# ============================================================================
# Full-budget experiments
# ============================================================================

@pytest.mark.slow
def test_toy_counting_beats_mean_predictor(tmp_path):
    config = ExperimentConfig(seed=7, hidden_dim=64, rank=8, epochs=30)
    generate_world(config, tmp_path / "world")
    data = load_experiment(tmp_path / "world", config)
    result = train(config, tmp_path / "world", tmp_path / "run", data=data)
    record = evaluate_model(ModelKind.COUNTING, result.model, data, "test-seen", result.fingerprint)
    assert record.rmse < 0.5
    assert record.rmse < mean_predictor_rmse(data.answers(data.split("test-seen")))


@pytest.mark.slow
def test_ablation_directions_hold(tmp_path):
    config = ExperimentConfig(seed=7, hidden_dim=64, rank=8, epochs=30)
    generate_world(config, tmp_path / "world")
    table = ablate(config, tmp_path / "world", tmp_path / "ablation", list(CountingVariant))
    assert check_ablation_directions(table) == []


@pytest.mark.slow
def test_semantic_gap_on_synonym_questions(tmp_path):
    config = ExperimentConfig(seed=7, hidden_dim=64, rank=8, epochs=30)
    generate_world(config, tmp_path / "world")
    table = ablate(config, tmp_path / "world", tmp_path / "gap", [CountingVariant.NO_L])
    full, no_l = table.rmse("full", "test-synonym"), table.rmse("no_L", "test-synonym")
    assert full < SEMANTIC_GAP_RATIO * no_l
