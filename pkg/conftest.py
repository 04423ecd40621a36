import pytest

from harness.config import ExperimentConfig, ModelKind
from harness.training import load_experiment, train
from harness.world import generate_world

TINY_WORLD = dict(
    seed=3,
    num_classes=4,
    embedding_dim=8,
    visual_dim=6,
    train_scenes=40,
    val_scenes=10,
    test_scenes=10,
    max_count=3,
    distractors_max=3,
    hidden_dim=8,
    rank=3,
    joint_dim=4,
    caption_hidden_dim=8,
    attention_dim=4,
    max_caption_len=8,
    epochs=2,
    batch_size=8,
)


@pytest.fixture(scope="session")
def tiny_config():
    return ExperimentConfig(**TINY_WORLD)


@pytest.fixture(scope="session")
def world_dir(tmp_path_factory, tiny_config):
    path = tmp_path_factory.mktemp("world")
    generate_world(tiny_config, path)
    return path


@pytest.fixture(scope="session")
def tiny_data(world_dir, tiny_config):
    return load_experiment(world_dir, tiny_config)


@pytest.fixture(scope="session")
def trained_runs(tmp_path_factory, tiny_config, world_dir, tiny_data):
    """A model directory holding one counting run and one caption run."""
    root = tmp_path_factory.mktemp("runs")
    results = {}
    for kind in (ModelKind.COUNTING, ModelKind.CAPTION):
        config = tiny_config.model_copy(update={"model": kind})
        results[kind] = train(config, world_dir, root / kind.value, data=tiny_data)
    return root, results
