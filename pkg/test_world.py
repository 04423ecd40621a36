import json
import shutil

import numpy as np
import pytest

from core.errors import GenerationError, ParseError
from harness.config import ExperimentConfig
from harness.world import (
    DATASET_FILE,
    EMBEDDINGS_FILE,
    WORLD_FILE,
    ObjectRecord,
    SampleRecord,
    build_taxonomy,
    count_oracle,
    generate_world,
    load_dataset,
    load_table,
    load_world_info,
    quantize_confidence,
    query_noun,
    reference_caption,
    split_hygiene_violations,
)

from conftest import TINY_WORLD


def _object(label, confidence=1.0):
    return ObjectRecord(label=label, box=[0.0, 0.0, 10.0, 10.0], confidence=confidence, visual=[0.0])


@pytest.fixture
def taxonomy(tiny_config):
    return build_taxonomy(tiny_config)


# ============================================================================
# Oracle
# ============================================================================

def test_count_oracle_resolves_synonyms(taxonomy):
    objects = [_object("car"), _object("red car"), _object("dog"), _object("car", confidence=0.2)]
    assert count_oracle(objects, "car", taxonomy) == 3
    assert count_oracle(objects, "sedan", taxonomy) == 3
    assert count_oracle(objects, "sedan", taxonomy, min_confidence=0.5) == 2
    assert count_oracle(objects, "puppy", taxonomy) == 1
    assert count_oracle(objects, "cat", taxonomy) == 0
    assert count_oracle(objects, "zebra", taxonomy) == 0


def test_query_noun_and_reference_caption(taxonomy):
    assert query_noun(["how", "many", "kittens", "cat"], taxonomy) == "cat"
    assert query_noun(["how", "many", "zebras"], taxonomy) is None
    record = SampleRecord(
        scene_id=0,
        objects=[_object("dog"), _object("car"), _object("dog"), _object("cat", confidence=0.1)],
        question=["how", "many", "dog", "are", "there"],
        answer=2,
        split="train",
    )
    assert reference_caption(record, min_confidence=0.5) == ["<start>", "car", "and", "dog", "<end>"]


# ============================================================================
# Generation
# ============================================================================

def test_generation_is_byte_identical(tmp_path, tiny_config, world_dir):
    generate_world(tiny_config, tmp_path)
    for name in (DATASET_FILE, EMBEDDINGS_FILE, WORLD_FILE):
        assert (tmp_path / name).read_bytes() == (world_dir / name).read_bytes(), name


def test_other_seed_gives_other_world(tmp_path, tiny_config, world_dir):
    generate_world(tiny_config.model_copy(update={"seed": 4}), tmp_path)
    assert (tmp_path / DATASET_FILE).read_bytes() != (world_dir / DATASET_FILE).read_bytes()


def test_splits_and_answers(world_dir, tiny_config):
    info = load_world_info(world_dir)
    records = load_dataset(world_dir, info)
    sizes = {split: sum(r.split == split for r in records) for split in ("train", "val", "test-seen", "test-synonym")}
    assert sizes == {"train": 40, "val": 10, "test-seen": 10, "test-synonym": 10}
    for record in records:
        assert 0 <= record.answer <= tiny_config.max_count
        assert any(o.confidence >= info.confidence_threshold for o in record.objects)


def test_synonym_split_never_reuses_training_nouns(world_dir):
    info = load_world_info(world_dir)
    records = load_dataset(world_dir, info)
    assert split_hygiene_violations(records, info.taxonomy) == []
    bases = set(info.taxonomy.bases)
    for record in records:
        noun = query_noun(record.question, info.taxonomy)
        if record.split == "test-synonym":
            assert noun not in bases
        else:
            assert noun in bases


def test_word_vector_geometry(world_dir, tiny_config):
    info = load_world_info(world_dir)
    table = load_table(world_dir, info)

    def cos(a, b):
        u, v = table.lookup(a)[0], table.lookup(b)[0]
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

    for base, synonyms in info.taxonomy.classes.items():
        for synonym in synonyms:
            assert cos(base, synonym) >= tiny_config.synonym_cosine_min
    assert abs(cos("car", "dog")) <= tiny_config.cross_cosine_max
    assert abs(cos("sedan", "puppy")) <= tiny_config.cross_cosine_max


def test_generation_rejects_impossible_requests(tmp_path):
    with pytest.raises(GenerationError):
        generate_world(ExperimentConfig(**{**TINY_WORLD, "train_scenes": 0}), tmp_path)
    with pytest.raises(GenerationError):
        generate_world(
            ExperimentConfig(**{**TINY_WORLD, "train_scenes": 0, "val_scenes": 0, "test_scenes": 0}), tmp_path
        )
    with pytest.raises(GenerationError):
        generate_world(ExperimentConfig(**{**TINY_WORLD, "num_classes": 15}), tmp_path)
    with pytest.raises(GenerationError):
        generate_world(ExperimentConfig(**{**TINY_WORLD, "embedding_dim": 4}), tmp_path)


def test_spurious_objects_do_not_count(tmp_path):
    config = ExperimentConfig(**{**TINY_WORLD, "spurious_objects_max": 3, "adjective_labels": True})
    info = generate_world(config, tmp_path)
    records = load_dataset(tmp_path, info)
    assert any(o.confidence < info.confidence_threshold for r in records for o in r.objects)
    assert all(len(o.label.split()) == 2 for r in records for o in r.objects)
    assert all(r.answer <= config.max_count for r in records)


def test_rounded_confidences_stay_on_their_side_of_the_threshold():
    assert quantize_confidence(0.69999, 0.7, kept=False) < 0.7
    assert quantize_confidence(0.69996, 0.7, kept=False) == pytest.approx(0.6999)
    assert quantize_confidence(0.0, 0.7, kept=False) == 0.0
    assert quantize_confidence(0.12341, 0.12345, kept=True) >= 0.12345
    assert quantize_confidence(0.99996, 0.7, kept=True) == 1.0
    assert quantize_confidence(0.83337, 0.7, kept=True) == pytest.approx(0.8334)


# ============================================================================
# Loading
# ============================================================================

def test_tampered_answer_is_rejected(tmp_path, world_dir):
    shutil.copytree(world_dir, tmp_path / "world")
    path = tmp_path / "world" / DATASET_FILE
    lines = path.read_text(encoding="utf-8").splitlines()
    record = json.loads(lines[2])
    record["answer"] += 1
    lines[2] = json.dumps(record)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_dataset(tmp_path / "world", load_world_info(world_dir))
    assert info.value.line == 3


def test_malformed_record_reports_line(tmp_path, world_dir):
    shutil.copytree(world_dir, tmp_path / "world")
    path = tmp_path / "world" / DATASET_FILE
    with open(path, "a", encoding="utf-8") as handle:
        handle.write("{not json\n")
    with pytest.raises(ParseError) as info:
        load_dataset(tmp_path / "world", load_world_info(world_dir))
    assert info.value.line == 71


def test_missing_world_file(tmp_path):
    with pytest.raises(ParseError):
        load_world_info(tmp_path)
