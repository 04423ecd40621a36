"""
Synthetic counting world.

Objects always carry their base class label (what a detector would say); the
questions of the test-synonym split name the class only through a synonym.
Everything is derived from the config seed: word vectors and prototypes from
`default_rng([seed, 0])`, scene i from `default_rng([seed, 1, i])`.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from core.errors import GenerationError, ParseError
from features.embeddings import EmbeddingTable, QuestionFeatures, embed_question, load_embeddings, save_embeddings
from features.scene import DetectedObject, SceneFeatures, build_scene_features
from harness.config import ExperimentConfig, config_fingerprint
from models.captioning_model import END, START

logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.jsonl"
EMBEDDINGS_FILE = "embeddings.txt"
WORLD_FILE = "world.json"

SPLITS = ("train", "val", "test-seen", "test-synonym")

BASE_CLASSES: Dict[str, Tuple[str, ...]] = {
    "car": ("sedan", "automobile"),
    "dog": ("puppy", "hound"),
    "cat": ("kitten", "feline"),
    "person": ("pedestrian", "human"),
    "bus": ("coach", "omnibus"),
    "bicycle": ("bike", "cycle"),
    "bird": ("sparrow", "fowl"),
    "horse": ("pony", "stallion"),
    "cup": ("mug", "teacup"),
    "bottle": ("flask", "jar"),
    "chair": ("seat", "stool"),
    "boat": ("ship", "vessel"),
    "truck": ("lorry", "pickup"),
    "sheep": ("lamb", "ewe"),
}

QUESTION_TEMPLATES: Tuple[Tuple[str, ...], ...] = (
    ("how", "many", "{noun}", "are", "in", "the", "picture"),
    ("how", "many", "{noun}", "are", "there"),
    ("how", "many", "{noun}", "can", "you", "see"),
    ("count", "the", "{noun}", "in", "the", "image"),
)

ADJECTIVES = ("red", "blue", "green", "small", "large")
CONNECTIVES = ("and",)


class Taxonomy(BaseModel):
    classes: Dict[str, List[str]]

    def resolve(self, word: str) -> Optional[str]:
        """Base class named by a word (base or synonym), or None."""
        key = word.casefold()
        for base, synonyms in self.classes.items():
            if key == base or key in synonyms:
                return base
        return None

    @property
    def bases(self) -> List[str]:
        return list(self.classes)


class ObjectRecord(BaseModel):
    label: str
    box: List[float] = Field(..., min_length=4, max_length=4)
    confidence: float = Field(..., ge=0.0, le=1.0)
    visual: List[float]

    def detected(self) -> DetectedObject:
        return DetectedObject(
            class_label=self.label,
            box=tuple(self.box),
            visual_feature=tuple(self.visual),
            confidence=self.confidence,
        )


class SampleRecord(BaseModel):
    scene_id: int
    objects: List[ObjectRecord]
    question: List[str]
    answer: int = Field(..., ge=0)
    split: str


class WorldInfo(BaseModel):
    """What a consumer of the dataset needs besides the records."""

    seed: int
    embedding_dim: int
    visual_dim: int
    image_width: int
    image_height: int
    max_count: int
    confidence_threshold: float
    taxonomy: Taxonomy
    fingerprint: str


def count_oracle(objects: Iterable[ObjectRecord], noun: str, taxonomy: Taxonomy, min_confidence: float = 0.0) -> int:
    """Objects whose class (last word of the label) is the class the noun names."""
    target = taxonomy.resolve(noun)
    if target is None:
        return 0
    return sum(
        1
        for o in objects
        if o.confidence >= min_confidence and taxonomy.resolve(o.label.split()[-1]) == target
    )


def query_noun(tokens: Sequence[str], taxonomy: Taxonomy) -> Optional[str]:
    for token in tokens:
        if taxonomy.resolve(token) is not None:
            return token
    return None


def reference_caption(record: SampleRecord, min_confidence: float = 0.0) -> List[str]:
    """<start> label [and label]* <end> over the distinct labels, sorted."""
    labels = sorted({o.label for o in record.objects if o.confidence >= min_confidence})
    words: List[str] = [START]
    for n, label in enumerate(labels):
        if n:
            words.append(CONNECTIVES[0])
        words.extend(label.split())
    words.append(END)
    return words


# ============================================================================
# Word vectors
# ============================================================================

def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def build_word_vectors(config: ExperimentConfig, taxonomy: Taxonomy, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """
    Base words get orthonormal vectors; each synonym is its base vector pushed
    by a random direction orthogonal to every base vector, scaled so the
    cosine to the base sits halfway between synonym_cosine_min and 1.
    """
    d_w = config.embedding_dim
    bases = taxonomy.bases
    if d_w <= len(bases):
        raise GenerationError(
            f"embedding_dim={d_w} cannot hold {len(bases)} orthogonal classes plus synonym directions"
        )
    basis, _ = np.linalg.qr(rng.standard_normal((d_w, len(bases))))
    target = (1.0 + config.synonym_cosine_min) / 2.0
    push = np.sqrt(1.0 / target ** 2 - 1.0)

    vectors: Dict[str, np.ndarray] = {}
    for c, base in enumerate(bases):
        vectors[base] = basis[:, c].copy()
        for synonym in taxonomy.classes[base]:
            g = rng.standard_normal(d_w)
            direction = _unit(g - basis @ (basis.T @ g))
            vectors[synonym] = _unit(basis[:, c] + push * direction)

    for word in _filler_words():
        vectors[word] = _unit(rng.standard_normal(d_w))

    verify_geometry(vectors, taxonomy, config.synonym_cosine_min, config.cross_cosine_max)
    return vectors


def _filler_words() -> List[str]:
    words: List[str] = []
    for template in QUESTION_TEMPLATES:
        for token in template:
            if token != "{noun}" and token not in words:
                words.append(token)
    return words + [a for a in ADJECTIVES if a not in words] + [c for c in CONNECTIVES if c not in words]


def verify_geometry(vectors: Dict[str, np.ndarray], taxonomy: Taxonomy, synonym_min: float, cross_max: float) -> None:
    groups = {base: [base] + list(synonyms) for base, synonyms in taxonomy.classes.items()}
    for base, words in groups.items():
        for synonym in words[1:]:
            cos = _cosine(vectors[base], vectors[synonym])
            if cos < synonym_min:
                raise GenerationError(f"cos({base}, {synonym}) = {cos:.3f} is below {synonym_min}")
    bases = list(groups)
    for a in range(len(bases)):
        for b in range(a + 1, len(bases)):
            for wa in groups[bases[a]]:
                for wb in groups[bases[b]]:
                    cos = _cosine(vectors[wa], vectors[wb])
                    if cos > cross_max:
                        raise GenerationError(f"cos({wa}, {wb}) = {cos:.3f} exceeds {cross_max}")


# ============================================================================
# Scenes
# ============================================================================

def _random_box(rng: np.random.Generator, width: int, height: int) -> List[float]:
    w = float(np.round(rng.uniform(0.05, 0.4) * width, 2))
    h = float(np.round(rng.uniform(0.05, 0.4) * height, 2))
    x = float(np.round(rng.uniform(0.0, width - w), 2))
    y = float(np.round(rng.uniform(0.0, height - h), 2))
    return [x, y, min(w, width - x), min(h, height - y)]


CONFIDENCE_STEP = 1e-4


def quantize_confidence(value: float, threshold: float, kept: bool) -> float:
    """
    Round a confidence to four decimals without crossing the threshold:
    kept objects stay at or above it, spurious ones stay strictly below.
    """
    q = round(float(value), 4)
    if kept:
        while q < threshold:
            q = round(q + CONFIDENCE_STEP, 4)
        return min(q, 1.0)
    while q >= threshold and q > 0.0:
        q = round(q - CONFIDENCE_STEP, 4)
    return max(q, 0.0)


def split_of(index: int, config: ExperimentConfig) -> str:
    bounds = np.cumsum([config.train_scenes, config.val_scenes, config.test_scenes, config.test_scenes])
    return SPLITS[int(np.searchsorted(bounds, index, side="right"))]


def generate_scene(
    index: int,
    config: ExperimentConfig,
    taxonomy: Taxonomy,
    prototypes: Dict[str, np.ndarray],
) -> SampleRecord:
    rng = np.random.default_rng([config.seed, 1, index])
    bases = taxonomy.bases
    split = split_of(index, config)
    threshold = config.confidence_threshold

    query = bases[int(rng.integers(len(bases)))]
    count = int(rng.integers(0, config.max_count + 1))
    others = [b for b in bases if b != query]
    n_distractors = int(rng.integers(config.distractors_min, config.distractors_max + 1))
    if count == 0 and n_distractors == 0:
        n_distractors = 1
    if not others:
        n_distractors = 0
        count = max(count, 1)
    classes = [query] * count + [others[int(rng.integers(len(others)))] for _ in range(n_distractors)]
    confidences = [quantize_confidence(rng.uniform(threshold, 1.0), threshold, kept=True) for _ in classes]

    n_spurious = int(rng.integers(0, config.spurious_objects_max + 1))
    if threshold == 0.0:
        n_spurious = 0
    for _ in range(n_spurious):
        classes.append(bases[int(rng.integers(len(bases)))])
        confidences.append(quantize_confidence(rng.uniform(0.0, threshold), threshold, kept=False))

    objects = []
    for cls, confidence in zip(classes, confidences):
        label = cls
        if config.adjective_labels:
            label = f"{ADJECTIVES[int(rng.integers(len(ADJECTIVES)))]} {cls}"
        visual = prototypes[cls] + config.noise_sigma * rng.standard_normal(config.visual_dim)
        objects.append(
            ObjectRecord(
                label=label,
                box=_random_box(rng, config.image_width, config.image_height),
                confidence=confidence,
                visual=[float(v) for v in visual],
            )
        )
    objects = [objects[i] for i in rng.permutation(len(objects))]

    noun = query
    if split == "test-synonym":
        synonyms = taxonomy.classes[query]
        noun = synonyms[int(rng.integers(len(synonyms)))]
    template = QUESTION_TEMPLATES[int(rng.integers(len(QUESTION_TEMPLATES)))]
    question = [noun if t == "{noun}" else t for t in template]

    return SampleRecord(
        scene_id=index,
        objects=objects,
        question=question,
        answer=count_oracle(objects, noun, taxonomy, threshold),
        split=split,
    )


def build_taxonomy(config: ExperimentConfig) -> Taxonomy:
    if config.num_classes > len(BASE_CLASSES):
        raise GenerationError(f"at most {len(BASE_CLASSES)} base classes are available, asked for {config.num_classes}")
    chosen = list(BASE_CLASSES)[: config.num_classes]
    return Taxonomy(classes={base: list(BASE_CLASSES[base]) for base in chosen})


def generate_world(config: ExperimentConfig, out_dir: Union[str, Path], progress: bool = False) -> WorldInfo:
    """Write dataset.jsonl, embeddings.txt and world.json into out_dir."""
    total = config.train_scenes + config.val_scenes + 2 * config.test_scenes
    if total == 0:
        raise GenerationError("no scenes requested")
    if config.train_scenes == 0:
        raise GenerationError("the train split needs at least one scene")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    taxonomy = build_taxonomy(config)
    rng = np.random.default_rng([config.seed, 0])
    vectors = build_word_vectors(config, taxonomy, rng)
    prototypes = {base: _unit(rng.standard_normal(config.visual_dim)) for base in taxonomy.bases}

    save_embeddings(EmbeddingTable(config.embedding_dim, vectors), out / EMBEDDINGS_FILE)
    with open(out / DATASET_FILE, "w", encoding="utf-8", newline="\n") as handle:
        for index in tqdm(range(total), desc="scenes", disable=not progress):
            handle.write(generate_scene(index, config, taxonomy, prototypes).model_dump_json() + "\n")

    info = WorldInfo(
        seed=config.seed,
        embedding_dim=config.embedding_dim,
        visual_dim=config.visual_dim,
        image_width=config.image_width,
        image_height=config.image_height,
        max_count=config.max_count,
        confidence_threshold=config.confidence_threshold,
        taxonomy=taxonomy,
        fingerprint=config_fingerprint(config),
    )
    (out / WORLD_FILE).write_text(
        json.dumps(info.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info(
        "generated %d scenes over %d classes into %s (fingerprint %s)",
        total, len(taxonomy.bases), out, info.fingerprint,
    )
    return info


# ============================================================================
# Loading
# ============================================================================

def load_world_info(data_dir: Union[str, Path]) -> WorldInfo:
    path = Path(data_dir) / WORLD_FILE
    try:
        return WorldInfo.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"{path} does not exist") from None
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


def iter_records(path: Union[str, Path]) -> Iterator[Tuple[int, SampleRecord]]:
    with open(path, "r", encoding="utf-8") as handle:
        for n, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                yield n, SampleRecord.model_validate_json(line)
            except ValueError as exc:
                raise ParseError(f"invalid sample record: {exc}", line=n) from None


def load_dataset(data_dir: Union[str, Path], info: WorldInfo) -> List[SampleRecord]:
    """Read every record and re-check its answer against the oracle."""
    records = []
    for n, record in iter_records(Path(data_dir) / DATASET_FILE):
        if record.split not in SPLITS:
            raise ParseError(f"unknown split '{record.split}'", line=n)
        noun = query_noun(record.question, info.taxonomy) or ""
        expected = count_oracle(record.objects, noun, info.taxonomy, info.confidence_threshold)
        if expected != record.answer:
            raise ParseError(f"answer {record.answer} disagrees with the oracle ({expected})", line=n)
        records.append(record)
    return records


def split_hygiene_violations(records: Sequence[SampleRecord], taxonomy: Taxonomy) -> List[str]:
    """Query nouns of test-synonym questions that also appear as train query nouns."""
    train_nouns = {query_noun(r.question, taxonomy) for r in records if r.split == "train"}
    leaked = {
        query_noun(r.question, taxonomy)
        for r in records
        if r.split == "test-synonym" and set(r.question) & train_nouns
    }
    return sorted(n for n in leaked if n)


def record_features(
    record: SampleRecord,
    table: EmbeddingTable,
    info: WorldInfo,
    max_question_len: int,
) -> Tuple[SceneFeatures, QuestionFeatures]:
    scene = build_scene_features(
        [o.detected() for o in record.objects],
        table,
        info.image_width,
        info.image_height,
        min_confidence=info.confidence_threshold,
    )
    return scene, embed_question(table, record.question, max_question_len)


def load_table(data_dir: Union[str, Path], info: WorldInfo) -> EmbeddingTable:
    return load_embeddings(Path(data_dir) / EMBEDDINGS_FILE, expected_dim=info.embedding_dim)
