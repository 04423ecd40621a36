"""
Training and evaluation drivers for every model kind.

A run writes into its output directory:

    checkpoint.npz   best-by-validation weights
    embeddings.txt   copy of the word vectors the run used
    metrics.csv      one row per (epoch, split)
    vocab.txt        caption vocabulary (caption runs only)
"""
import csv
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from core.errors import CheckpointError, ContractError
from core.nn import Module
from core.optim import Adam
from core.tensor import Tensor, reduce_mean, stack
from features.embeddings import EmbeddingTable, QuestionFeatures
from features.scene import SceneFeatures
from harness.checkpoints import CHECKPOINT_FILE, VOCAB_FILE, load_checkpoint, save_checkpoint
from harness.config import ExperimentConfig, ModelKind, config_fingerprint
from harness.world import (
    EMBEDDINGS_FILE,
    SampleRecord,
    WorldInfo,
    load_dataset,
    load_table,
    load_world_info,
    record_features,
    reference_caption,
)
from models.captioning_model import (
    CaptionModel,
    CaptionModelConfig,
    CaptionVocabulary,
    build_caption_vocabulary,
    caption_loss,
    caption_word_vectors,
    generate_caption,
)
from models.counting_model import (
    CountingModel,
    CountingModelConfig,
    collate,
    round_count,
    training_loss,
)
from models.vqa_adapters import VqaModel, VqaModelConfig, build_adapter

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
METRICS_HEADER = ("epoch", "split", "rmse", "loss", "seconds", "fingerprint")
EVAL_CHUNK = 64


class MetricsRecord(BaseModel):
    epoch: int = Field(..., ge=0)
    split: str
    rmse: Optional[float] = Field(None, ge=0.0, description="RMSE of rounded predictions")
    loss: float
    seconds: float = Field(..., ge=0.0)
    fingerprint: str
    raw_rmse: Optional[float] = Field(None, ge=0.0, description="RMSE of unrounded scores (counting)")
    accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)


def write_metrics_csv(path: Union[str, Path], records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in records:
            writer.writerow([
                r.epoch,
                r.split,
                "" if r.rmse is None else repr(r.rmse),
                repr(r.loss),
                f"{r.seconds:.3f}",
                r.fingerprint,
            ])


def rmse(predictions: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ContractError("rmse needs two non-empty sequences of equal length")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mean_predictor_rmse(counts: Sequence[int]) -> float:
    """RMSE of always answering the mean count, i.e. the population std."""
    return float(np.std(np.asarray(counts, dtype=np.float64)))


# ============================================================================
# Data
# ============================================================================

@dataclass
class ExperimentData:
    info: WorldInfo
    table: EmbeddingTable
    records: List[SampleRecord]
    features: List[Tuple[SceneFeatures, QuestionFeatures]]
    captions: List[List[str]]
    _splits: Dict[str, List[int]] = field(default_factory=dict)

    def split(self, name: str) -> List[int]:
        return self._splits.get(name, [])

    def answers(self, indices: Sequence[int]) -> np.ndarray:
        return np.array([self.records[i].answer for i in indices], dtype=np.float64)

    def words(self) -> List[str]:
        """Every word in labels and questions, first-seen order."""
        seen: Dict[str, None] = {}
        for record in self.records:
            for o in record.objects:
                for w in o.label.split():
                    seen.setdefault(w.casefold(), None)
            for token in record.question:
                seen.setdefault(token.casefold(), None)
        return list(seen)


def load_experiment(data_dir: Union[str, Path], config: ExperimentConfig) -> ExperimentData:
    info = load_world_info(data_dir)
    table = load_table(data_dir, info)
    records = load_dataset(data_dir, info)
    features = [record_features(r, table, info, config.max_question_len) for r in records]
    captions = [reference_caption(r, info.confidence_threshold) for r in records]
    splits: Dict[str, List[int]] = {}
    for i, r in enumerate(records):
        splits.setdefault(r.split, []).append(i)
    logger.info(
        "loaded %d records (%s)",
        len(records), ", ".join(f"{name}={len(idx)}" for name, idx in splits.items()),
    )
    return ExperimentData(info=info, table=table, records=records, features=features, captions=captions, _splits=splits)


def make_model(config: ExperimentConfig, data: ExperimentData) -> Tuple[Module, Optional[CaptionVocabulary]]:
    info = data.info
    if config.model == ModelKind.COUNTING:
        model_config = CountingModelConfig(
            visual_dim=info.visual_dim,
            embedding_dim=info.embedding_dim,
            hidden_dim=config.hidden_dim,
            rank=config.rank,
            variant=config.variant,
            vocabulary=data.words() if config.variant.one_hot else [],
            seed=config.seed,
        )
        return CountingModel(model_config), None
    if config.model == ModelKind.CAPTION:
        vocabulary = build_caption_vocabulary(data.captions)
        model_config = CaptionModelConfig(
            visual_dim=info.visual_dim,
            embedding_dim=info.embedding_dim,
            hidden_dim=config.caption_hidden_dim,
            attention_dim=config.attention_dim,
            vocab_size=len(vocabulary),
            use_lat=config.use_lat,
            seed=config.seed,
        )
        return CaptionModel(model_config, caption_word_vectors(vocabulary, data.table)), vocabulary
    model_config = VqaModelConfig(
        kind=config.model.value,
        visual_dim=info.visual_dim,
        embedding_dim=info.embedding_dim,
        hidden_dim=config.hidden_dim,
        joint_dim=config.joint_dim,
        num_answers=info.max_count + 1,
        use_lat=config.use_lat,
        pooling=config.murel_pooling,
        seed=config.seed,
    )
    return build_adapter(model_config), None


# ============================================================================
# Per-kind steps
# ============================================================================

@dataclass
class BatchResult:
    loss: Tensor
    predictions: Optional[np.ndarray] = None
    raw: Optional[np.ndarray] = None


def counting_batch(model: CountingModel, data: ExperimentData, indices: Sequence[int]) -> BatchResult:
    scores, _ = model.forward_batch(collate([data.features[i] for i in indices]))
    loss = training_loss(scores, data.answers(indices))
    raw = scores.numpy()
    return BatchResult(loss=loss, predictions=np.array([round_count(s) for s in raw], dtype=np.float64), raw=raw)


def vqa_batch(model: VqaModel, data: ExperimentData, indices: Sequence[int]) -> BatchResult:
    losses, predictions = [], []
    for i in indices:
        scene, question = data.features[i]
        logits = model(scene, question)
        predictions.append(float(np.argmax(logits.data)))
        losses.append(model.loss_from_logits(logits, data.records[i].answer))
    return BatchResult(loss=reduce_mean(stack(losses)), predictions=np.array(predictions))


def caption_batch(
    model: CaptionModel, data: ExperimentData, indices: Sequence[int], vocabulary: CaptionVocabulary
) -> BatchResult:
    losses = [caption_loss(model, data.features[i][0], vocabulary.encode(data.captions[i])) for i in indices]
    return BatchResult(loss=reduce_mean(stack(losses)))


def _batch_fn(kind: ModelKind, vocabulary: Optional[CaptionVocabulary]) -> Callable[..., BatchResult]:
    if kind == ModelKind.COUNTING:
        return counting_batch
    if kind == ModelKind.CAPTION:
        return lambda model, data, indices: caption_batch(model, data, indices, vocabulary)
    return vqa_batch


def batches(order: Sequence[int], batch_size: int) -> List[List[int]]:
    """Consecutive chunks; a trailing chunk of one joins the previous chunk."""
    chunks = [list(order[i : i + batch_size]) for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    return chunks


# ============================================================================
# Evaluation
# ============================================================================

def evaluate_model(
    kind: ModelKind,
    model: Module,
    data: ExperimentData,
    split: str,
    fingerprint: str,
    epoch: int = 0,
    vocabulary: Optional[CaptionVocabulary] = None,
) -> MetricsRecord:
    indices = data.split(split)
    if not indices:
        raise ContractError(f"split '{split}' is empty")
    start = time.perf_counter()
    was_training = model.training
    model.eval()
    step = _batch_fn(kind, vocabulary)
    losses, predictions, raw = [], [], []
    for chunk in batches(indices, EVAL_CHUNK):
        result = step(model, data, chunk)
        losses.append(result.loss.item() * len(chunk))
        if result.predictions is not None:
            predictions.extend(result.predictions)
        if result.raw is not None:
            raw.extend(result.raw)
    model.train(was_training)

    targets = data.answers(indices)
    record = MetricsRecord(
        epoch=epoch,
        split=split,
        loss=float(np.sum(losses) / len(indices)),
        seconds=time.perf_counter() - start,
        fingerprint=fingerprint,
    )
    if kind == ModelKind.CAPTION:
        matches = [
            vocabulary.decode(generate_caption(model, data.features[i][0], len(data.captions[i])))
            == data.captions[i][1:-1]
            for i in indices
        ]
        record.accuracy = float(np.mean(matches))
    else:
        record.rmse = rmse(predictions, targets)
        record.accuracy = float(np.mean(np.asarray(predictions) == targets))
        if raw:
            record.raw_rmse = rmse(raw, targets)
    return record


def evaluate(
    checkpoint_dir: Union[str, Path],
    data_dir: Union[str, Path],
    split: str,
    config: ExperimentConfig,
) -> MetricsRecord:
    """Evaluate a trained run directory on one split of a dataset."""
    checkpoint_dir = Path(checkpoint_dir)
    kind, model, meta = load_checkpoint(checkpoint_dir / CHECKPOINT_FILE)
    data = load_experiment(data_dir, config)
    model_dims = (meta["config"].get("visual_dim"), meta["config"].get("embedding_dim"))
    if model_dims != (data.info.visual_dim, data.info.embedding_dim):
        raise CheckpointError(
            f"checkpoint expects (d_v, d_w)={model_dims}, dataset has "
            f"({data.info.visual_dim}, {data.info.embedding_dim})"
        )
    vocabulary = CaptionVocabulary.load(checkpoint_dir / VOCAB_FILE) if kind == ModelKind.CAPTION else None
    record = evaluate_model(kind, model, data, split, meta.get("fingerprint", ""), vocabulary=vocabulary)
    _log_record(record)
    return record


def _log_record(record: MetricsRecord) -> None:
    logger.info(
        "epoch %d %-12s rmse=%s raw_rmse=%s loss=%.4f acc=%s",
        record.epoch,
        record.split,
        "-" if record.rmse is None else f"{record.rmse:.4f}",
        "-" if record.raw_rmse is None else f"{record.raw_rmse:.4f}",
        record.loss,
        "-" if record.accuracy is None else f"{record.accuracy:.3f}",
    )


# ============================================================================
# Training
# ============================================================================

@dataclass
class TrainResult:
    directory: Path
    kind: ModelKind
    model: Module
    metrics: List[MetricsRecord]
    best_epoch: int
    fingerprint: str
    vocabulary: Optional[CaptionVocabulary] = None


def _selection_score(kind: ModelKind, record: MetricsRecord) -> float:
    if kind == ModelKind.COUNTING and record.raw_rmse is not None:
        return record.raw_rmse
    return record.loss


def train(
    config: ExperimentConfig,
    data_dir: Union[str, Path],
    out_dir: Union[str, Path],
    data: Optional[ExperimentData] = None,
    progress: bool = False,
) -> TrainResult:
    """
    Train the configured model with Adam, keeping the weights with the best
    validation score (raw RMSE for counting, loss otherwise).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data if data is not None else load_experiment(data_dir, config)
    fingerprint = config_fingerprint(config)
    kind = config.model
    model, vocabulary = make_model(config, data)
    optimizer = Adam(model.parameters(), learning_rate=config.learning_rate)
    step = _batch_fn(kind, vocabulary)
    if vocabulary is not None:
        vocabulary.save(out / VOCAB_FILE)

    train_indices = data.split("train")
    if not train_indices:
        raise ContractError("dataset has no train split")
    has_val = bool(data.split("val"))
    shuffle_rng = np.random.default_rng([config.seed, 2])

    metrics: List[MetricsRecord] = []
    best_score, best_epoch = math.inf, 0
    best_state = model.state_dict()
    logger.info(
        "training %s (%s) on %d samples, %d parameters, fingerprint %s",
        kind.value, config.variant.value if kind == ModelKind.COUNTING else f"lat={config.use_lat}",
        len(train_indices), model.num_parameters(), fingerprint,
    )

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        model.train()
        order = shuffle_rng.permutation(train_indices)
        epoch_losses, predictions, targets = [], [], []
        for batch in tqdm(batches(order, config.batch_size), desc=f"epoch {epoch}", disable=not progress, leave=False):
            result = step(model, data, batch)
            result.loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            epoch_losses.append(result.loss.item() * len(batch))
            if result.predictions is not None:
                predictions.extend(result.predictions)
                targets.extend(data.answers(batch))
            logger.debug("epoch %d batch loss %.6f", epoch, result.loss.item())

        train_record = MetricsRecord(
            epoch=epoch,
            split="train",
            rmse=rmse(predictions, targets) if predictions else None,
            loss=float(np.sum(epoch_losses) / len(order)),
            seconds=time.perf_counter() - start,
            fingerprint=fingerprint,
        )
        metrics.append(train_record)
        _log_record(train_record)

        selected = train_record
        if has_val:
            selected = evaluate_model(kind, model, data, "val", fingerprint, epoch=epoch, vocabulary=vocabulary)
            metrics.append(selected)
            _log_record(selected)
        score = _selection_score(kind, selected)
        if score < best_score:
            best_score, best_epoch = score, epoch
            best_state = model.state_dict()
            save_checkpoint(out / CHECKPOINT_FILE, model, kind, fingerprint)

    model.load_state_dict(best_state)
    model.eval()
    write_metrics_csv(out / METRICS_FILE, metrics)
    shutil.copyfile(Path(data_dir) / EMBEDDINGS_FILE, out / EMBEDDINGS_FILE)
    logger.info("best epoch %d (selection score %.4f); outputs in %s", best_epoch, best_score, out)
    return TrainResult(
        directory=out,
        kind=kind,
        model=model,
        metrics=metrics,
        best_epoch=best_epoch,
        fingerprint=fingerprint,
        vocabulary=vocabulary,
    )
