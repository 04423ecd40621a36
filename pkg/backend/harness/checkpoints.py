"""
Checkpoint container.

A checkpoint is a NumPy .npz archive holding

    param/<dotted.name>    every trainable tensor
    buffer/<dotted.name>   non-trainable state (batch-norm statistics, word vectors)
    __meta__               JSON: format_version, kind, model config, fingerprint

Arrays are stored as float64, so save followed by load is value-identical.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from core.errors import CheckpointError
from core.nn import Module
from features.embeddings import EmbeddingTable, load_embeddings
from harness.config import ModelKind
from harness.world import EMBEDDINGS_FILE
from models.captioning_model import CaptionModel, CaptionModelConfig, CaptionVocabulary
from models.counting_model import CountingModel, CountingModelConfig
from models.vqa_adapters import VqaModelConfig, build_adapter

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CHECKPOINT_FILE = "checkpoint.npz"
VOCAB_FILE = "vocab.txt"
META_KEY = "__meta__"


def save_checkpoint(path: Union[str, Path], model: Module, kind: ModelKind, fingerprint: str) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind.value,
        "config": model.config.model_dump(mode="json"),
        "fingerprint": fingerprint,
    }
    arrays = model.state_dict()
    arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)
    logger.info("saved %s checkpoint to %s", kind.value, path)


def read_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """(meta, arrays) without building a model."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist") from None
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is unreadable: {exc}") from None
    if META_KEY not in arrays:
        raise CheckpointError(f"checkpoint {path} has no metadata")
    meta = json.loads(str(arrays.pop(META_KEY)))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {meta.get('format_version')} is not supported")
    return meta, arrays


def build_model(kind: ModelKind, config: Dict[str, Any]) -> Module:
    if kind == ModelKind.COUNTING:
        return CountingModel(CountingModelConfig(**config))
    if kind == ModelKind.CAPTION:
        return CaptionModel(CaptionModelConfig(**config))
    return build_adapter(VqaModelConfig(**config))


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelKind, Module, Dict[str, Any]]:
    """Rebuild the model a checkpoint describes and load its values (eval mode)."""
    meta, arrays = read_checkpoint(path)
    try:
        kind = ModelKind(meta["kind"])
        model = build_model(kind, meta["config"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} has invalid metadata: {exc}") from None
    model.load_state_dict(arrays)
    model.eval()
    return kind, model, meta


@dataclass
class LoadedModel:
    """A frozen model plus what it needs to turn raw inputs into features."""

    kind: ModelKind
    model: Module
    table: EmbeddingTable
    directory: Path
    fingerprint: str
    vocabulary: Optional[CaptionVocabulary] = None


@dataclass
class ModelStore:
    models: Dict[ModelKind, LoadedModel] = field(default_factory=dict)

    def get(self, kind: ModelKind) -> Optional[LoadedModel]:
        return self.models.get(kind)


def load_model_directory(directory: Union[str, Path]) -> LoadedModel:
    directory = Path(directory)
    kind, model, meta = load_checkpoint(directory / CHECKPOINT_FILE)
    table = load_embeddings(directory / EMBEDDINGS_FILE)
    vocabulary = None
    if kind == ModelKind.CAPTION:
        vocabulary = CaptionVocabulary.load(directory / VOCAB_FILE)
    return LoadedModel(
        kind=kind,
        model=model,
        table=table,
        directory=directory,
        fingerprint=meta.get("fingerprint", ""),
        vocabulary=vocabulary,
    )


def discover_models(root: Union[str, Path]) -> ModelStore:
    """Load `root` itself and every direct subdirectory that holds a checkpoint."""
    root = Path(root)
    store = ModelStore()
    candidates = [root] + sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    for directory in candidates:
        if not (directory / CHECKPOINT_FILE).exists():
            continue
        loaded = load_model_directory(directory)
        if loaded.kind in store.models:
            logger.warning("ignoring second %s model in %s", loaded.kind.value, directory)
            continue
        store.models[loaded.kind] = loaded
        logger.info("loaded %s model from %s", loaded.kind.value, directory)
    return store
