"""Request pieces shared by the model routers."""
import logging
import re
from typing import List, Tuple

from fastapi import HTTPException, Request
from pydantic import BaseModel, Field

from core.errors import LatError
from features.embeddings import EmbeddingTable
from features.scene import DetectedObject, SceneFeatures, build_scene_features
from harness.checkpoints import LoadedModel, ModelStore
from harness.config import ModelKind

logger = logging.getLogger(__name__)

WORD_PATTERN = re.compile(r"[\w']+")


class ObjectIn(BaseModel):
    label: str = Field(..., min_length=1, description="Detector class label, e.g. 'car' or 'red car'")
    box: Tuple[float, float, float, float] = Field(..., description="x, y, width, height in pixels")
    confidence: float = Field(1.0, ge=0.0, le=1.0)
    visual: List[float] = Field(..., min_length=1, description="Visual feature vector (length d_v)")


class SceneIn(BaseModel):
    objects: List[ObjectIn] = Field(..., min_length=1)
    image_width: float = Field(..., gt=0)
    image_height: float = Field(..., gt=0)
    min_confidence: float = Field(0.0, ge=0.0, le=1.0, description="Objects below this are ignored")


def tokenize(text: str) -> List[str]:
    return WORD_PATTERN.findall(text.casefold())


def get_model(request: Request, kind: ModelKind) -> LoadedModel:
    store: ModelStore = getattr(request.app.state, "models", None)
    if store is None:
        raise HTTPException(status_code=503, detail="No model directory configured (set LAT_MODEL_DIR)")
    loaded = store.get(kind)
    if loaded is None:
        raise HTTPException(status_code=404, detail=f"No trained {kind.value} model is loaded")
    return loaded


def scene_from_request(payload: SceneIn, table: EmbeddingTable) -> SceneFeatures:
    try:
        objects = [
            DetectedObject(
                class_label=o.label,
                box=o.box,
                visual_feature=tuple(o.visual),
                confidence=o.confidence,
            )
            for o in payload.objects
        ]
        return build_scene_features(
            objects, table, payload.image_width, payload.image_height, min_confidence=payload.min_confidence
        )
    except LatError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None
