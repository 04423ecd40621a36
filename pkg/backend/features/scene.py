"""
Per-image feature bundle: V (visual), L (label word vectors), B (box geometry).

B rows are (cx, cy, h, w, area), all normalised by the image size: cx and w by
the width, cy and h by the height, area by width * height.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core.errors import ContractError, DegenerateInputError, DimensionError
from features.embeddings import EmbeddingTable

logger = logging.getLogger(__name__)

BOX_FEATURES = 5


class DetectedObject(BaseModel):
    model_config = ConfigDict(frozen=True)

    class_label: str = Field(..., min_length=1)
    box: Tuple[float, float, float, float] = Field(..., description="(x, y, width, height) in pixels")
    visual_feature: Tuple[float, ...]
    confidence: float = Field(1.0, ge=0.0, le=1.0)


@dataclass(frozen=True)
class SceneFeatures:
    V: np.ndarray
    L: np.ndarray
    B: np.ndarray
    labels: Tuple[str, ...]

    @property
    def m(self) -> int:
        return self.V.shape[0]


def box_features(box: Sequence[float], image_w: float, image_h: float) -> np.ndarray:
    x, y, w, h = (float(c) for c in box)
    if w < 0 or h < 0 or x < 0 or y < 0 or x + w > image_w or y + h > image_h:
        raise ContractError(f"box {tuple(box)} lies outside the {image_w}x{image_h} image")
    return np.array([
        (x + w / 2.0) / image_w,
        (y + h / 2.0) / image_h,
        h / image_h,
        w / image_w,
        (h * w) / (image_h * image_w),
    ])


def build_scene_features(
    objects: Sequence[DetectedObject],
    table: EmbeddingTable,
    image_w: float,
    image_h: float,
    min_confidence: float = 0.0,
) -> SceneFeatures:
    """Stack V, embed labels into L and normalise boxes into B."""
    if image_w <= 0 or image_h <= 0:
        raise ContractError(f"image size must be positive, got {image_w}x{image_h}")
    if not objects:
        raise DegenerateInputError("scene has no objects")

    kept: List[DetectedObject] = [o for o in objects if o.confidence >= min_confidence]
    if len(kept) < len(objects):
        logger.warning(
            "dropped %d of %d objects below confidence %.2f",
            len(objects) - len(kept), len(objects), min_confidence,
        )
    if not kept:
        raise DegenerateInputError(f"no object reaches confidence {min_confidence}")

    d_v = len(kept[0].visual_feature)
    if any(len(o.visual_feature) != d_v for o in kept):
        raise DimensionError("visual features in one scene must share a length")

    V = np.array([o.visual_feature for o in kept], dtype=np.float64)
    L = np.stack([table.embed_label(o.class_label) for o in kept])
    B = np.stack([box_features(o.box, image_w, image_h) for o in kept])
    return SceneFeatures(V=V, L=L, B=B, labels=tuple(o.class_label for o in kept))


def concat_visual_box(scene: SceneFeatures) -> np.ndarray:
    """O = V || B, visual columns first."""
    return np.hstack([scene.V, scene.B])
