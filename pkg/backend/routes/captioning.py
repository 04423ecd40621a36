import logging
from typing import List

from fastapi import APIRouter, HTTPException, Request
from pydantic import BaseModel, Field

from core.errors import LatError
from harness.config import ModelKind
from models.captioning_model import generate_caption
from routes.common import SceneIn, get_model, scene_from_request

logger = logging.getLogger(__name__)

router = APIRouter()


class CaptionRequest(SceneIn):
    max_len: int = Field(12, ge=0, le=64, description="Longest caption to emit")


class CaptionResponse(BaseModel):
    tokens: List[str]
    caption: str
    fingerprint: str


@router.post("/generate", response_model=CaptionResponse, summary="Greedy caption for a detected scene")
def generate(payload: CaptionRequest, request: Request) -> CaptionResponse:
    loaded = get_model(request, ModelKind.CAPTION)
    scene = scene_from_request(payload, loaded.table)
    try:
        ids = generate_caption(loaded.model, scene, payload.max_len)
    except LatError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None
    tokens = loaded.vocabulary.decode(ids)
    return CaptionResponse(tokens=tokens, caption=" ".join(tokens), fingerprint=loaded.fingerprint)
