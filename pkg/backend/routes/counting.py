import logging
from typing import List

from fastapi import APIRouter, HTTPException, Request
from pydantic import BaseModel, Field

from core.errors import LatError
from features.embeddings import MAX_QUESTION_LEN, embed_question
from harness.config import ModelKind
from harness.inspection import counting_attention
from routes.common import SceneIn, get_model, scene_from_request, tokenize

logger = logging.getLogger(__name__)

router = APIRouter()


class CountRequest(SceneIn):
    question: str = Field(..., min_length=1, description="e.g. 'how many sedans are in the picture'")


class CountResponse(BaseModel):
    count: int = Field(..., ge=0)
    raw_score: float
    objects: List[str]
    words: List[str]
    mu: List[float] = Field(..., description="Attention over objects")
    nu: List[float] = Field(..., description="Attention over question words")
    high_attention: List[bool] = Field(..., description="Objects with mu >= 0.1")
    fingerprint: str


@router.post("/predict", response_model=CountResponse, summary="Count the objects a question asks about")
def predict_count(payload: CountRequest, request: Request) -> CountResponse:
    loaded = get_model(request, ModelKind.COUNTING)
    scene = scene_from_request(payload, loaded.table)
    tokens = tokenize(payload.question)
    try:
        question = embed_question(loaded.table, tokens, MAX_QUESTION_LEN)
        report = counting_attention(loaded.model, scene, question)
    except LatError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None
    logger.info("counted %d for %r over %d objects", report["count"], payload.question, scene.m)
    return CountResponse(fingerprint=loaded.fingerprint, **report)
