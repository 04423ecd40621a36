"""
Attention dumps for a single sample, as JSON-ready dicts.

Counting reports mu over objects and nu over words; UpDn and MUREL report
gamma; BAN reports its bilinear maps; captioning reports alpha and beta per
generated step.
"""
import logging
from typing import Any, Dict, List, Optional

import numpy as np

from core.nn import Module
from features.embeddings import QuestionFeatures
from features.scene import SceneFeatures
from harness.config import ModelKind
from models.captioning_model import CaptionModel, CaptionVocabulary, END_ID, START_ID
from models.counting_model import CountingModel, round_count
from models.vqa_adapters import BanLatModel, MurelLatModel, UpDnLatModel

logger = logging.getLogger(__name__)

HIGH_ATTENTION = 0.1


def _floats(values: np.ndarray) -> List[Any]:
    return np.asarray(values, dtype=np.float64).tolist()


def counting_attention(model: CountingModel, scene: SceneFeatures, question: QuestionFeatures) -> Dict[str, Any]:
    score, weights = model.forward(scene, question)
    mu = weights.mu.numpy()
    n = question.length
    return {
        "raw_score": score.item(),
        "count": round_count(score.item()),
        "objects": list(scene.labels),
        "words": list(question.tokens[:n]),
        "mu": _floats(mu),
        "nu": _floats(weights.nu.numpy()[:n]),
        "high_attention": [bool(w >= HIGH_ATTENTION) for w in mu],
    }


def vqa_attention(model: Module, scene: SceneFeatures, question: QuestionFeatures) -> Dict[str, Any]:
    report: Dict[str, Any] = {
        "objects": list(scene.labels),
        "words": list(question.tokens[: question.length]),
        "answer": model.predict(scene, question),
    }
    if isinstance(model, BanLatModel):
        visual, linguistic = model.glimpses(scene, question)
        report["A_visual"] = _floats(visual.A.numpy())
        if linguistic is not None:
            report["A_linguistic"] = _floats(linguistic.A.numpy())
        return report
    if isinstance(model, UpDnLatModel):
        gamma, _ = model.attend(scene, question)
    elif isinstance(model, MurelLatModel):
        gamma = model.attend(scene, question)
    else:
        raise TypeError(f"no attention report for {type(model).__name__}")
    report["gamma"] = None if gamma is None else _floats(gamma.numpy())
    return report


def caption_attention(
    model: CaptionModel,
    scene: SceneFeatures,
    vocabulary: Optional[CaptionVocabulary],
    max_len: int,
) -> Dict[str, Any]:
    """Greedy decode, recording alpha and beta at every step."""
    state = model.initial_state()
    token = START_ID
    steps = []
    for _ in range(max_len):
        out = model.step(scene, token, state)
        state = out.state
        token = int(np.argmax(out.logits.data))
        steps.append({
            "token": vocabulary.tokens[token] if vocabulary is not None else token,
            "alpha": _floats(out.alpha.numpy()),
            "beta": None if out.beta is None else _floats(out.beta.numpy()),
        })
        if token == END_ID:
            break
    return {"objects": list(scene.labels), "steps": steps}


def inspect_attention(
    kind: ModelKind,
    model: Module,
    scene: SceneFeatures,
    question: QuestionFeatures,
    vocabulary: Optional[CaptionVocabulary] = None,
    max_caption_len: int = 12,
) -> Dict[str, Any]:
    model.eval()
    if kind == ModelKind.COUNTING:
        report = counting_attention(model, scene, question)
    elif kind == ModelKind.CAPTION:
        report = caption_attention(model, scene, vocabulary, max_caption_len)
    else:
        report = vqa_attention(model, scene, question)
    report["model"] = kind.value
    return report
