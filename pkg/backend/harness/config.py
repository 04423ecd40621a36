"""
Experiment configuration.

A config file is plain text, one `key=value` per line; `#` starts a comment.
Every key, its default and its meaning are listed by `lat show-config`.
"""
import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.errors import ContractError, ParseError
from models.counting_model import CountingVariant
from models.vqa_adapters import MurelPooling

logger = logging.getLogger(__name__)


class ModelKind(str, Enum):
    COUNTING = "counting"
    UPDN = "updn"
    MUREL = "murel"
    BAN = "ban"
    CAPTION = "caption"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    # World
    seed: int = Field(7, description="master seed for generation, initialisation and shuffling")
    num_classes: int = Field(12, ge=1, description="number of base object classes")
    embedding_dim: int = Field(50, ge=2, description="d_w, word-vector length")
    visual_dim: int = Field(32, ge=1, description="d_v, visual feature length")
    train_scenes: int = Field(5000, ge=0, description="scenes in the train split")
    val_scenes: int = Field(500, ge=0, description="scenes in the validation split")
    test_scenes: int = Field(500, ge=0, description="scenes in each test split (seen and synonym)")

    # Scenes
    distractors_min: int = Field(1, ge=0, description="fewest objects of other classes per scene")
    distractors_max: int = Field(5, ge=0, description="most objects of other classes per scene")
    max_count: int = Field(6, ge=1, description="counts are uniform over 0..max_count")
    noise_sigma: float = Field(0.1, ge=0.0, description="std of the Gaussian noise on visual prototypes")
    image_width: int = Field(640, ge=1, description="synthetic image width in pixels")
    image_height: int = Field(480, ge=1, description="synthetic image height in pixels")

    # Embedding geometry
    synonym_cosine_min: float = Field(0.9, gt=0.0, lt=1.0, description="lowest cosine between a synonym and its base word")
    cross_cosine_max: float = Field(0.3, ge=0.0, lt=1.0, description="highest cosine between words of different classes")

    # Detector confidence
    spurious_objects_max: int = Field(0, ge=0, description="low-confidence objects added per scene (not counted)")
    confidence_threshold: float = Field(0.7, ge=0.0, le=1.0, description="objects below this confidence are ignored")
    adjective_labels: bool = Field(False, description="label objects as '<adjective> <class>'")

    # Model
    model: ModelKind = Field(ModelKind.COUNTING, description="counting, updn, murel, ban or caption")
    variant: CountingVariant = Field(CountingVariant.FULL, description="counting-model ablation variant")
    use_lat: bool = Field(True, description="include the linguistic branch (VQA adapters and captioning)")
    murel_pooling: MurelPooling = Field(MurelPooling.ATTENTION, description="MUREL pooling: max or attention")
    hidden_dim: int = Field(64, ge=2, description="d, size of the encoded image and question")
    rank: int = Field(8, ge=1, description="k, Tucker rank of the count regressor")
    joint_dim: int = Field(64, ge=1, description="C, bilinear joint size for BAN")

    # Training
    epochs: int = Field(30, ge=1, description="training epochs")
    batch_size: int = Field(8, ge=1, description="samples per optimizer step")
    learning_rate: float = Field(0.0005, ge=0.0, description="Adam learning rate")
    max_question_len: int = Field(14, ge=1, description="questions are truncated to this many tokens")

    # Captioning
    caption_hidden_dim: int = Field(64, ge=1, description="d_e, LSTM size of the captioning model")
    attention_dim: int = Field(64, ge=1, description="attention projection size of the captioning model")
    max_caption_len: int = Field(12, ge=1, description="longest generated caption")

    @model_validator(mode="after")
    def _check_ranges(self) -> "ExperimentConfig":
        if self.distractors_min > self.distractors_max:
            raise ValueError("distractors_min must not exceed distractors_max")
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even")
        if self.rank > self.hidden_dim:
            raise ValueError("rank must not exceed hidden_dim")
        return self


def parse_config_lines(lines: List[str]) -> Dict[str, Tuple[str, int]]:
    """key -> (raw value, line number)."""
    values: Dict[str, Tuple[str, int]] = {}
    fields = ExperimentConfig.model_fields
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", line=n)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ContractError(f"line {n}: unknown config key '{key}'")
        values[key] = (value, n)
    return values


def load_config(path: Optional[Union[str, Path]] = None, **overrides) -> ExperimentConfig:
    """Defaults, then the file (if any), then explicit overrides that are not None."""
    parsed: Dict[str, Tuple[str, int]] = {}
    if path is not None:
        parsed = parse_config_lines(Path(path).read_text(encoding="utf-8").splitlines())
    values: Dict[str, object] = {key: value for key, (value, _) in parsed.items()}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except ValidationError as exc:
        problems = []
        for error in exc.errors():
            key = str(error["loc"][0]) if error["loc"] else ""
            where = f"line {parsed[key][1]}: " if key in parsed and key not in overrides else ""
            problems.append(f"{where}{key or 'config'}: {error['msg']}")
        raise ContractError("invalid configuration: " + "; ".join(problems)) from None


def config_fingerprint(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(canonical.encode("utf-8")).hexdigest()[:12]


def describe_config() -> List[Tuple[str, str, str]]:
    """(key, default, description) for every key."""
    rows = []
    for name, field in ExperimentConfig.model_fields.items():
        default = field.default.value if isinstance(field.default, Enum) else field.default
        if isinstance(default, bool):
            default = str(default).lower()
        rows.append((name, str(default), field.description or ""))
    return rows


def dump_config(config: ExperimentConfig) -> str:
    """The config in its own file format."""
    lines = []
    for key, value in config.model_dump(mode="json").items():
        if isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
