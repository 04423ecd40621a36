"""
Counting-model ablation: train every variant with the same seeds and budget,
then compare RMSE on the two test splits.
"""
import csv
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

from pydantic import BaseModel, Field

from harness.config import ExperimentConfig, ModelKind
from harness.training import (
    ExperimentData,
    evaluate_model,
    load_experiment,
    mean_predictor_rmse,
    train,
)
from models.counting_model import CountingVariant

logger = logging.getLogger(__name__)

ABLATION_FILE = "ablation.csv"
TEST_SPLITS = ("test-seen", "test-synonym")
MEAN_PREDICTOR = "mean_predictor"
SEMANTIC_GAP_RATIO = 0.8


class AblationRow(BaseModel):
    variant: str
    split: str
    rmse: float = Field(..., ge=0.0)
    raw_rmse: Optional[float] = Field(None, ge=0.0)


class AblationTable(BaseModel):
    fingerprint: str
    rows: List[AblationRow] = []

    def rmse(self, variant: str, split: str) -> Optional[float]:
        for row in self.rows:
            if row.variant == variant and row.split == split:
                return row.rmse
        return None

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(("variant", "split", "rmse", "raw_rmse"))
            for row in self.rows:
                writer.writerow((row.variant, row.split, repr(row.rmse), "" if row.raw_rmse is None else repr(row.raw_rmse)))

    def render(self) -> str:
        variants = list(dict.fromkeys(row.variant for row in self.rows))
        lines = [f"{'variant':<20}" + "".join(f"{split:>14}" for split in TEST_SPLITS)]
        for variant in variants:
            cells = []
            for split in TEST_SPLITS:
                value = self.rmse(variant, split)
                cells.append(f"{'-' if value is None else f'{value:.4f}':>14}")
            lines.append(f"{variant:<20}" + "".join(cells))
        return "\n".join(lines)


def ablate(
    config: ExperimentConfig,
    data_dir: Union[str, Path],
    out_dir: Union[str, Path],
    variants: Sequence[CountingVariant] = tuple(CountingVariant),
    data: Optional[ExperimentData] = None,
) -> AblationTable:
    """
    The full model always runs first; each variant trains into out_dir/<variant>.
    A mean-count predictor row is added per split for reference.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data if data is not None else load_experiment(data_dir, config)
    ordered = [CountingVariant.FULL] + [v for v in variants if v != CountingVariant.FULL]

    base = config.model_copy(update={"model": ModelKind.COUNTING})
    table = AblationTable(fingerprint="")
    for variant in ordered:
        variant_config = base.model_copy(update={"variant": variant})
        result = train(variant_config, data_dir, out / variant.value, data=data)
        if variant == CountingVariant.FULL:
            table.fingerprint = result.fingerprint
        for split in TEST_SPLITS:
            if not data.split(split):
                continue
            record = evaluate_model(ModelKind.COUNTING, result.model, data, split, result.fingerprint)
            table.rows.append(AblationRow(variant=variant.value, split=split, rmse=record.rmse, raw_rmse=record.raw_rmse))
            logger.info("ablation %-18s %-12s rmse=%.4f", variant.value, split, record.rmse)

    for split in TEST_SPLITS:
        if data.split(split):
            table.rows.append(
                AblationRow(variant=MEAN_PREDICTOR, split=split, rmse=mean_predictor_rmse(data.answers(data.split(split))))
            )
    table.write_csv(out / ABLATION_FILE)
    return table


def check_ablation_directions(table: AblationTable) -> List[str]:
    """
    Failed ordering claims; an empty list means every checkable claim held.
    Claims involving a variant that was not run are skipped.
    """
    failures: List[str] = []
    full = CountingVariant.FULL.value

    def compare(worse: str, better: str, split: str, ratio: float = 1.0) -> None:
        w, b = table.rmse(worse, split), table.rmse(better, split)
        if w is None or b is None:
            logger.info("skipping %s vs %s on %s: not run", worse, better, split)
            return
        held = b <= ratio * w if ratio != 1.0 else b < w
        if not held:
            bound = f"{ratio:g} x " if ratio != 1.0 else ""
            failures.append(f"{split}: expected {better} ({b:.4f}) < {bound}{worse} ({w:.4f})")

    compare(CountingVariant.NO_L.value, full, "test-synonym", SEMANTIC_GAP_RATIO)
    compare(CountingVariant.ONEHOT_SEPARATE.value, CountingVariant.ONEHOT_SHARED.value, "test-synonym")
    compare(CountingVariant.ONEHOT_SHARED.value, full, "test-synonym")
    compare(CountingVariant.LINEAR_REGRESSION.value, full, "test-seen")
    compare(CountingVariant.NO_COATTENTION.value, full, "test-seen")
    return failures

