"""
Command-line surface.

    python cli.py [--seed N] [--config FILE] [--out DIR] <command> [options]

Commands: gen-data, train, eval, ablate, grad-check, inspect-attention,
serve, show-config. Exit status is 0 on success, 1 on a contract or parse
error and 2 when an acceptance threshold is missed.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import uvicorn

from core.errors import AcceptanceFailure, ContractError, LatError
from harness.ablation import ablate, check_ablation_directions
from harness.checkpoints import CHECKPOINT_FILE, VOCAB_FILE, load_checkpoint
from harness.config import ExperimentConfig, ModelKind, describe_config, dump_config, load_config
from harness.gradcheck_suite import DEFAULT_TOLERANCE, run_suite
from harness.inspection import inspect_attention
from harness.training import evaluate, train
from harness.world import generate_world, load_dataset, load_table, load_world_info, record_features
from main import create_app
from models.captioning_model import CaptionVocabulary
from models.counting_model import CountingVariant

logger = logging.getLogger("lat")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lat", description="Linguistically-aware attention experiments")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--config", type=Path, default=None, help="key=value config file")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-data", help="generate the synthetic world into --out")

    p = commands.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", choices=[k.value for k in ModelKind], default=None)
    p.add_argument("--variant", choices=[v.value for v in CountingVariant], default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = commands.add_parser("eval", help="evaluate a trained run on one split")
    p.add_argument("--checkpoint", type=Path, required=True, help="run directory written by train")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test-seen")
    p.add_argument("--max-rmse", type=float, default=None, help="exit 2 if RMSE exceeds this")

    p = commands.add_parser("ablate", help="train and compare counting-model variants")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument(
        "--variants",
        default=",".join(v.value for v in CountingVariant if v != CountingVariant.FULL),
        help="comma-separated variants; the full model always runs",
    )
    p.add_argument("--check", action="store_true", help="exit 2 unless the expected orderings hold")

    p = commands.add_parser("grad-check", help="finite-difference check of every op and model")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--ops-only", action="store_true")

    p = commands.add_parser("inspect-attention", help="dump attention weights for one sample as JSON")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--index", type=int, default=0, help="line index into the dataset")

    p = commands.add_parser("serve", help="serve trained models over HTTP")
    p.add_argument("--model-dir", type=Path, default=None)
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)

    p = commands.add_parser("show-config", help="list every config key with its default")
    p.add_argument("--resolved", action="store_true", help="print the effective config instead")
    return parser


# ============================================================================
# Commands
# ============================================================================

def cmd_gen_data(args: argparse.Namespace, config: ExperimentConfig) -> int:
    info = generate_world(config, args.out, progress=True)
    print(f"wrote {args.out} (fingerprint {info.fingerprint})")
    return 0


def cmd_train(args: argparse.Namespace, config: ExperimentConfig) -> int:
    result = train(config, args.data, args.out, progress=True)
    best = [r for r in result.metrics if r.epoch == result.best_epoch]
    for record in best:
        print(record.model_dump_json())
    return 0


def cmd_eval(args: argparse.Namespace, config: ExperimentConfig) -> int:
    record = evaluate(args.checkpoint, args.data, args.split, config)
    print(record.model_dump_json())
    if args.max_rmse is not None:
        if record.rmse is None:
            raise ContractError("--max-rmse needs a model that reports RMSE")
        if record.rmse > args.max_rmse:
            raise AcceptanceFailure(f"{args.split} RMSE {record.rmse:.4f} exceeds {args.max_rmse}")
    return 0


def cmd_ablate(args: argparse.Namespace, config: ExperimentConfig) -> int:
    try:
        variants = [CountingVariant(v.strip()) for v in args.variants.split(",") if v.strip()]
    except ValueError as exc:
        raise ContractError(f"--variants: {exc}") from None
    table = ablate(config, args.data, args.out, variants)
    print(table.render())
    if args.check:
        failures = check_ablation_directions(table)
        if failures:
            raise AcceptanceFailure("ablation orderings failed: " + "; ".join(failures))
        print("all ablation orderings hold")
    return 0


def cmd_grad_check(args: argparse.Namespace, config: ExperimentConfig) -> int:
    results = run_suite(seed=config.seed, tolerance=args.tolerance, include_models=not args.ops_only)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<18} {r.error:.2e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise AcceptanceFailure(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_inspect(args: argparse.Namespace, config: ExperimentConfig) -> int:
    kind, model, _ = load_checkpoint(args.checkpoint / CHECKPOINT_FILE)
    info = load_world_info(args.data)
    records = load_dataset(args.data, info)
    if not 0 <= args.index < len(records):
        raise ContractError(f"--index must be in 0..{len(records) - 1}")
    scene, question = record_features(records[args.index], load_table(args.data, info), info, config.max_question_len)
    vocabulary = CaptionVocabulary.load(args.checkpoint / VOCAB_FILE) if kind == ModelKind.CAPTION else None
    report = inspect_attention(kind, model, scene, question, vocabulary, config.max_caption_len)
    report["target"] = records[args.index].answer
    print(json.dumps(report, indent=2))
    return 0


def cmd_serve(args: argparse.Namespace, config: ExperimentConfig) -> int:
    uvicorn.run(create_app(args.model_dir), host=args.host, port=args.port)
    return 0


def cmd_show_config(args: argparse.Namespace, config: ExperimentConfig) -> int:
    if args.resolved:
        print(dump_config(config), end="")
        return 0
    for key, default, description in describe_config():
        print(f"{key:<22} {default:<10} {description}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "inspect-attention": cmd_inspect,
    "serve": cmd_serve,
    "show-config": cmd_show_config,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        config = load_config(
            args.config,
            seed=args.seed,
            model=getattr(args, "model", None),
            variant=getattr(args, "variant", None),
            epochs=getattr(args, "epochs", None),
        )
        return COMMANDS[args.command](args, config)
    except LatError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
