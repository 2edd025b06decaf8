"""
WindowContext HAR Engine - Command Line Runner
Subcommands: train, evaluate, loso, sweep, complexity, synth
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config.settings import EXIT_CODES, LOG_FORMAT, runtime_config
from services.data_pipeline import load_dataset
from services.errors import WindowContextError
from services.experiment import (
    DEFAULT_SWEEP_BATCHES,
    complexity_frame,
    complexity_report,
    evaluate_checkpoint,
    load_experiment,
    load_recordings,
    reference_complexity,
    run_batch_sweep,
    run_loso,
    train_full,
    write_json,
    write_results,
)
from services.models import ModelVariant
from services.synth import SynthSpec, synth_generate, write_dataset

logger = logging.getLogger(__name__)


def _int_list(raw: str) -> List[int]:
    try:
        return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from None


def _variant_list(raw: str) -> List[ModelVariant]:
    try:
        return [ModelVariant(x.strip()) for x in raw.split(",") if x.strip()]
    except ValueError:
        choices = ", ".join(v.value for v in ModelVariant)
        raise argparse.ArgumentTypeError(f"unknown variant in {raw!r} (choose from {choices})") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="windowcontext", description=__doc__.strip().splitlines()[0])
    parser.add_argument(
        "--log-level",
        type=str.upper,
        default=runtime_config.log_level.upper(),
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging level (default from WCTX_LOG_LEVEL)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train on every subject and save a checkpoint")
    train.add_argument("--config", required=True, help="experiment TOML file")
    train.add_argument("--checkpoint", help="checkpoint directory (default <output>/checkpoint)")

    evaluate = sub.add_parser("evaluate", help="score a checkpoint on recordings")
    evaluate.add_argument("--config", required=True)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", nargs="+", help="CSV files to score (default: dataset of the config)")

    loso = sub.add_parser("loso", help="multi-seed leave-one-subject-out run")
    loso.add_argument("--config", required=True)
    loso.add_argument("--variants", type=_variant_list, help="comma-separated variants to compare")
    loso.add_argument("--workers", type=int, help="fold-level worker processes")
    loso.add_argument("--dry-run", action="store_true", help="validate config and data, print complexity, do not train")

    sweep = sub.add_parser("sweep", help="LOSO run per train/test batch size")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--batch-sizes", type=_int_list, default=DEFAULT_SWEEP_BATCHES)

    complexity = sub.add_parser("complexity", help="parameters, FLOPs, memory and context length per variant")
    complexity.add_argument("--config", help="experiment TOML file (default: reference configuration)")

    synth = sub.add_parser("synth", help="write a synthetic dataset in the CSV schema")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--subjects", type=int, default=4)
    synth.add_argument("--classes", type=int, default=6)
    synth.add_argument("--channels", type=int, default=3)
    synth.add_argument("--rate", type=float, default=50.0)
    synth.add_argument("--seconds", type=float, default=300.0)
    synth.add_argument("--block-seconds", type=float, default=5.0)
    synth.add_argument("--noise", type=float, default=0.3)
    synth.add_argument("--context-rule", action="store_true")
    synth.add_argument("--seed", type=int, default=0)
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    config = load_experiment(args.config)
    _, losses = train_full(config, checkpoint_dir=args.checkpoint)
    logger.info(f"Training finished, final loss {losses[-1]:.4f}")
    return EXIT_CODES["ok"]


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = load_experiment(args.config)
    recordings = None
    if args.data:
        ds = config.dataset
        recordings = load_dataset(args.data, ds.sampling_rate, ds.resolved_label_map())
    report = evaluate_checkpoint(config, args.checkpoint, recordings)
    path = write_json(report, config.output_path() / "evaluation.json")
    logger.info(f"macro-F1={report.mean_macro_f1} mAP={report.mean_map}, written to {path}")
    return EXIT_CODES["ok"]


def cmd_loso(args: argparse.Namespace) -> int:
    config = load_experiment(args.config)
    if args.variants:
        config = config.model_copy(update={"model": config.model.model_copy(update={"variants": args.variants})})
    recordings = load_recordings(config)
    if args.dry_run:
        print(complexity_frame(complexity_report(config, recordings)).to_string(index=False))
        logger.info("Dry run: configuration and data are valid")
        return EXIT_CODES["ok"]
    result = run_loso(config, recordings, workers=args.workers)
    write_results(result, config.output_path())
    return EXIT_CODES["ok"]


def cmd_sweep(args: argparse.Namespace) -> int:
    config = load_experiment(args.config)
    report = run_batch_sweep(config, args.batch_sizes)
    out = config.output_path()
    write_json(report, out / "sweep.json")
    report.to_frame().to_csv(out / "sweep.csv", index=False)
    print(report.to_frame().to_string(index=False))
    return EXIT_CODES["ok"]


def cmd_complexity(args: argparse.Namespace) -> int:
    if args.config:
        config = load_experiment(args.config)
        rows = complexity_report(config)
        out = config.output_path()
    else:
        rows = reference_complexity()
        out = None
    frame = complexity_frame(rows)
    print(frame.to_string(index=False))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / "complexity.csv", index=False)
    return EXIT_CODES["ok"]


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        n_subjects=args.subjects,
        n_classes=args.classes,
        n_channels=args.channels,
        sampling_rate=args.rate,
        seconds_per_subject=args.seconds,
        block_seconds=args.block_seconds,
        noise=args.noise,
        context_rule=args.context_rule,
        seed=args.seed,
    )
    write_dataset(synth_generate(spec), args.out, spec.n_classes)
    return EXIT_CODES["ok"]


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "loso": cmd_loso,
    "sweep": cmd_sweep,
    "complexity": cmd_complexity,
    "synth": cmd_synth,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        return COMMANDS[args.command](args)
    except WindowContextError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        sys.exit(130)
