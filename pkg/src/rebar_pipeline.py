#!/usr/bin/env python3
"""
REBAR pipeline

Learns a retrieval-based reconstruction distance between time-series
subsequences, uses it to label positive/negative pairs for contrastive
encoder training, and evaluates both the measure and the learned embeddings.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from models.reports import ErrorResponse
from services.pipeline import MEASURES, PipelineService
from utils.config import PRESETS, load_run_config
from utils.errors import RebarError
from utils.log import configure_logging

logger = logging.getLogger("rebar_pipeline")


def _common_arguments() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--config', '-c', type=Path, help='Run configuration JSON file')
    parent.add_argument('--preset', choices=sorted(PRESETS), help='Start from published per-dataset settings')
    parent.add_argument(
        '--set',
        dest='overrides',
        action='append',
        default=[],
        metavar='SECTION.KEY=VALUE',
        help='Override one config value (repeatable, applied last)'
    )
    parent.add_argument('--output', '-o', type=Path, help='Run directory (overrides output_dir)')
    parent.add_argument('--force', action='store_true', help='Replace outputs that already exist')
    parent.add_argument('--verbose', '-v', action='store_true', help='Enable debug logging')
    return parent


def build_parser() -> argparse.ArgumentParser:
    """Parser with one subcommand per pipeline stage."""
    common = _common_arguments()
    parser = argparse.ArgumentParser(
        description="Train and certify a learned reconstruction distance for time series",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python rebar_pipeline.py synth --preset synthetic -o runs/demo
  python rebar_pipeline.py train-measure --preset synthetic -o runs/demo
  python rebar_pipeline.py validate-measure --preset synthetic -o runs/demo --measure sliding-mse
  python rebar_pipeline.py train-encoder --preset synthetic -o runs/demo
  python rebar_pipeline.py eval --preset synthetic -o runs/demo
        """
    )
    commands = parser.add_subparsers(dest='command', required=True)

    ingest = commands.add_parser('ingest', parents=[common], help='Import a directory of CSV recordings')
    ingest.add_argument('--csv-dir', type=Path, required=True, help='Directory of <series_id>.csv files')
    ingest.add_argument('--class-names', required=True, help='Comma-separated class names, index order')
    ingest.add_argument('--sample-rate', type=float, required=True, help='Sampling rate in Hz')

    commands.add_parser('synth', parents=[common], help='Generate the synthetic motif dataset')

    train_measure = commands.add_parser('train-measure', parents=[common], help='Train the REBAR network')
    train_measure.add_argument(
        '--linear-qkv',
        action='store_true',
        help='Ablation: pointwise linear query/key/value projections'
    )

    for name, help_text in (
        ('validate-measure', 'Nearest-neighbour confusion matrix and candidate TPR'),
        ('train-encoder', 'Contrastive encoder training with measure-labelled pairs'),
        ('eval', 'Linear probe, clustering and embedding export'),
    ):
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.add_argument('--measure', choices=MEASURES, help='Distance measure (default: evaluation.measure)')
        sub.add_argument('--checkpoint', type=Path, help='Checkpoint to use instead of the run directory default')

    commands.add_parser('mask-study', parents=[common], help='Compare extended and transient training masks')
    return parser


def run_command(args: argparse.Namespace) -> object:
    overrides: List[str] = list(args.overrides)
    if getattr(args, 'linear_qkv', False):
        overrides.append("rebar_train.ablation_linear_qkv=true")
    config = load_run_config(args.config, args.preset, overrides)
    if args.output is not None:
        config.output_dir = str(args.output)
    measure = getattr(args, 'measure', None) or config.evaluation.measure
    checkpoint = getattr(args, 'checkpoint', None)

    service = PipelineService(
        config,
        force=args.force,
        rebar_checkpoint=checkpoint if args.command in ('validate-measure', 'train-encoder') else None,
        encoder_checkpoint=checkpoint if args.command == 'eval' else None,
    )
    logger.debug("Configuration: %s", json.dumps(config.to_dict()))

    if args.command == 'ingest':
        names = [name.strip() for name in args.class_names.split(',') if name.strip()]
        result = service.cmd_ingest(args.csv_dir, names, args.sample_rate)
    elif args.command == 'synth':
        result = service.cmd_synth()
    elif args.command == 'train-measure':
        result = service.cmd_train_measure()
    elif args.command == 'validate-measure':
        result = service.cmd_validate_measure(measure)
    elif args.command == 'train-encoder':
        result = service.cmd_train_encoder(measure)
    elif args.command == 'eval':
        result = service.cmd_eval(measure)
    else:
        result = service.cmd_mask_study()
    logger.debug("Run directory: %s", service.storage_summary())
    return result


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point. Returns the process exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        result = run_command(args)
    except RebarError as e:
        print(ErrorResponse(error=e.to_dict()).model_dump_json(indent=2), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected failure in %s", args.command)
        error = {"code": "INTERNAL_ERROR", "message": str(e), "details": type(e).__name__}
        print(ErrorResponse(error=error).model_dump_json(indent=2), file=sys.stderr)
        return 1

    if isinstance(result, dict):
        for label, path in result.items():
            print(f"{label}: {path}")
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
