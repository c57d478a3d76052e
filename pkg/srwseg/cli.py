"""
cli.py
------
``srwseg`` command line: ``synthgen``, ``train``, ``eval``, ``selftest`` and
``ablate``.

Exit codes: 0 success, 1 internal error or failed self-test, 2 usage or
configuration error (unknown key, missing corpus or checkpoint, existing output
without ``--force``).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import aiofiles
from pydantic import BaseModel, ValidationError

from ._version import __version__
from .basemodels import AblationRow, CorpusConfig, NetworkConfig, TrainingConfig
from .checkpoint import load_model
from .checks import run_selftest
from .enums import Split
from .evaluation import evaluate, export_overlays, export_report
from .exceptions import (
    CheckpointError,
    ConfigError,
    DatasetError,
    OutputExistsError,
    SRWSegBase,
)
from .synthdata import build_corpus, load_dataset
from .training import train
from .utils import (
    config_key_help,
    default_cache_dir,
    finalize_output,
    make_staging_dir,
    parse_flat_config,
    route_config_values,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ABLATION_STAGES",
    "load_settings",
    "format_ablation_table",
    "build_parser",
    "run",
    "main",
]

CONFIG_MODELS: Dict[str, type[BaseModel]] = {
    "training": TrainingConfig,
    "network": NetworkConfig,
    "corpus": CorpusConfig,
}
ABLATION_STAGES: Tuple[List[int], ...] = ([], [1], [1, 2], [1, 2, 3])

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def load_settings(
    config_path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> Tuple[TrainingConfig, NetworkConfig, CorpusConfig]:
    """
    Build the three config models from a flat config file, ``key=value``
    overrides and the ``--seed`` flag, in that order of precedence (last wins).

    :raises ConfigError: Unknown key, unreadable file or invalid value.
    """
    values = {}
    if config_path is not None:
        try:
            text = Path(config_path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config file {config_path}: {e}") from e
        values.update(parse_flat_config(text.splitlines(), str(config_path)))
    values.update(parse_flat_config(overrides, "--set"))
    if seed is not None:
        values["seed"] = seed

    routed = route_config_values(values, CONFIG_MODELS)
    try:
        return (
            TrainingConfig.model_validate(routed["training"]),
            NetworkConfig.model_validate(routed["network"]),
            CorpusConfig.model_validate(routed["corpus"]),
        )
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _default_corpus(corpus: CorpusConfig) -> Path:
    return default_cache_dir() / f"corpus-seed{corpus.seed}"


def _stage_tag(stages: Sequence[int]) -> str:
    return "srw-" + ("-".join(map(str, stages)) if stages else "none")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


async def _cmd_synthgen(args, training, network, corpus) -> int:
    output = Path(args.output) if args.output else _default_corpus(corpus)
    manifest = await build_corpus(corpus, output, force=args.force)
    print(f"corpus written to {output}: {json.dumps(manifest.counts)}")
    return EXIT_OK


async def _cmd_train(args, training, network, corpus) -> int:
    corpus_path = Path(args.corpus) if args.corpus else _default_corpus(corpus)
    result = await train(training, corpus_path, network, args.output, force=args.force)
    print(f"last checkpoint: {result.last_checkpoint}")
    if result.best_checkpoint:
        print(f"best checkpoint: {result.best_checkpoint} (val iou {result.best_val_iou:.4f})")
    return EXIT_OK


async def _cmd_eval(args, training, network, corpus) -> int:
    checkpoint = Path(args.checkpoint)
    model, _ = load_model(checkpoint, device=training.device)
    corpus_path = Path(args.corpus) if args.corpus else _default_corpus(corpus)
    splits = [Split(args.split)] if args.split else [Split.TEST_SOURCE, Split.TEST_TARGET]
    report_dir = Path(args.report_dir) if args.report_dir else checkpoint.parent / "reports"

    for split in splits:
        dataset = load_dataset(corpus_path, split)
        report = evaluate(model, dataset, split, model_id=str(checkpoint))
        await export_report(report, report_dir / f"{split.value}.json")
        if args.overlays:
            await export_overlays(model, dataset, Path(args.overlays) / split.value, args.overlay_limit)
        summary = "  ".join(
            f"{name}={m.mean:.4f}±{m.std:.4f}" for name, m in report.metrics.items()
        )
        print(f"{split.value} (n={report.n}): {summary}")
    return EXIT_OK


async def _cmd_selftest(args, training, network, corpus) -> int:
    report = await asyncio.to_thread(run_selftest, training.seed)
    print(report.table())
    return EXIT_OK if report.passed else EXIT_INTERNAL


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = ["srw_stages   target_iou        source_iou"]
    for row in rows:
        stages = "{" + ",".join(map(str, row.srw_stages)) + "}"
        lines.append(
            f"{stages:<12} {row.target_iou:.4f}±{row.target_iou_std:.4f}   {row.source_iou:.4f}"
        )
    return "\n".join(lines)


async def _cmd_ablate(args, training, network, corpus) -> int:
    corpus_path = Path(args.corpus) if args.corpus else _default_corpus(corpus)
    output = Path(args.output)
    if output.exists() and not args.force:
        raise OutputExistsError(output)
    target_set = load_dataset(corpus_path, Split.TEST_TARGET)
    source_set = load_dataset(corpus_path, Split.TEST_SOURCE)

    staging = make_staging_dir(output)
    rows: List[AblationRow] = []
    try:
        for stages in ABLATION_STAGES:
            run_network = network.model_copy(update={"srw_stages": list(stages), "isw_stages": None})
            run_dir = staging / _stage_tag(stages)
            logger.info("Ablation run srw_stages=%s", stages)
            result = await train(training, corpus_path, run_network, run_dir, force=True)
            checkpoint = Path(result.best_checkpoint or result.last_checkpoint)
            model, _ = load_model(checkpoint, device=training.device)
            target = evaluate(model, target_set, Split.TEST_TARGET, model_id=checkpoint.name)
            source = evaluate(model, source_set, Split.TEST_SOURCE, model_id=checkpoint.name)
            rows.append(
                AblationRow(
                    srw_stages=list(stages),
                    target_iou=target.mean("iou"),
                    target_iou_std=target.metrics["iou"].std,
                    source_iou=source.mean("iou"),
                    checkpoint=str(output / run_dir.name / checkpoint.name),
                )
            )
        async with aiofiles.open(staging / "ablation.json", "w") as f:
            await f.write(json.dumps([r.model_dump() for r in rows], indent=2))
    except BaseException:
        await asyncio.to_thread(shutil.rmtree, staging, True)
        raise
    await finalize_output(staging, output, force=args.force)
    print(format_ablation_table(rows))
    return EXIT_OK


COMMANDS = {
    "synthgen": _cmd_synthgen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "selftest": _cmd_selftest,
    "ablate": _cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'key = value' config file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = _Parser(
        prog="srwseg",
        description="Style normalization and whitening for domain-generalized lesion segmentation.",
        epilog="config keys (--config / --set):\n" + config_key_help(CONFIG_MODELS),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synthgen", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--output", help="corpus directory (default: $SRWSEG_CACHE/corpus-seed<seed>)")
    p.add_argument("--force", action="store_true", help="replace an existing corpus")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--output", default="runs/srw", help="run directory")
    p.add_argument("--force", action="store_true", help="replace an existing run directory")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--split", choices=[s.value for s in Split], help="default: both test splits")
    p.add_argument("--report-dir", help="report directory (default: <checkpoint dir>/reports)")
    p.add_argument("--overlays", help="write prediction overlays under this directory")
    p.add_argument("--overlay-limit", type=int, default=16)

    sub.add_parser("selftest", parents=[common], help="gradient checks and property oracles")

    p = sub.add_parser("ablate", parents=[common], help="sweep SRW placement")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--output", default="runs/ablate", help="sweep directory")
    p.add_argument("--force", action="store_true", help="replace an existing sweep directory")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run one command; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = load_settings(args.config, args.overrides, args.seed)
        return asyncio.run(COMMANDS[args.command](args, *settings))
    except (ConfigError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE if e.reason == "file not found" else EXIT_INTERNAL
    except SRWSegBase as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except KeyboardInterrupt:
        return 130
    except Exception:
        logger.exception("Unexpected failure")
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
