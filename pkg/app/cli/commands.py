from __future__ import annotations

import sys
from typing import Callable, Dict

from app.core import core
from app.core.config import logger
from app.core.errors import CheckpointError, ConfigError, DfkdError, RunAbortedError
from app.core.models import Config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_ABORTED = 4


def exit_code(error: DfkdError) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, CheckpointError):
        return EXIT_CHECKPOINT
    if isinstance(error, RunAbortedError):
        return EXIT_ABORTED
    return EXIT_ERROR


def cmd_pretrain(config: Config) -> int:
    result = core.pretrain_logic(config)
    print(f"teacher checkpoint: {result['checkpoint']} test accuracy: {result['test_accuracy']}")
    return EXIT_OK


def cmd_distill(config: Config) -> int:
    report = core.distill_logic(config)
    print(f"final accuracy: {report.final_accuracy} best: {report.best_accuracy} -> {report.last_checkpoint}")
    return EXIT_OK


def cmd_evaluate(config: Config) -> int:
    print(f"{core.evaluate_logic(config):.6f}")
    return EXIT_OK


def cmd_emit_samples(config: Config) -> int:
    print(core.emit_samples_logic(config))
    return EXIT_OK


def cmd_ablate(config: Config) -> int:
    summary = core.ablate_logic(config)
    print(summary.to_string(index=False))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[Config], int]] = {
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "emit-samples": cmd_emit_samples,
    "ablate": cmd_ablate,
}


def dispatch(command: str, config: Config) -> int:
    logger.info(f"Starting {command}")
    try:
        status = COMMANDS[command](config)
    except DfkdError as e:
        logger.error(f"{command} failed: {e.detail}")
        print(f"error: {e.detail}", file=sys.stderr)
        return exit_code(e)
    logger.info(f"Finished {command}")
    return status
