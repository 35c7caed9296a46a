import argparse
import copy
import sys
from typing import Any, Callable, Dict, List, Optional

import torch
from aws_lambda_powertools import Logger
from pydantic import ValidationError

from common.config import log_level, output_dir_override
from common.decorator import EXIT_INTERNAL_ERROR, EXIT_VALIDATION_ERROR, cli_command
from common.errors import (
    ArtifactMissingError,
    ConfigurationError,
    CorruptDataError,
    DbgcError,
    ManifestLockedError,
    MissingChannelError,
    NumericalError,
    TrainingDivergedError,
)
from dbgc import commands
from dbgc.artifact_store import ArtifactStore
from dbgc.config import PipelineConfig

logger = Logger(service="dbgc", level=log_level())

VERBS = ("prepare", "segment", "pretrain", "train", "evaluate", "run-all", "compare")

# which config sections `--epochs` overrides per verb
EPOCH_TARGETS = {
    "pretrain": ("graphmae",),
    "train": ("fusion",),
    "run-all": ("graphmae", "fusion"),
    "compare": ("graphmae", "fusion"),
}

ERROR_STATUS = (
    (ConfigurationError, EXIT_VALIDATION_ERROR),
    (ValidationError, EXIT_VALIDATION_ERROR),
    (MissingChannelError, 3),
    (ArtifactMissingError, 3),
    (CorruptDataError, 4),
    (TrainingDivergedError, 5),
    (NumericalError, 5),
    (ManifestLockedError, 6),
    (DbgcError, 7),
    (Exception, EXIT_INTERNAL_ERROR),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbgc",
        description="Dual-branch superpixel-graph / patch-CNN PolSAR classifier",
    )
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", help="JSON pipeline config file")
    parser.add_argument("--out", help="output directory (overrides config and DBGC_OUT_DIR)")
    parser.add_argument("--seed", type=int, help="root seed")
    parser.add_argument("--alpha", type=float, help="fusion weight of the superpixel branch")
    parser.add_argument("--epochs", type=int, help="epochs of the stage being run")
    parser.add_argument("--k-target", dest="k_target", type=int, help="target number of superpixels")
    return parser


def _set(data: Dict[str, Any], dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = data
    for name in parents:
        child = node.get(name)
        if not isinstance(child, dict):
            child = {}
            node[name] = child
        node = child
    node[leaf] = value


def resolve_config(args) -> PipelineConfig:
    """defaults < config file < DBGC_OUT_DIR < command-line flags"""
    data = copy.deepcopy(args.config or {})
    if not isinstance(data, dict):
        raise ConfigurationError("The config file must hold a JSON object")
    env_out = output_dir_override()
    if env_out is not None:
        data["output_dir"] = env_out
    if args.out is not None:
        data["output_dir"] = args.out
    if args.seed is not None:
        data["seed"] = args.seed
    if args.alpha is not None:
        _set(data, "fusion.alpha", args.alpha)
    if args.k_target is not None:
        _set(data, "superpixel.k_target", args.k_target)
    if args.epochs is not None:
        targets = EPOCH_TARGETS.get(args.verb)
        if not targets:
            raise ConfigurationError(f"--epochs has no effect on '{args.verb}'")
        for section in targets:
            _set(data, f"{section}.epochs", args.epochs)
    return PipelineConfig.model_validate(data)


def _summary(verb: str, outcome) -> str:
    if isinstance(outcome, dict):
        return "".join(f"{label}: OA={m.oa:.4f} AA={m.aa:.4f}\n" for label, m in outcome.items())
    if hasattr(outcome, "oa"):
        return f"OA={outcome.oa:.4f} AA={outcome.aa:.4f}\n"
    return f"{verb}: wrote {', '.join(outcome)}\n"


def build_cli(store_factory: Callable[..., ArtifactStore] = ArtifactStore):
    dispatch = {
        "prepare": commands.cmd_prepare,
        "segment": commands.cmd_segment,
        "pretrain": commands.cmd_pretrain,
        "train": commands.cmd_train,
        "evaluate": commands.cmd_evaluate,
        "run-all": commands.run_all,
        "compare": commands.compare,
    }

    @cli_command(error_status=ERROR_STATUS, logging_fn=logger.error)
    def run(args) -> None:
        config = resolve_config(args)
        logger.append_keys(verb=args.verb, seed=config.seed)
        logger.info("Running command", extra={"output_dir": config.output_dir})
        store = store_factory(config.output_dir, logger=logger)
        outcome = dispatch[args.verb](config, store=store, run_logger=logger)
        sys.stdout.write(_summary(args.verb, outcome))

    return run


def main(argv: Optional[List[str]] = None) -> int:
    torch.use_deterministic_algorithms(True, warn_only=True)
    args = build_parser().parse_args(argv)
    return build_cli()(args)
