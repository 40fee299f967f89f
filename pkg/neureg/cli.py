"""Command-line entry point: synth, preprocess, train, register, evaluate, experiment.

Every successful command prints one RunManifest JSON line on stdout. Failures
print one ``{"code": ..., "message": ...}`` line on stderr and exit with 1 for
invalid input or configuration, 2 for file-system and file-format failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from logging.config import dictConfig
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from pydantic import BaseModel, Field, ValidationError

from neureg.config import RuntimeSettings, TrainConfig, load_system_config
from neureg.domaingen import DEFAULT_PATCH_SIZE, domain_generalize
from neureg.errors import FormatError, InvalidInputError, MissingArgumentError, NeuRegError
from neureg.fourierdecoder import DeformationField
from neureg.lossmetrics import dice, ssim3
from neureg.synthdata import (
    DEFAULT_AMPLITUDE,
    DEFAULT_DIMS,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from neureg.training import (
    load_checkpoint,
    register_pair,
    run_dg_ablation,
    run_leave_one_domain_out,
    save_checkpoint,
    train,
)
from neureg.utils import load_domain_specs, persist_metric, sha256_file
from neureg.volume import LabelVolume, Volume3, load_raw, save_raw
from neureg.warp import jacobian_stats, warp_labels

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2

DEFAULT_LOG_FORMAT = "[%(asctime)s] %(levelname)s in %(module)s: %(message)s"
DEFAULT_PATHS = {
    "default_config": "./configuration/config.json",
    "domains_dir": "./configuration/domains",
}


class RunManifest(BaseModel):
    """Record of one command invocation."""

    command: str
    config: dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    input_hashes: dict[str, str] = Field(default_factory=dict)
    outputs: dict[str, str] = Field(default_factory=dict)
    wall_time_s: float = 0.0
    metrics: dict[str, Any] = Field(default_factory=dict)


class CommandResult(BaseModel):
    config: dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    inputs: list[str] = Field(default_factory=list)
    outputs: dict[str, str] = Field(default_factory=dict)
    metrics: dict[str, Any] = Field(default_factory=dict)


class ArgumentError(Exception):
    def __init__(self, message: str, usage: str) -> None:
        super().__init__(message)
        self.usage = usage


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ArgumentError(message, self.format_usage())


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def int_list(text: str) -> list[int]:
    """argparse type for comma-separated integers."""
    try:
        return [int(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def grid_dims(text: str) -> tuple[int, int, int]:
    """argparse type for three positive voxel extents, e.g. ``32,40,48``."""
    dims = int_list(text)
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive extents, got {text!r}")
    return dims[0], dims[1], dims[2]


def finite_or_none(value: Any) -> Any:
    """Replace NaN/inf (recursively) with None so reports stay valid JSON."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): finite_or_none(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [finite_or_none(v) for v in value]
    return value


def _write_json(path: str | Path, payload: dict[str, Any]) -> None:
    Path(path).write_text(json.dumps(finite_or_none(payload), indent=2, sort_keys=True))


def _load_image(path: str) -> Volume3:
    volume = load_raw(path)
    if not isinstance(volume, Volume3):
        raise InvalidInputError(f"{path}: expected an intensity volume, got {type(volume).__name__}")
    return volume


def _load_labels(path: str) -> LabelVolume:
    volume = load_raw(path)
    if not isinstance(volume, LabelVolume):
        raise InvalidInputError(f"{path}: expected a label volume, got {type(volume).__name__}")
    return volume


def _load_field(path: str) -> DeformationField:
    volume = load_raw(path)
    if not isinstance(volume, DeformationField):
        raise InvalidInputError(f"{path}: expected a displacement field, got {type(volume).__name__}")
    return volume


def _require_pair(args: argparse.Namespace, first: str, second: str) -> bool:
    a, b = getattr(args, first), getattr(args, second)
    if (a is None) != (b is None):
        flags = [f"--{n.replace('_', '-')}" for n in (first, second)]
        raise MissingArgumentError(f"{flags[0]} and {flags[1]} go together; one is missing")
    return a is not None


def _train_config(args: argparse.Namespace, paths: dict[str, str]) -> TrainConfig:
    config = TrainConfig.from_json(args.config or paths["default_config"])
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    return config


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, paths: dict[str, str]) -> CommandResult:
    names = [n.strip() for n in args.domains.split(",")] if args.domains else None
    specs = load_domain_specs(paths["domains_dir"], names)
    if names is not None and len(specs) != len(names):
        found = {s.name for s in specs}
        raise InvalidInputError(f"unknown domains: {[n for n in names if n not in found]}")
    seed = args.seed if args.seed is not None else 0
    dims = args.dims
    dataset = generate_dataset(
        args.subjects,
        specs,
        seed,
        dims,
        args.amplitude,
        show_progress=not args.quiet,
    )
    manifest = save_dataset(dataset, args.out, seed)
    return CommandResult(
        config={
            "subjects": args.subjects,
            "domains": [s.name for s in specs],
            "dims": list(dims),
            "amplitude": args.amplitude,
        },
        seed=seed,
        outputs={"manifest": str(manifest)},
        metrics={"n_samples": len(dataset.samples)},
    )


def cmd_preprocess(args: argparse.Namespace, paths: dict[str, str]) -> CommandResult:
    volume = _load_image(args.input)
    result = domain_generalize(volume, args.patch_size)
    save_raw(result.as_volume(), args.out)
    return CommandResult(
        config={"patch_size": args.patch_size},
        inputs=[args.input],
        outputs={"out": args.out},
        metrics={"max": float(result.data.max()), "mean": float(result.data.mean())},
    )


def cmd_train(args: argparse.Namespace, paths: dict[str, str]) -> CommandResult:
    config = _train_config(args, paths)
    dataset = load_dataset(args.data)
    checkpoint = train(dataset, config, show_progress=not args.quiet)
    save_checkpoint(checkpoint, args.out)
    outputs = {"checkpoint": args.out}
    if args.metrics_dir:
        df = checkpoint.history_frame()
        outputs["history"] = persist_metric(
            "history", ["epoch", "train_loss", "val_loss"], df, output_path=args.metrics_dir
        )
    return CommandResult(
        config=config.model_dump(mode="json", by_alias=True),
        seed=config.seed,
        inputs=[str(Path(args.data) / "manifest.json")],
        outputs=outputs,
        metrics={
            "best_epoch": checkpoint.epoch,
            "best_val_loss": checkpoint.best_val_loss,
            "epochs_run": checkpoint.history[-1].epoch if checkpoint.history else 0,
        },
    )


def cmd_register(args: argparse.Namespace, paths: dict[str, str]) -> CommandResult:
    with_labels = _require_pair(args, "moving_labels", "out_labels")
    fixed = _load_image(args.fixed)
    moving = _load_image(args.moving)
    checkpoint = load_checkpoint(args.checkpoint)
    result = register_pair(fixed, moving, checkpoint)
    save_raw(result.warped, args.out_warped)
    save_raw(result.field, args.out_field)
    inputs = [args.fixed, args.moving, args.checkpoint]
    outputs = {"warped": args.out_warped, "field": args.out_field}
    if with_labels:
        labels = _load_labels(args.moving_labels)
        save_raw(warp_labels(labels, result.field), args.out_labels)
        inputs.append(args.moving_labels)
        outputs["labels"] = args.out_labels
    jac = jacobian_stats(result.field)
    return CommandResult(
        config=checkpoint.train_config.model_dump(mode="json", by_alias=True),
        seed=checkpoint.train_config.seed,
        inputs=inputs,
        outputs=outputs,
        metrics={"jacobian_min": jac.min_det, "jacobian_nonpos_fraction": jac.nonpos_fraction},
    )


def cmd_evaluate(args: argparse.Namespace, paths: dict[str, str]) -> CommandResult:
    with_labels = _require_pair(args, "fixed_labels", "warped_labels")
    fixed = _load_image(args.fixed)
    warped = _load_image(args.warped)
    inputs = [args.fixed, args.warped]
    report: dict[str, Any] = {
        "ssim": ssim3(fixed, warped),
        "dice_mean": None,
        "dice_per_label": None,
        "jacobian_min": None,
        "jacobian_nonpos_fraction": None,
    }
    if with_labels:
        scores = dice(_load_labels(args.fixed_labels), _load_labels(args.warped_labels))
        report["dice_mean"] = scores.mean
        report["dice_per_label"] = {str(k): v for k, v in scores.per_label.items()}
        inputs += [args.fixed_labels, args.warped_labels]
    if args.field:
        jac = jacobian_stats(_load_field(args.field))
        report["jacobian_min"] = jac.min_det
        report["jacobian_nonpos_fraction"] = jac.nonpos_fraction
        inputs.append(args.field)
    _write_json(args.report, report)
    return CommandResult(inputs=inputs, outputs={"report": args.report}, metrics=report)


def cmd_experiment(args: argparse.Namespace, paths: dict[str, str]) -> CommandResult:
    config = _train_config(args, paths)
    dataset = load_dataset(args.data)
    show = not args.quiet
    if args.mode == "ablation":
        result = run_dg_ablation(dataset, config, args.seeds, args.max_pairs, args.threads, show)
    else:
        result = run_leave_one_domain_out(dataset, config, args.max_pairs, args.threads, show)
    _write_json(args.report, {"mode": args.mode, **result.to_dict()})
    outputs = {"report": args.report}
    if args.metrics_dir:
        outputs["table"] = persist_metric(
            f"experiment_{args.mode}", list(result.table.columns), result.table, args.metrics_dir
        )
    return CommandResult(
        config=config.model_dump(mode="json", by_alias=True),
        seed=config.seed,
        inputs=[str(Path(args.data) / "manifest.json")],
        outputs=outputs,
        metrics=result.summary,
    )


COMMANDS: dict[str, Callable[[argparse.Namespace, dict[str, str]], CommandResult]] = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
}


# ---------------------------------------------------------------------------
# Parser, logging and dispatch
# ---------------------------------------------------------------------------


def build_parser(settings: RuntimeSettings) -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Override the random seed")
    common.add_argument(
        "--threads", type=int, default=settings.threads, help="Evaluation worker threads"
    )
    common.add_argument("--quiet", action="store_true", help="Only warnings and errors on stderr")
    common.add_argument("--manifest", type=str, default=None, help="Also write the manifest here")
    common.add_argument(
        "--log-file", type=str, default=None, help="Also log to this file (overrides config.yaml)"
    )

    parser = CliParser(prog="neureg", description="Domain-generalized deformable 3D registration")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CliParser)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic multi-domain dataset")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--subjects", type=int, default=8, help="Number of subjects")
    p.add_argument("--domains", type=str, default=None, help="Comma-separated domain names")
    p.add_argument(
        "--dims", type=grid_dims, default=",".join(str(d) for d in DEFAULT_DIMS), help="W,H,D extents"
    )
    p.add_argument("--amplitude", type=float, default=DEFAULT_AMPLITUDE, help="Voxel scale")

    p = sub.add_parser("preprocess", parents=[common], help="Apply the domain-generalization layer")
    p.add_argument("--in", dest="input", required=True, help="Input volume")
    p.add_argument("--out", required=True, help="Output volume")
    p.add_argument("--patch-size", type=int, default=DEFAULT_PATCH_SIZE)

    p = sub.add_parser("train", parents=[common], help="Train the encoder")
    p.add_argument("--config", type=str, default=None, help="TrainConfig JSON")
    p.add_argument("--data", required=True, help="Dataset directory written by synth")
    p.add_argument("--out", required=True, help="Checkpoint path")
    p.add_argument("--metrics-dir", type=str, default=None, help="Write the loss history CSV here")

    p = sub.add_parser("register", parents=[common], help="Register a moving volume to a fixed one")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-warped", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--moving-labels", default=None)
    p.add_argument("--out-labels", default=None)

    p = sub.add_parser("evaluate", parents=[common], help="Score a registration")
    p.add_argument("--fixed", required=True)
    p.add_argument("--warped", required=True)
    p.add_argument("--fixed-labels", default=None)
    p.add_argument("--warped-labels", default=None)
    p.add_argument("--field", default=None, help="Deformation field for Jacobian statistics")
    p.add_argument("--report", required=True, help="JSON report path")

    p = sub.add_parser("experiment", parents=[common], help="Cross-domain experiment protocols")
    p.add_argument("--data", required=True)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--mode", choices=["ablation", "lodo"], default="ablation")
    p.add_argument("--seeds", type=int_list, default="0,1,2", help="Comma-separated seeds (ablation)")
    p.add_argument("--max-pairs", type=int, default=None, help="Test pairs per unseen domain")
    p.add_argument("--report", required=True)
    p.add_argument("--metrics-dir", type=str, default=None)
    return parser


def configure_logging(
    system_config: dict[str, Any],
    quiet: bool,
    level_override: Optional[str],
    log_file: Optional[str] = None,
) -> None:
    """Stderr handler plus, when a file is configured or passed, a rotating log file."""
    log = dict(system_config.get("logging") or {})
    if log_file:
        log["file"] = log_file
    level = level_override or log.get("level", "INFO")
    handlers: dict[str, dict[str, Any]] = {
        "stderr": {
            "class": "logging.StreamHandler",
            "formatter": "default",
            "level": "WARNING" if quiet else level,
            "stream": "ext://sys.stderr",
        }
    }
    if log.get("file"):
        Path(log["file"]).parent.mkdir(parents=True, exist_ok=True)
        handlers["file"] = {
            "class": "logging.handlers.RotatingFileHandler",
            "formatter": "default",
            "level": level,
            "filename": log["file"],
            "mode": "a",
            "encoding": "utf-8",
            "maxBytes": log.get("max_bytes", 2500000),
            "backupCount": log.get("backup_count", 3),
        }
    dictConfig(
        {
            "version": 1,
            "disable_existing_loggers": False,
            "formatters": {
                "default": {"format": log.get("format", DEFAULT_LOG_FORMAT)}
            },
            "handlers": handlers,
            "root": {"level": level, "handlers": list(handlers)},
        }
    )


def _fail(code: str, message: str, exit_code: int) -> int:
    print(json.dumps({"code": code, "message": message}), file=sys.stderr)
    return exit_code


def main(argv: Optional[Sequence[str]] = None, system_config_path: Optional[str] = None) -> int:
    """Parse ``argv``, run one subcommand and return the process exit code."""
    settings = RuntimeSettings()
    config_path = Path(system_config_path or settings.system_config)
    system_config = load_system_config(config_path) if config_path.exists() else {}
    paths = {**DEFAULT_PATHS, **(system_config.get("paths") or {})}

    parser = build_parser(settings)
    try:
        args = parser.parse_args(argv)
    except ArgumentError as e:
        message = str(e)
        if "required" in message:
            return _fail(MissingArgumentError.code, message, EXIT_INVALID)
        print(e.usage, file=sys.stderr, end="")
        return _fail(InvalidInputError.code, message, EXIT_INVALID)
    if args.command is None:
        print(parser.format_usage(), file=sys.stderr, end="")
        return _fail(MissingArgumentError.code, "no command given", EXIT_INVALID)

    configure_logging(system_config, args.quiet, settings.log_level, args.log_file)
    started = time.perf_counter()
    try:
        result = COMMANDS[args.command](args, paths)
    except ValidationError as e:
        return _fail("invalid_config", " ".join(str(e).split()), EXIT_INVALID)
    except json.JSONDecodeError as e:
        return _fail("invalid_config", str(e), EXIT_INVALID)
    except FormatError as e:
        return _fail(e.code, str(e), EXIT_IO)
    except NeuRegError as e:
        return _fail(e.code, str(e), EXIT_INVALID)
    except OSError as e:
        return _fail("io_error", str(e), EXIT_IO)

    manifest = RunManifest(
        command=args.command,
        config=result.config,
        seed=result.seed,
        input_hashes={p: sha256_file(p) for p in result.inputs},
        outputs=result.outputs,
        wall_time_s=round(time.perf_counter() - started, 3),
        metrics=finite_or_none(result.metrics),
    )
    line = manifest.model_dump_json()
    print(line)
    if args.manifest:
        Path(args.manifest).write_text(line + "\n")
    logging.info(f"{args.command} finished in {manifest.wall_time_s:.1f}s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
