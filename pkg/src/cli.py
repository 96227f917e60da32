"""Command-line front door: `python main.py <subcommand> [--config file.json] [--set key=value ...]`."""
import argparse
import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import BaseModel, ValidationError

from src.artifacts import RunDirectory
from src.config import LOG_LEVEL, OUTPUT_DIR
from src.exceptions import InvalidParameterError, LabError
from src.experiments import RUNNERS

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="Boltzmann-Grad numerical lab")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON file with config values")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", type=Path, help="output directory (default: $LAB_OUTPUT_DIR/<subcommand>)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config value; dotted keys reach nested blocks")
        if name == "series":
            p.add_argument("--side", choices=["boltzmann", "bbgky", "both"])
        if name in ("series", "picard", "grad-limit"):
            p.add_argument("--K", type=int)
        if name in ("mdrun", "dsmc", "picard", "series", "recollide", "grad-limit", "chaos"):
            p.add_argument("--absolute-time", action="store_true", help="read t as absolute time, not in mft units")
    return parser


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_override(values: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise InvalidParameterError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = values
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise InvalidParameterError(f"override {key!r} descends into a non-block value")
    node[parts[-1]] = _parse_value(raw)


def resolve_config(name: str, args: argparse.Namespace) -> BaseModel:
    """Defaults, then the config file, then --set overrides, then dedicated flags."""
    model, _ = RUNNERS[name]
    values: dict = {}
    if args.config is not None:
        with open(args.config, encoding="utf-8") as fh:
            values = json.load(fh)
        if not isinstance(values, dict):
            raise InvalidParameterError(f"{args.config} must hold a JSON object")
    for assignment in args.set:
        _apply_override(values, assignment)
    for flag in ("seed", "workers", "side", "K"):
        value = getattr(args, flag, None)
        if value is not None:
            values[flag] = value
    if getattr(args, "absolute_time", False):
        values["time_unit"] = "absolute"
    return model.model_validate(values)


def configure_logging(out_dir: Path) -> logging.Handler:
    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def run_subcommand(name: str, config: BaseModel, run_dir: RunDirectory) -> int:
    """Run one experiment; 0 on success, 1 with error.json on a lab or validation failure."""
    _, runner = RUNNERS[name]
    run_dir.echo_config(config)
    try:
        summary = runner(config, run_dir)
    except (LabError, ValidationError) as e:
        logger.exception("%s failed: %s", name, e)
        run_dir.write_error(e, config)
        return 1
    run_dir.write_manifest(config)
    logger.info("%s finished: %s", name, json.dumps(summary, default=str)[:500])
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    name = args.subcommand
    out_dir = (args.out or Path(OUTPUT_DIR) / name).resolve()
    handler = configure_logging(out_dir)
    seed = args.seed if args.seed is not None else -1
    try:
        try:
            config = resolve_config(name, args)
        except (LabError, ValidationError, OSError, json.JSONDecodeError) as e:
            logger.error("invalid %s config: %s", name, e)
            RunDirectory(out_dir, name, seed).write_error(e)
            return 2
        run_dir = RunDirectory(out_dir, name, config.seed)
        return run_subcommand(name, config, run_dir)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
