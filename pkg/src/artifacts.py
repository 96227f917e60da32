"""Result files of one run: CSV / JSON Lines / JSON writers confined to the run directory, plus the manifest."""
import json
import logging
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from src.exceptions import InvalidParameterError

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "python-dotenv")


def package_versions() -> dict[str, str]:
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


def _numpy_value(obj: Any) -> Any:
    if isinstance(obj, (np.generic, np.ndarray)):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def _plain(obj: Any) -> Any:
    if isinstance(obj, BaseModel):
        return obj.model_dump(mode="json")
    return obj


class RunDirectory:
    """One output directory per run. Every artifact name is a bare file name."""

    def __init__(self, root: Union[str, Path], subcommand: str, seed: int):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        self.subcommand = subcommand
        self.seed = seed
        self.artifacts: list[str] = []
        self.started = datetime.now(timezone.utc)
        self._clock = time.perf_counter()

    def path(self, name: str) -> Path:
        target = (self.root / name).resolve()
        if target.parent != self.root:
            raise InvalidParameterError(f"artifact {name!r} would be written outside {self.root}")
        return target

    def register(self, name: str) -> Path:
        target = self.path(name)
        if name not in self.artifacts:
            self.artifacts.append(name)
        return target

    def write_json(self, name: str, payload: Any) -> Path:
        target = self.register(name)
        with open(target, "w", encoding="utf-8") as fh:
            json.dump(_plain(payload), fh, indent=2, sort_keys=True, default=_numpy_value)
            fh.write("\n")
        logger.debug("wrote %s", target)
        return target

    def write_csv(self, name: str, frame: Union[pd.DataFrame, Iterable[dict]]) -> Path:
        target = self.register(name)
        frame = frame if isinstance(frame, pd.DataFrame) else pd.DataFrame([_plain(r) for r in frame])
        frame.to_csv(target, index=False)
        logger.debug("wrote %s (%d rows)", target, len(frame))
        return target

    def write_jsonl(self, name: str, records: Iterable[Any]) -> Path:
        target = self.register(name)
        count = 0
        with open(target, "w", encoding="utf-8") as fh:
            for record in records:
                # repr-exact floats, one object per line
                fh.write(json.dumps(_plain(record), default=_numpy_value) + "\n")
                count += 1
        logger.debug("wrote %s (%d records)", target, count)
        return target

    def echo_config(self, config: BaseModel) -> Path:
        return self.write_json("config.json", config)

    def write_manifest(self, config: BaseModel) -> Path:
        manifest = {
            "subcommand": self.subcommand,
            "config_echo": config.model_dump(mode="json"),
            "seed": self.seed,
            "start": self.started.isoformat(),
            "wall_seconds": round(time.perf_counter() - self._clock, 3),
            "artifact_list": sorted(self.artifacts),
            "versions": package_versions(),
        }
        target = self.path("manifest.json")
        with open(target, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return target

    def write_error(self, error: BaseException, config: Optional[BaseModel] = None) -> Path:
        record = {
            "subcommand": self.subcommand,
            "error_type": type(error).__name__,
            "message": str(error),
            "seed": self.seed,
        }
        if config is not None:
            record["config_echo"] = config.model_dump(mode="json")
        return self.write_json("error.json", record)
