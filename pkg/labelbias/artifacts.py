"""Output directory writer: CSV tables with a provenance header, JSON documents, config echo."""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
from pathlib import Path
from typing import Any

import pandas as pd

from . import config as config_mod
from .config import ExperimentConfig

log = logging.getLogger(__name__)

CONFIG_FILENAME = "config.json"


def _package_version() -> str:
    from . import __version__

    return __version__


def header_line(config: ExperimentConfig) -> str:
    return f"# labelbias {_package_version()} seed={config.seed} config_hash={config.config_hash}"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(
        "w", delete=False, dir=str(path.parent), encoding="utf-8", newline=""
    ) as tmp:
        tmp.write(text)
        tmp_path = Path(tmp.name)
    os.replace(tmp_path, path)


def read_table(path: Path) -> pd.DataFrame:
    """Read a CSV written by :class:`ArtifactWriter`, skipping the provenance line."""

    return pd.read_csv(path, skiprows=1)


class ArtifactWriter:
    """Writes every artifact of one run into ``out_dir``; writes are serialized."""

    def __init__(self, out_dir: Path, config: ExperimentConfig) -> None:
        self.out_dir = Path(out_dir)
        self.config = config
        self._lock = threading.Lock()

    def echo_config(self) -> Path:
        path = self.out_dir / CONFIG_FILENAME
        with self._lock:
            config_mod.save(self.config, path)
        return path

    def write_table(self, name: str, frame: pd.DataFrame, *, index: bool = False) -> Path:
        path = self.out_dir / name
        body = frame.to_csv(index=index, lineterminator="\n")
        with self._lock:
            _atomic_write(path, header_line(self.config) + "\n" + body)
        log.info("Wrote %s (%d rows)", path, len(frame))
        return path

    def write_json(self, name: str, payload: Any) -> Path:
        path = self.out_dir / name
        text = json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n"
        with self._lock:
            _atomic_write(path, text)
        log.info("Wrote %s", path)
        return path
