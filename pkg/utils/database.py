"""Local result store.

A run writes into a private staging directory and is published by renaming
that directory to ``<root>/<config hash>``. A run that aborts is moved to
``<root>/quarantine/<config hash>`` with whatever it had written so far.
Every file is written through a temporary name and renamed into place.
"""
import json
import logging
import math
import os
import shutil
from pathlib import Path
from typing import Any, Dict, List, Union

import pandas as pd

from evaluation.metrics import EvalReport

logger = logging.getLogger(__name__)

REPORTS_FILE = "reports.json"
SUMMARY_FILE = "summary.csv"
CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"
QUARANTINE_DIR = "quarantine"
FLOAT_FORMAT = "%.17g"


def _plain(value: Any) -> Any:
    """JSON-ready copy; non-finite floats become strings so files stay strict JSON."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "item") and callable(value.item) and getattr(value, "ndim", 1) == 0:
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def _restore(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _restore(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_restore(v) for v in value]
    if value in ("nan", "inf", "-inf"):
        return float(value)
    return value


def atomic_write_bytes(path: Path, payload: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


def write_json(path: Path, document: Any) -> Path:
    text = json.dumps(_plain(document), indent=2, sort_keys=True) + "\n"
    return atomic_write_bytes(path, text.encode("utf-8"))


def read_json(path: Path) -> Any:
    return _restore(json.loads(Path(path).read_text()))


def write_frame(path: Path, frame: pd.DataFrame) -> Path:
    return atomic_write_bytes(path, frame.to_csv(index=False, float_format=FLOAT_FORMAT).encode("utf-8"))


class ResultStore:
    """Files of one run, keyed by config hash under ``root``."""

    def __init__(self, root: Union[str, Path], run_id: str):
        self.root = Path(root)
        self.run_id = run_id
        self.final_dir = self.root / run_id
        self.staging_dir = self.root / f".staging-{run_id}-{os.getpid()}"
        self.quarantine_dir = self.root / QUARANTINE_DIR / run_id

    def open(self) -> "ResultStore":
        if self.staging_dir.exists():
            shutil.rmtree(self.staging_dir)
        self.staging_dir.mkdir(parents=True)
        return self

    def path(self, relative: str) -> Path:
        target = self.staging_dir / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def write_json(self, relative: str, document: Any) -> Path:
        return write_json(self.path(relative), document)

    def write_frame(self, relative: str, frame: pd.DataFrame) -> Path:
        return write_frame(self.path(relative), frame)

    def write_bytes(self, relative: str, payload: bytes) -> Path:
        return atomic_write_bytes(self.path(relative), payload)

    def store_reports(self, reports: List[EvalReport]) -> Path:
        ordered = sorted(reports, key=lambda r: (r.seed, r.method))
        return self.write_json(REPORTS_FILE, [r.to_dict() for r in ordered])

    def commit(self) -> Path:
        """Publish the staging directory, replacing an earlier run of the same config."""
        if self.final_dir.exists():
            shutil.rmtree(self.final_dir)
        os.replace(self.staging_dir, self.final_dir)
        logger.info("results written to %s", self.final_dir)
        return self.final_dir

    def quarantine(self) -> Path:
        if self.quarantine_dir.exists():
            shutil.rmtree(self.quarantine_dir)
        self.quarantine_dir.parent.mkdir(parents=True, exist_ok=True)
        if self.staging_dir.exists():
            os.replace(self.staging_dir, self.quarantine_dir)
        else:
            self.quarantine_dir.mkdir()
        logger.warning("run %s aborted; partial outputs moved to %s", self.run_id, self.quarantine_dir)
        return self.quarantine_dir


def load_reports(run_dir: Union[str, Path]) -> List[EvalReport]:
    return [EvalReport.from_dict(record) for record in read_json(Path(run_dir) / REPORTS_FILE)]


def load_summary(run_dir: Union[str, Path]) -> Dict[str, Dict[str, Any]]:
    frame = pd.read_csv(Path(run_dir) / SUMMARY_FILE)
    return frame.set_index("method").to_dict(orient="index")
