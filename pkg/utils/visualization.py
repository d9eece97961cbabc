import logging
from pathlib import Path
from typing import Dict, List, Union

import pandas as pd

from utils.database import write_frame
from utils.exceptions import MissingInputsError

logger = logging.getLogger(__name__)

PLOTDATA_DIR = "plotdata"

# per-seed input file -> (output table, columns)
TABLES: Dict[str, tuple] = {
    "lspe_curve.csv": ("ope_vs_iteration.csv", ["seed", "method", "iteration", "estimate", "exact_value"]),
    "spectrum.csv": ("spectra.csv", ["seed", "source", "index", "eigenvalue"]),
    "beyond_d0.csv": ("error_vs_slice.csv", ["seed", "method", "slice", "abs_error"]),
}


def seed_dirs(results_dir: Path) -> List[Path]:
    return sorted(
        (p for p in results_dir.glob("seed-*") if p.is_dir()),
        key=lambda p: int(p.name.split("-", 1)[1]),
    )


def create_table(frames: List[pd.DataFrame], columns: List[str]) -> pd.DataFrame:
    """Concatenate per-seed frames into one table sorted by its key columns."""
    if not frames:
        return pd.DataFrame(columns=columns)
    table = pd.concat(frames, ignore_index=True)[columns]
    keys = [c for c in columns if c not in ("estimate", "exact_value", "eigenvalue", "abs_error")]
    return table.sort_values(keys, kind="mergesort").reset_index(drop=True)


def emit_plotdata(results_dir: Union[str, Path]) -> Dict[str, Path]:
    """Per-figure tables from a run directory, written to ``<results_dir>/plotdata``.

    Every seed directory must carry every input file; all missing files are
    reported at once and nothing is written in that case.
    """
    results_dir = Path(results_dir)
    seeds = seed_dirs(results_dir) if results_dir.is_dir() else []
    missing = [
        str(seed / name) for seed in seeds for name in TABLES if not (seed / name).is_file()
    ]
    if not results_dir.is_dir():
        missing.append(str(results_dir))
    if missing:
        raise MissingInputsError(missing)

    written = {}
    for name, (output, columns) in TABLES.items():
        frames = []
        for seed in seeds:
            frame = pd.read_csv(seed / name)
            frame.insert(0, "seed", int(seed.name.split("-", 1)[1]))
            frames.append(frame)
        written[output] = write_frame(results_dir / PLOTDATA_DIR / output, create_table(frames, columns))
    logger.info("plot data for %d seeds written to %s", len(seeds), results_dir / PLOTDATA_DIR)
    return written
