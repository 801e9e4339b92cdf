"""Per-run summaries, per-cell aggregates and output-file plumbing."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..protocol import LEARNED, NEITHER, STUCK

OUTCOMES = (LEARNED, STUCK, NEITHER)


@dataclass(frozen=True)
class RunSummary:
    seed_index: int
    run_seed: int
    final_loss: float
    epochs_to_learned: Optional[int]
    outcome: str


@dataclass(frozen=True)
class CellStats:
    n: int
    mean_final_loss: float
    sem_final_loss: float
    median_epochs_to_learned: Optional[float]
    counts: dict


def mean_sem(values: Sequence[float]):
    """Mean and standard error over seeds; the SEM is nan for a single value."""
    v = np.sort(np.asarray(values, dtype=float))
    if not len(v):
        return math.nan, math.nan
    mean = float(math.fsum(v) / len(v))
    if len(v) < 2:
        return mean, math.nan
    var = math.fsum((v - mean) ** 2) / (len(v) - 1)
    return mean, math.sqrt(var / len(v))


@dataclass
class SweepResult:
    """Runs keyed by (grid point, seed index).

    ``grid`` holds one tuple per cell, ordered like ``grid_names``.
    """

    kind: str
    grid_names: tuple
    grid: list
    seeds: list
    runs: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.runs)

    def add(self, point: tuple, summary: RunSummary) -> None:
        self.runs[(tuple(point), summary.seed_index)] = summary

    def cell_runs(self, point: tuple) -> list:
        point = tuple(point)
        return [self.runs[(point, s)] for s in sorted(self.seeds) if (point, s) in self.runs]

    def cell(self, point: tuple) -> CellStats:
        runs = self.cell_runs(point)
        mean, sem = mean_sem([r.final_loss for r in runs])
        etl = [r.epochs_to_learned for r in runs if r.epochs_to_learned is not None]
        counts = {k: sum(r.outcome == k for r in runs) for k in OUTCOMES}
        med = float(np.median(etl)) if etl else None
        return CellStats(len(runs), mean, sem, med, counts)

    def summary_csv(self) -> str:
        header = list(self.grid_names) + ["n", "mean_final_loss", "sem_final_loss",
                                          "median_epochs_to_learned"] + list(OUTCOMES)
        rows = []
        for point in self.grid:
            st = self.cell(point)
            rows.append(list(point) + [st.n, st.mean_final_loss, st.sem_final_loss,
                                       st.median_epochs_to_learned]
                        + [st.counts[k] for k in OUTCOMES])
        return csv_text(header, rows)

    def runs_csv(self) -> str:
        header = list(self.grid_names) + ["seed_index", "run_seed", "final_loss",
                                          "epochs_to_learned", "outcome"]
        rows = []
        for point in self.grid:
            for r in self.cell_runs(point):
                rows.append(list(point) + [r.seed_index, r.run_seed, r.final_loss,
                                           r.epochs_to_learned, r.outcome])
        return csv_text(header, rows)


# -- files -------------------------------------------------------------------

def fmt(v) -> str:
    """Shortest round-trip decimal for floats, plain ints, empty for None."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
    return path


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_manifest(out_dir, kind: str, config_hash: str) -> Path:
    """Index every file under ``out_dir`` (except the manifest) with its digest."""
    out_dir = Path(out_dir)
    files = []
    for p in sorted(out_dir.rglob("*")):
        if not p.is_file() or p.name == "manifest.json" or p.name.endswith(".tmp"):
            continue
        data = p.read_bytes()
        files.append({"path": p.relative_to(out_dir).as_posix(), "bytes": len(data),
                      "sha256": hashlib.sha256(data).hexdigest()})
    return write_json(out_dir / "manifest.json",
                      {"kind": kind, "config_hash": config_hash, "files": files})
