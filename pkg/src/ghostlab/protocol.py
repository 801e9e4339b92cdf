"""Training orchestration: epoch logs, accuracy, stuck detection, interventions."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import latent
from .rnn import LATENT, RnnParams, TaskSpec, Trajectory, bptt_gradient, sgd_step

CSV_FIELDS = ("epoch", "loss", "grad_norm", "accuracy", "confidence",
              "fp_count", "ghost_absf", "ghost_kappa")

LEARNED = "learned"
STUCK = "stuck"
NEITHER = "neither"


def accuracy_of(output, target) -> float:
    output = np.asarray(output)
    target = np.asarray(target)
    return float(np.mean((output > 0.5) == (target == 1)))


def accuracy(traj: Trajectory) -> float:
    """Fraction of steps whose thresholded output agrees with the target."""
    return accuracy_of(traj.output, traj.target)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    grad_norm: float
    accuracy: float
    confidence: Optional[float] = None
    fp_count: Optional[int] = None
    ghost_absf: Optional[float] = None
    ghost_kappa: Optional[float] = None


@dataclass
class RunRecord:
    seed: Optional[int] = None
    config_hash: str = ""
    logs: list = field(default_factory=list)
    params: Optional[RnnParams] = None
    checkpoint: Optional[str] = None
    aborted: bool = False
    events: list = field(default_factory=list)

    @property
    def epochs(self) -> np.ndarray:
        return np.array([lg.epoch for lg in self.logs], dtype=int)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(lg, name) is None else getattr(lg, name)
                         for lg in self.logs], dtype=float)

    @property
    def losses(self) -> np.ndarray:
        return self.column("loss")

    @property
    def accuracies(self) -> np.ndarray:
        return self.column("accuracy")

    @property
    def grad_norms(self) -> np.ndarray:
        return self.column("grad_norm")

    @property
    def outcome(self) -> str:
        return outcome_label(self.accuracies)

    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "n_epochs": len(self.logs),
            "outcome": self.outcome if len(self.logs) else NEITHER,
            "aborted": self.aborted,
            "checkpoint": self.checkpoint,
            "events": self.events,
        }


def detect_stuck(record, window: int = 50, threshold: float = 0.5) -> bool:
    """True iff accuracy <= threshold on each of the last ``window`` epochs.

    ``record`` may be a RunRecord or a plain accuracy sequence.
    """
    acc = record.accuracies if isinstance(record, RunRecord) else np.asarray(record, dtype=float)
    if len(acc) < window:
        raise ValueError(f"need at least {window} epochs, got {len(acc)}")
    return bool(np.all(acc[len(acc) - window:] <= threshold))


def outcome_label(accuracies: Sequence[float], window: int = 50, threshold: float = 0.5) -> str:
    acc = np.asarray(accuracies, dtype=float)
    if len(acc) >= window and detect_stuck(acc, window, threshold):
        return STUCK
    if np.any(acc == 1.0):
        return LEARNED
    return NEITHER


def epochs_to_learned(accuracies: Sequence[float], epochs: Optional[Sequence[int]] = None):
    acc = np.asarray(accuracies, dtype=float)
    hit = np.flatnonzero(acc == 1.0)
    if not len(hit):
        return None
    return int(hit[0] if epochs is None else epochs[hit[0]])


def abrupt_drops(losses: Sequence[float], threshold: float = 0.25) -> np.ndarray:
    """Indices i where loss[i] fell by more than ``threshold`` of loss[i-1]."""
    L = np.asarray(losses, dtype=float)
    if len(L) < 2:
        return np.array([], dtype=int)
    prev = L[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(prev > 0, (prev - L[1:]) / prev, 0.0)
    return np.flatnonzero(rel > threshold) + 1


def lower_confidence(params: RnnParams, new_c: float,
                     record: Optional[RunRecord] = None) -> RnnParams:
    if params.readout != LATENT:
        raise ValueError("confidence lives on the latent-threshold readout only")
    if not new_c > 0:
        raise ValueError("confidence must be positive")
    if record is not None:
        epoch = int(record.logs[-1].epoch) + 1 if record.logs else 0
        record.events.append({"epoch": epoch, "kind": "lower_confidence",
                              "from": float(params.c), "to": float(new_c)})
    if new_c == params.c:
        return params
    return params.replace(c=float(new_c))


def latent_summary(params: RnnParams, eps_ghost: float = 0.05, grid=None):
    """(fp_count, ghost |f|, ghost kappa) for rank-one nets; the slowest ghost wins."""
    flow = latent.flow_of(params, grid)
    fps = latent.find_fixed_points(flow)
    gh = latent.find_ghosts(flow, eps_ghost).slowest()
    if gh is None:
        return len(fps), None, None
    return len(fps), gh.abs_f, gh.kappa


def run_training(params: RnnParams, task: TaskSpec, alpha: float, epochs: int,
                 analysis_stride: int = 0, eps_ghost: float = 0.05,
                 hooks: Iterable[Callable] = (), seed: Optional[int] = None,
                 config_hash: str = "", start_epoch: int = 0,
                 record: Optional[RunRecord] = None) -> RunRecord:
    """Full-batch gradient descent, one update per epoch.

    The log line for epoch e describes the parameters *entering* epoch e. With
    ``analysis_stride`` > 0 (rank-one only) the latent circuit is analysed on
    epochs divisible by the stride and on the final epoch. Each hook is called
    as ``hook(epoch, params, log)`` after the log line is built. Passing an
    existing ``record`` continues it.
    """
    if record is None:
        record = RunRecord(seed=seed, config_hash=config_hash)
    record.params = params
    analyse = analysis_stride > 0 and params.K == 1
    target = task.target()
    hooks = list(hooks)
    for i in range(epochs):
        epoch = start_epoch + i
        g = bptt_gradient(params, task, target)
        if not math.isfinite(g.loss):
            record.aborted = True
            record.events.append({"epoch": epoch, "kind": "abort", "reason": "non-finite loss"})
            break
        log = EpochLog(epoch, g.loss, g.norm, accuracy_of(g.output, target),
                       float(params.c) if params.readout == LATENT else None)
        if analyse and (i % analysis_stride == 0 or i == epochs - 1):
            log.fp_count, log.ghost_absf, log.ghost_kappa = latent_summary(params, eps_ghost)
        record.logs.append(log)
        for hook in hooks:
            hook(epoch, params, log)
        params = sgd_step(params, g, alpha)
    record.params = params
    return record


# -- serialization -----------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def epoch_csv_text(logs: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for lg in logs:
        w.writerow([_fmt(getattr(lg, name)) for name in CSV_FIELDS])
    return buf.getvalue()


def write_epoch_csv(logs: Sequence[EpochLog], path) -> None:
    _atomic_write(Path(path), epoch_csv_text(logs))


def read_epoch_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        def num(name, cast=float):
            return None if row[name] == "" else cast(row[name])
        out.append(EpochLog(int(row["epoch"]), num("loss"), num("grad_norm"),
                            num("accuracy"), num("confidence"), num("fp_count", int),
                            num("ghost_absf"), num("ghost_kappa")))
    return out


def write_run_metadata(record: RunRecord, path) -> None:
    _atomic_write(Path(path), json.dumps(record.metadata(), indent=1, sort_keys=True) + "\n")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
