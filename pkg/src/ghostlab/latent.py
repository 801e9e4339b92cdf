"""One-dimensional latent circuit of rank-one networks.

For W = m n^T the projection kappa = n . x obeys exactly

    tau dkappa/dt = f(kappa) = -kappa + n . tanh(m kappa + b),

so fixed points, ghosts and saddle-node events of the full network can be read
off a scalar flow sampled on a grid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .rnn import RnnParams, TaskSpec, forward

STABLE = "stable"
UNSTABLE = "unstable"
MARGINAL = "marginal"

DEFAULT_RANGE = 15.0
DEFAULT_NODES = 3001


def default_grid(half_width: float = DEFAULT_RANGE, nodes: int = DEFAULT_NODES) -> np.ndarray:
    return np.linspace(-half_width, half_width, nodes)


def scan_half_width(n, base: float = DEFAULT_RANGE) -> float:
    """Half-width that brackets every root: |f(k) + k| <= sum|n_i|."""
    return max(base, float(np.sum(np.abs(n))) + 1.0)


@dataclass(frozen=True)
class LatentFlow:
    grid: np.ndarray
    values: np.ndarray
    fn: Callable = field(repr=False, compare=False)
    m: Optional[np.ndarray] = None
    n: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    tau: float = 1.0

    def __call__(self, kappa):
        return self.fn(kappa)

    @classmethod
    def from_function(cls, fn: Callable, grid) -> "LatentFlow":
        grid = np.asarray(grid, dtype=float)
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        return cls(grid, np.asarray(fn(grid), dtype=float), fn)


def flow_function(m, n, b) -> Callable:
    m = np.asarray(m, dtype=float)
    n = np.asarray(n, dtype=float)
    b = np.asarray(b, dtype=float)

    def f(kappa):
        k = np.asarray(kappa, dtype=float)
        return -k + np.tanh(np.multiply.outer(k, m) + b) @ n

    return f


def latent_flow(m, n, b, tau: float = 1.0, grid=None) -> LatentFlow:
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    fn = flow_function(m, n, b)
    return LatentFlow(grid, fn(grid), fn, np.asarray(m, dtype=float),
                      np.asarray(n, dtype=float), np.asarray(b, dtype=float), tau)


def flow_of(params: RnnParams, grid=None, widen: bool = False) -> LatentFlow:
    _require_rank_one(params)
    if grid is None and widen:
        grid = default_grid(scan_half_width(params.n))
    return latent_flow(params.m, params.n, params.b, params.tau, grid)


def _require_rank_one(params: RnnParams):
    if params.K != 1:
        raise ValueError(f"latent circuit needs a rank-one network, got K={params.K}")


def latent_step_consistency(params: RnnParams, task: TaskSpec) -> float:
    """Max |n.x[k] - kappa[k]| between the full rollout and the scalar recursion."""
    _require_rank_one(params)
    traj = forward(params, task)
    kappa_full = traj.x @ params.n
    d = task.dt / params.tau
    m, n, b = params.m, params.n, params.b
    kappa = np.empty(task.n_steps)
    kappa[0] = kappa_full[0]
    for k in range(task.n_steps - 1):
        kappa[k + 1] = (1.0 - d) * kappa[k] + d * (n @ np.tanh(m * kappa[k] + b))
    return float(np.max(np.abs(kappa_full - kappa)))


# -- fixed points ------------------------------------------------------------

@dataclass(frozen=True)
class FixedPoint:
    kappa: float
    stability: str
    residual: float
    slope: float


@dataclass(frozen=True)
class FixedPointSet:
    points: tuple
    scan_range: tuple
    resolution: float

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    @property
    def kappas(self) -> np.ndarray:
        return np.array([p.kappa for p in self.points])


def _bisect(fn, lo, hi, flo, tol):
    while True:
        mid = 0.5 * (lo + hi)
        fm = float(fn(mid))
        if abs(fm) < tol or hi - lo < 1e-10:
            return mid, fm
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid


def _stability(fn, kappa, h=1e-6, marginal=1e-8):
    slope = float(fn(kappa + h) - fn(kappa - h)) / (2 * h)
    if slope < -marginal:
        return STABLE, slope
    if slope > marginal:
        return UNSTABLE, slope
    return MARGINAL, slope


def find_fixed_points(flow: LatentFlow, tol: float = 1e-10) -> FixedPointSet:
    """Bisection on every grid cell where f changes sign.

    Nodes where f is exactly zero are roots themselves and are not counted
    again from the neighbouring cells.
    """
    g, f = flow.grid, flow.values
    roots = []
    zero = f == 0.0
    for i in np.flatnonzero(zero):
        roots.append((float(g[i]), 0.0))
    s = np.sign(f)
    cells = np.flatnonzero((s[:-1] * s[1:]) < 0)
    for i in cells:
        roots.append(_bisect(flow.fn, float(g[i]), float(g[i + 1]), float(f[i]), tol))
    roots.sort()
    points = []
    for kappa, fk in roots:
        stab, slope = _stability(flow.fn, kappa)
        points.append(FixedPoint(kappa, stab, abs(fk), slope))
    res = float(g[1] - g[0]) if len(g) > 1 else 0.0
    return FixedPointSet(tuple(points), (float(g[0]), float(g[-1])), res)


# -- ghosts ------------------------------------------------------------------

@dataclass(frozen=True)
class Ghost:
    kappa: float
    abs_f: float
    curvature: float


@dataclass(frozen=True)
class GhostSet:
    ghosts: tuple
    eps_ghost: float

    def __len__(self):
        return len(self.ghosts)

    def __iter__(self):
        return iter(self.ghosts)

    def nearest(self, kappa: float) -> Optional[Ghost]:
        if not self.ghosts:
            return None
        return min(self.ghosts, key=lambda gh: abs(gh.kappa - kappa))

    def slowest(self) -> Optional[Ghost]:
        if not self.ghosts:
            return None
        return min(self.ghosts, key=lambda gh: gh.abs_f)


def find_ghosts(flow: LatentFlow, eps_ghost: float = 0.05) -> GhostSet:
    """Strict local minima of |f| that stay off zero.

    A candidate node i needs f[i-1], f[i], f[i+1] of one strict sign, so no
    ghost shares a cell with a root. The location is refined by the vertex of
    the parabola through the three |f| samples.
    """
    g, f = flow.grid, flow.values
    a = np.abs(f)
    found = []
    for i in range(1, len(g) - 1):
        if not (a[i] < a[i - 1] and a[i] < a[i + 1]):
            continue
        if not (0.0 < a[i] < eps_ghost):
            continue
        if not (np.sign(f[i - 1]) == np.sign(f[i]) == np.sign(f[i + 1]) != 0):
            continue
        h = g[i + 1] - g[i]
        hl = g[i] - g[i - 1]
        denom = a[i - 1] - 2 * a[i] + a[i + 1]
        kappa = float(g[i])
        if denom > 0 and abs(h - hl) < 1e-12 * max(1.0, abs(h)):
            shift = 0.5 * h * (a[i - 1] - a[i + 1]) / denom
            cand = kappa + shift
            fc = float(flow.fn(cand))
            if 0.0 < abs(fc) < eps_ghost and np.sign(fc) == np.sign(f[i]):
                kappa = cand
        fk = float(flow.fn(kappa))
        curv = float(flow.fn(kappa + h) - 2 * fk + flow.fn(kappa - h)) / (h * h)
        found.append(Ghost(kappa, abs(fk), curv))
    return GhostSet(tuple(found), eps_ghost)


# -- bifurcations ------------------------------------------------------------

@dataclass(frozen=True)
class BifurcationEvent:
    epoch: int
    count_before: int
    count_after: int

    @property
    def kind(self) -> str:
        return "count-increase" if self.count_after > self.count_before else "count-decrease"


def track_bifurcations(history: Sequence, epochs: Optional[Sequence[int]] = None) -> list:
    """One event per consecutive pair whose fixed-point count differs.

    ``history`` holds FixedPointSets (or plain counts) in epoch order. The
    event is stamped with the later epoch of the pair.
    """
    counts = [h if isinstance(h, (int, np.integer)) else len(h) for h in history]
    if epochs is None:
        epochs = range(len(counts))
    epochs = list(epochs)
    if len(epochs) != len(counts):
        raise ValueError("epochs and history differ in length")
    events = []
    for i in range(1, len(counts)):
        if counts[i] != counts[i - 1]:
            events.append(BifurcationEvent(int(epochs[i]), int(counts[i - 1]), int(counts[i])))
    return events


# -- snapshot files ----------------------------------------------------------

def write_flow_snapshot(flow: LatentFlow, stem, fixed_points: Optional[FixedPointSet] = None,
                        ghosts: Optional[GhostSet] = None, extra: Optional[dict] = None):
    """Write ``<stem>.txt`` (kappa, f columns) and ``<stem>.json`` (roots, ghosts).

    Values use repr formatting so the grid parses back bit-identical.
    """
    stem = Path(stem)
    lines = ["# kappa f"]
    lines += [f"{k!r} {v!r}" for k, v in zip(flow.grid.tolist(), flow.values.tolist())]
    txt = stem.with_suffix(".txt")
    _atomic_write(txt, "\n".join(lines) + "\n")
    if fixed_points is None:
        fixed_points = find_fixed_points(flow)
    if ghosts is None:
        ghosts = find_ghosts(flow)
    side = {
        "fixed_points": [{"kappa": p.kappa, "stability": p.stability,
                          "residual": p.residual} for p in fixed_points],
        "ghosts": [{"kappa": gh.kappa, "abs_f": gh.abs_f, "curvature": gh.curvature}
                   for gh in ghosts],
        "eps_ghost": ghosts.eps_ghost,
        "scan_range": list(fixed_points.scan_range),
        "tau": flow.tau,
    }
    if extra:
        side.update(extra)
    _atomic_write(stem.with_suffix(".json"), json.dumps(side, indent=1, sort_keys=True) + "\n")
    return txt


def read_flow_snapshot(stem):
    """Return (grid, values, sidecar dict)."""
    stem = Path(stem)
    data = np.loadtxt(stem.with_suffix(".txt"), comments="#")
    side = json.loads(stem.with_suffix(".json").read_text())
    return data[:, 0], data[:, 1], side


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
