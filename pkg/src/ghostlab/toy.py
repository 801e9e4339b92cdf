"""Saddle-node toy model  dx/dt = x**2 + r  trained on the delayed-activation task.

Closed-form loss and gradient in the infinite-confidence limit, a finite-c
numerical twin integrated with explicit Euler, and a fixed-rate gradient
descent trainer on the closed-form gradient.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


def _check_T(T):
    if not T > 0:
        raise ValueError(f"delay T must be positive, got {T}")


def optimal_r(T: float) -> float:
    _check_T(T)
    return math.pi ** 2 / (4.0 * T * T)


def escape_time(r: float) -> float:
    """Time for x(0)=0 to reach infinity; infinite at or below the bifurcation."""
    if r <= 0:
        return math.inf
    return math.pi / (2.0 * math.sqrt(r))


def analytical_loss(r: float, T: float) -> float:
    _check_T(T)
    rs = optimal_r(T)
    if r < rs / 4.0:
        return float(T)
    # t* = T sqrt(r*/r); this form is exactly 0 at r = r* and T/2 at r*/4
    return abs(T - T * math.sqrt(rs / r))


class GradientValue(NamedTuple):
    value: float
    at_kink: bool


def analytical_gradient(r: float, T: float) -> GradientValue:
    """dL/dr of the closed-form loss.

    Exactly at r*/4 or r* the derivative does not exist; the right limit is
    returned with ``at_kink`` set.
    """
    rs = optimal_r(T)
    lo = rs / 4.0
    at_kink = r == lo or r == rs
    if r < lo:
        return GradientValue(0.0, False)
    mag = math.pi / (4.0 * r ** 1.5)
    if r < rs:
        return GradientValue(-mag, at_kink)
    return GradientValue(mag, at_kink)


def gradient_left_limit_at_optimum(T: float) -> float:
    """Left derivative at r*, equal to -2 T**3 / pi**2."""
    return -math.pi / (4.0 * optimal_r(T) ** 1.5)


def critical_learning_rate(T: float) -> float:
    """Smallest fixed rate for which one step from r*+ reaches r*/4."""
    _check_T(T)
    return 3.0 * math.pi ** 4 / 32.0 * T ** -5


class Regime(enum.Enum):
    NO_LEARNING_ZONE = "no_learning_zone"
    ASCENDING_BRANCH = "ascending_branch"
    DESCENDING_BRANCH = "descending_branch"
    AT_OPTIMUM = "at_optimum"


def classify_regime(r: float, T: float, tol: float | None = None) -> Regime:
    rs = optimal_r(T)
    if tol is None:
        tol = 1e-3 * rs
    if tol < 0:
        raise ValueError("tol must be non-negative")
    if abs(r - rs) <= tol:
        return Regime.AT_OPTIMUM
    if r < rs / 4.0:
        return Regime.NO_LEARNING_ZONE
    if r < rs:
        return Regime.ASCENDING_BRANCH
    return Regime.DESCENDING_BRANCH


@dataclass(frozen=True)
class ToyConfig:
    T: float = 100.0
    x_star: float = 10.0
    c: float = 25.0
    dt: float = 0.1
    x_cap: float | None = None  # defaults to 100 * x_star

    def __post_init__(self):
        _check_T(self.T)
        if self.x_star <= 0 or self.c <= 0 or self.dt <= 0:
            raise ValueError("x_star, c and dt must be positive")
        if self.dt >= self.T:
            raise ValueError("dt must be smaller than T")
        if self.x_cap is None:
            object.__setattr__(self, "x_cap", 100.0 * self.x_star)
        if self.x_cap < 10.0 * self.x_star:
            raise ValueError("x_cap must be at least 10 * x_star")

    @property
    def n_steps(self) -> int:
        return int(round(2.0 * self.T / self.dt))


@dataclass(frozen=True)
class ToyTrajectory:
    t: np.ndarray
    x: np.ndarray
    output: np.ndarray
    target: np.ndarray
    loss: float


def simulate_toy(cfg: ToyConfig, r: float) -> ToyTrajectory:
    """Euler rollout from x(0)=0 over [0, 2T) with the sigmoid readout."""
    S = cfg.n_steps
    x = np.empty(S)
    xi = 0.0
    cap = cfg.x_cap
    for k in range(S):
        x[k] = xi
        # the clamp runs before squaring on the next step, so xi*xi stays finite
        xi = xi + cfg.dt * (xi * xi + r)
        if xi > cap:
            xi = cap
        elif xi < -cap:
            xi = -cap
    t = np.arange(S) * cfg.dt
    k_on = int(round(cfg.T / cfg.dt))
    target = (np.arange(S) >= k_on).astype(float)
    u = cfg.c * (x - cfg.x_star)
    out = 0.5 * (1.0 + np.tanh(0.5 * u))
    loss = float(np.sum((out - target) ** 2) * cfg.dt)
    return ToyTrajectory(t, x, out, target, loss)


@dataclass
class ToyTrainRecord:
    T: float
    alpha: float
    epochs: list = field(default_factory=list)
    r: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad: list = field(default_factory=list)
    regime: list = field(default_factory=list)
    terminated_early: bool = False

    @property
    def final_r(self) -> float:
        return self.r[-1]

    @property
    def final_loss(self) -> float:
        return self.loss[-1]


def train_toy_gd(T: float, r0: float, alpha: float, epochs: int,
                 tol: float | None = None) -> ToyTrainRecord:
    """Fixed-rate gradient descent on the closed-form loss.

    Entry ``e`` of the record holds the state *before* update ``e``; a final
    entry after the last update is appended, so the record has epochs+1 rows.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rec = ToyTrainRecord(T=T, alpha=alpha)
    r = float(r0)
    for e in range(epochs + 1):
        g = analytical_gradient(r, T).value
        rec.epochs.append(e)
        rec.r.append(r)
        rec.loss.append(analytical_loss(r, T))
        rec.grad.append(g)
        rec.regime.append(classify_regime(r, T, tol))
        if e < epochs:
            r = r - alpha * g
    return rec
