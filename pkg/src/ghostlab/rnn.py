"""Low-rank rate RNN on the delayed-activation task.

Dynamics are Euler-discretized,

    x[k+1] = (1 - D) x[k] + D tanh(M (Nfac x[k]) + b),   D = dt / tau,

with the recurrent matrix kept in factored form ``W = M @ Nfac`` and never
materialized. Gradients are exact reverse-mode (BPTT) through the unrolled
recursion; no autodiff framework is involved.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels

LATENT = "latent"
LINEAR = "linear"

BLOCKS = ("M", "Nfac", "b", "c", "w_out", "b_out")


def sigmoid(u):
    # split by sign so neither branch overflows
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


@dataclass(frozen=True)
class TaskSpec:
    """Delayed-activation task: output 0 on [0, T), then 1 on [T, 2T)."""

    T: float = 100.0
    dt: float = 5.0
    x0: float = -0.3

    def __post_init__(self):
        if self.T <= 0 or self.dt <= 0:
            raise ValueError("T and dt must be positive")
        ratio = 2 * self.T / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt must divide 2T")

    @property
    def n_steps(self) -> int:
        return int(round(2 * self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt

    def target(self) -> np.ndarray:
        # integer comparison avoids float ties at t == T
        k_on = int(round(self.T / self.dt))
        return (np.arange(self.n_steps) >= k_on).astype(float)


@dataclass(frozen=True)
class RnnParams:
    """Trainable state of a rank-K network.

    ``readout`` is ``"latent"`` (output sigma(c (kappa - kappa_star)) with
    kappa = Nfac[0] @ x) or ``"linear"`` (output sigma(w_out @ x + b_out), or
    the raw affine value when ``sigmoid_out`` is False).
    """

    M: np.ndarray
    Nfac: np.ndarray
    b: np.ndarray
    tau: float = 10.0
    readout: str = LATENT
    kappa_star: float = 1.0
    c: float = 10.0
    w_out: Optional[np.ndarray] = None
    b_out: float = 0.0
    sigmoid_out: bool = True
    trainable: dict = field(default_factory=dict)

    def __post_init__(self):
        N, K = self.M.shape
        if self.Nfac.shape != (K, N):
            raise ValueError(f"Nfac must be {(K, N)}, got {self.Nfac.shape}")
        if not 1 <= K <= N:
            raise ValueError(f"rank K={K} must satisfy 1 <= K <= N={N}")
        if self.b.shape != (N,):
            raise ValueError("b must have shape (N,)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.readout not in (LATENT, LINEAR):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.readout == LINEAR and (self.w_out is None or self.w_out.shape != (N,)):
            raise ValueError("linear readout needs w_out of shape (N,)")
        mask = default_mask(self.readout)
        mask.update(self.trainable)
        object.__setattr__(self, "trainable", mask)

    @property
    def N(self) -> int:
        return self.M.shape[0]

    @property
    def K(self) -> int:
        return self.M.shape[1]

    @property
    def m(self) -> np.ndarray:
        return self.M[:, 0]

    @property
    def n(self) -> np.ndarray:
        return self.Nfac[0]

    def W(self) -> np.ndarray:
        return self.M @ self.Nfac

    def blocks(self) -> dict:
        """Parameter blocks that exist for this readout, as float arrays."""
        out = {"M": self.M, "Nfac": self.Nfac, "b": self.b}
        if self.readout == LATENT:
            out["c"] = np.asarray(self.c, dtype=float)
        else:
            out["w_out"] = self.w_out
            out["b_out"] = np.asarray(self.b_out, dtype=float)
        return out

    def replace(self, **changes) -> "RnnParams":
        return dataclasses.replace(self, **changes)


def default_mask(readout: str) -> dict:
    if readout == LATENT:
        return {"M": True, "Nfac": True, "b": True, "c": False}
    return {"M": True, "Nfac": True, "b": True, "w_out": True, "b_out": True}


def init_params(seed: int, N: int = 100, K: int = 1, readout: str = LATENT,
                tau: float = 10.0, scale: float = 1.0, kappa_star: float = 1.0,
                c: float = 10.0, c_trainable: bool = False,
                sigmoid_out: bool = True) -> RnnParams:
    """Draw factor entries i.i.d. Normal(0, scale**2 / N); biases start at 0."""
    if not 1 <= K <= N:
        raise ValueError(f"rank K={K} must satisfy 1 <= K <= N={N}")
    rng = np.random.default_rng(seed)
    std = scale / np.sqrt(N)
    M = rng.normal(0.0, std, size=(N, K))
    Nfac = rng.normal(0.0, std, size=(K, N))
    b = np.zeros(N)
    if readout == LATENT:
        return RnnParams(M, Nfac, b, tau=tau, readout=LATENT,
                         kappa_star=kappa_star, c=c,
                         trainable={"c": c_trainable})
    w_out = rng.normal(0.0, 1.0 / np.sqrt(N), size=N)
    return RnnParams(M, Nfac, b, tau=tau, readout=LINEAR, w_out=w_out,
                     b_out=0.0, sigmoid_out=sigmoid_out)


def step(params: RnnParams, x: np.ndarray, dt: float) -> np.ndarray:
    d = dt / params.tau
    return (1.0 - d) * x + d * np.tanh(params.M @ (params.Nfac @ x) + params.b)


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed record of one rollout; ``kappa`` is None for linear readouts."""

    t: np.ndarray
    x: np.ndarray          # (steps, N)
    output: np.ndarray
    target: np.ndarray
    loss: float
    kappa: Optional[np.ndarray] = None
    dt: float = 0.0

    def __len__(self):
        return len(self.t)


def _rollout(params: RnnParams, task: TaskSpec):
    return _kernels.rollout(np.ascontiguousarray(params.M, dtype=float),
                            np.ascontiguousarray(params.Nfac, dtype=float),
                            np.ascontiguousarray(params.b, dtype=float),
                            task.dt / params.tau, float(task.x0), task.n_steps)


def _readout(params: RnnParams, X: np.ndarray):
    """Return (output, pre-activation u, kappa or None)."""
    if params.readout == LATENT:
        kappa = X @ params.n
        u = params.c * (kappa - params.kappa_star)
        return sigmoid(u), u, kappa
    u = X @ params.w_out + params.b_out
    out = sigmoid(u) if params.sigmoid_out else u
    return out, u, None


def forward(params: RnnParams, task: TaskSpec, target=None) -> Trajectory:
    X, _ = _rollout(params, task)
    out, _, kappa = _readout(params, X)
    o = task.target() if target is None else np.asarray(target, dtype=float)
    loss = float(np.sum((out - o) ** 2) * task.dt)
    return Trajectory(task.times, X, out, o, loss, kappa, task.dt)


def forward_dense(params: RnnParams, task: TaskSpec) -> Trajectory:
    """Reference rollout with W materialized; for equivalence checks only."""
    W = params.W()
    d = task.dt / params.tau
    X = np.empty((task.n_steps, params.N))
    x = np.full(params.N, float(task.x0))
    X[0] = x
    for k in range(task.n_steps - 1):
        x = (1.0 - d) * x + d * np.tanh(W @ x + params.b)
        X[k + 1] = x
    out, _, kappa = _readout(params, X)
    o = task.target()
    return Trajectory(task.times, X, out, o, float(np.sum((out - o) ** 2) * task.dt),
                      kappa, task.dt)


@dataclass(frozen=True)
class GradientBundle:
    grads: dict
    loss: float
    output: Optional[np.ndarray] = None

    @property
    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(np.square(g)) for g in self.grads.values())))

    def __getitem__(self, name):
        return self.grads[name]


def bptt_gradient(params: RnnParams, task: TaskSpec, target=None) -> GradientBundle:
    """Exact gradient of the Riemann-sum loss w.r.t. every parameter block.

    Frozen blocks are reported as zeros of the right shape.
    """
    X, H = _rollout(params, task)
    out, u, kappa = _readout(params, X)
    o = task.target() if target is None else np.asarray(target, dtype=float)
    d = task.dt / params.tau
    loss = float(np.sum((out - o) ** 2) * task.dt)

    g_out = 2.0 * (out - o) * task.dt
    if params.readout == LINEAR and not params.sigmoid_out:
        g_u = g_out
    else:
        g_u = g_out * out * (1.0 - out)

    grads = {name: np.zeros_like(v, dtype=float) for name, v in params.blocks().items()}
    if params.readout == LATENT:
        g_kappa = g_u * params.c
        grads["c"] = np.asarray(float(g_u @ (kappa - params.kappa_star)))
        direct = np.outer(g_kappa, params.n)
        grads["Nfac"][0] += g_kappa @ X
    else:
        direct = np.outer(g_u, params.w_out)
        grads["w_out"] = g_u @ X
        grads["b_out"] = np.asarray(float(g_u.sum()))

    M = np.ascontiguousarray(params.M, dtype=float)
    Nfac = np.ascontiguousarray(params.Nfac, dtype=float)
    dA = _kernels.adjoint(M, Nfac, H, direct, d)
    Xp = X[:-1]
    grads["M"] += dA.T @ (Xp @ Nfac.T)
    grads["Nfac"] += (dA @ M).T @ Xp
    grads["b"] += dA.sum(axis=0)

    for name in grads:
        if not params.trainable.get(name, False):
            grads[name] = np.zeros_like(grads[name])
    return GradientBundle(grads, loss, out)


def sgd_step(params: RnnParams, grads: GradientBundle, alpha: float) -> RnnParams:
    changes = {}
    for name, value in params.blocks().items():
        g = grads.grads.get(name)
        if g is None or np.shape(g) != np.shape(value):
            raise ValueError(f"gradient for {name!r} has wrong shape")
        if not params.trainable.get(name, False) or alpha == 0:
            continue
        new = value - alpha * g
        changes[name] = float(new) if np.ndim(new) == 0 else new
    return params.replace(**changes) if changes else params


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(params: RnnParams, path, meta: Optional[dict] = None) -> None:
    """Write params as JSON: scalars inline, arrays as {shape, data} records.

    Floats are written with repr round-trip precision, so load() is exact.
    """
    arrays = {"M": params.M, "Nfac": params.Nfac, "b": params.b}
    if params.w_out is not None:
        arrays["w_out"] = params.w_out
    doc = {
        "format": "ghostlab-rnn-checkpoint/1",
        "arrays": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in arrays.items()},
        "scalars": {"tau": params.tau, "kappa_star": params.kappa_star,
                    "c": float(params.c), "b_out": float(params.b_out)},
        "readout": params.readout,
        "sigmoid_out": params.sigmoid_out,
        "trainable": params.trainable,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Return (params, meta)."""
    doc = json.loads(Path(path).read_text())
    arr = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"])
           for k, v in doc["arrays"].items()}
    s = doc["scalars"]
    params = RnnParams(arr["M"], arr["Nfac"], arr["b"], tau=s["tau"],
                       readout=doc["readout"], kappa_star=s["kappa_star"],
                       c=s["c"], w_out=arr.get("w_out"), b_out=s["b_out"],
                       sigmoid_out=doc["sigmoid_out"], trainable=doc["trainable"])
    return params, doc["meta"]
