"""Central finite differences of the task loss, the oracle for BPTT."""
from __future__ import annotations

import numpy as np

from .rnn import RnnParams, TaskSpec, bptt_gradient, forward


def _with_block(params: RnnParams, name: str, value) -> RnnParams:
    if np.ndim(value) == 0:
        value = float(value)
    return params.replace(**{name: value})


def finite_difference_gradient(params: RnnParams, task: TaskSpec, eps: float = 1e-5) -> dict:
    """Central differences for every trainable block; frozen blocks get zeros."""
    out = {}
    for name, value in params.blocks().items():
        value = np.array(value, dtype=float)
        g = np.zeros_like(value)
        if params.trainable.get(name, False):
            flat = value.reshape(-1)
            gf = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                lp = forward(_with_block(params, name, value.copy()), task).loss
                flat[i] = orig - eps
                lm = forward(_with_block(params, name, value.copy()), task).loss
                flat[i] = orig
                gf[i] = (lp - lm) / (2 * eps)
        out[name] = g
    return out


def relative_errors(analytic: dict, numeric: dict, floor: float = 1e-3) -> dict:
    """Worst entrywise relative error per block.

    The denominator is max(|a|, |n|, floor * max|block|, 1e-12) so entries that
    are tiny compared with the rest of their block are not judged on noise.
    """
    errs = {}
    for name, a in analytic.items():
        a = np.asarray(a, dtype=float)
        n = np.asarray(numeric[name], dtype=float)
        scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)))
        den = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor * scale, 1e-12))
        errs[name] = float(np.max(np.abs(a - n) / den, initial=0.0))
    return errs


def gradient_check(params: RnnParams, task: TaskSpec, eps: float = 1e-5) -> float:
    """Worst relative error between BPTT and central differences over all blocks."""
    errs = relative_errors(bptt_gradient(params, task).grads,
                           finite_difference_gradient(params, task, eps))
    return max(errs.values())


def random_instance(rng: np.random.Generator, N: int, K: int, steps: int,
                    readout: str = "latent"):
    """Small random network and matching task for oracle checks."""
    dt = 5.0
    task = TaskSpec(T=steps * dt / 2, dt=dt, x0=float(rng.uniform(-1, 1)))
    M = rng.normal(0, 1.0, (N, K))
    Nfac = rng.normal(0, 1.0, (K, N))
    b = rng.normal(0, 0.5, N)
    tau = float(rng.uniform(8, 20))
    if readout == "latent":
        params = RnnParams(M, Nfac, b, tau=tau, kappa_star=float(rng.uniform(-0.5, 0.5)),
                           c=float(rng.uniform(0.5, 3.0)), trainable={"c": True})
    else:
        params = RnnParams(M, Nfac, b, tau=tau, readout="linear",
                           w_out=rng.normal(0, 1.0, N), b_out=float(rng.normal()),
                           sigmoid_out=bool(rng.integers(2)))
    return params, task
