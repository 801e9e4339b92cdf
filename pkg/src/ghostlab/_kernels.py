"""Compiled inner loops for the factored Euler recursion and its adjoint.

Only the sequential parts live here; parameter gradients are assembled from
the stored sweeps with a couple of matrix products in numpy.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def rollout(M, Nfac, b, d, x0, S):
    N = M.shape[0]
    X = np.empty((S, N))
    H = np.empty((max(S - 1, 0), N))
    X[0, :] = x0
    for k in range(S - 1):
        a = np.dot(M, np.dot(Nfac, X[k])) + b
        h = np.tanh(a)
        H[k] = h
        X[k + 1] = (1.0 - d) * X[k] + d * h
    return X, H


@njit(cache=True)
def adjoint(M, Nfac, H, direct, d):
    """Return dA with dA[k] = dL/da[k], a[k] the pre-activation at step k.

    ``direct[k]`` is dL/dx[k] through the readout only.
    """
    S, N = direct.shape
    dA = np.empty((max(S - 1, 0), N))
    MT = np.ascontiguousarray(M.T)
    NT = np.ascontiguousarray(Nfac.T)
    lam = direct[S - 1].copy()
    for k in range(S - 2, -1, -1):
        da = d * (1.0 - H[k] * H[k]) * lam
        dA[k] = da
        lam = direct[k] + (1.0 - d) * lam + np.dot(NT, np.dot(MT, da))
    return dA
