"""Analytic comparison estimators: per-column least squares and a sample-covariance LMMSE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .signal import PilotBlock

LOADING = 1e-6


def _symbols(pilots) -> np.ndarray:
    s = pilots.symbols if isinstance(pilots, PilotBlock) else np.asarray(pilots)
    if s.ndim == 2:   # a diagonal pilot matrix
        s = np.diag(s)
    if np.any(s == 0):
        raise ContractError("pilot symbols must be nonzero")
    return s


def ls_estimate(Y, pilots) -> np.ndarray:
    """Divide each received column by its pilot; works on any leading batch shape."""
    Y = np.asarray(getattr(Y, "Y", Y))
    s = _symbols(pilots)
    if Y.shape[-1] != s.size:
        raise ContractError(f"Y has {Y.shape[-1]} columns but there are {s.size} pilots")
    return Y / s


@dataclass(frozen=True)
class CovarianceEstimate:
    R_H: np.ndarray    # (NQ, NQ) over row-major vec(H)
    count: int
    shape: tuple[int, int]

    @classmethod
    def from_channels(cls, H: np.ndarray, loading: float = LOADING) -> "CovarianceEstimate":
        """Sample second moment of vec(H) over all leading axes, with diagonal loading."""
        H = np.asarray(H)
        if H.ndim < 2:
            raise ContractError("need channels shaped (..., N, Q)")
        n, q = H.shape[-2:]
        v = H.reshape(-1, n * q)
        if v.shape[0] == 0:
            raise ContractError("no channels to estimate a covariance from")
        R = v.T @ v.conj() / v.shape[0]
        R = 0.5 * (R + R.conj().T)
        R += loading * np.trace(R).real / (n * q) * np.eye(n * q)
        return cls(R, v.shape[0], (n, q))


def lmmse_estimate(Y, pilots, cov: CovarianceEstimate, noise_variance: float) -> np.ndarray:
    """Wiener-filter the LS estimate: R (R + C_e)^-1 vec(H_ls), C_e = diag(sigma^2 / |s_q|^2)."""
    if noise_variance < 0:
        raise ContractError("noise variance must be non-negative")
    h_ls = ls_estimate(Y, pilots)
    n, q = h_ls.shape[-2:]
    if cov.R_H.shape != (n * q, n * q):
        raise ContractError(f"covariance is {cov.R_H.shape}, channel is {n}x{q}")
    if not np.any(cov.R_H):
        return np.zeros_like(h_ls)
    if noise_variance == 0:
        return h_ls
    err = np.tile(noise_variance / np.abs(_symbols(pilots)) ** 2, n)
    A = cov.R_H + np.diag(err)
    try:
        W = np.linalg.solve(A.T, cov.R_H.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"LMMSE system is singular: {exc}") from exc
    if not np.isfinite(W).all():
        raise NumericError("LMMSE filter is not finite")
    v = h_ls.reshape(*h_ls.shape[:-2], n * q)
    return (v @ W.T).reshape(h_ls.shape)
