"""Statistical permutation-symmetry diagnostics of a model's effective matrix.

All variances are population (divide-by-N) variances.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .datagen import data_moments
from .model import ToyModel


def effective_matrix(model: ToyModel) -> np.ndarray:
    """``W = W_out @ W_in``, shape ``(n_s, n_s)``."""
    return model.W_out @ model.W_in


def _square(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {W.shape}")
    return W


def _offdiag_sumsq(W: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", W, W) - np.diag(W) ** 2


def diag_fluctuation(W) -> float:
    return float(np.var(np.diag(_square(W))))


def bias_fluctuation(b) -> float:
    return float(np.var(np.asarray(b, dtype=np.float64)))


def offdiag_symmetry(W, p: float) -> float:
    """Variance across rows of the per-row interference variance ``var(x) * sum_{j!=i} W_ij^2``."""
    W = _square(W)
    return float(np.var(data_moments(p)[2] * _offdiag_sumsq(W)))


def lyapunov_rows(W) -> np.ndarray:
    """Per-row ``sum |W_ij|^3 / (sum W_ij^2)^{3/2}`` over ``j != i``; NaN for rows
    without a nonzero off-diagonal entry."""
    W = _square(W)
    A = np.abs(W)
    np.fill_diagonal(A, 0.0)
    sq = np.einsum("ij,ij->i", A, A)
    cube = np.einsum("ij,ij,ij->i", A, A, A)
    out = np.full(W.shape[0], np.nan)
    ok = sq > 0
    out[ok] = cube[ok] / sq[ok] ** 1.5
    return out


def lyapunov_stat(W) -> float:
    """Worst-case (max over rows) Lyapunov ratio.

    Rows whose off-diagonal part is identically zero are excluded with a
    warning; if every row is excluded the statistic is NaN.
    """
    rows = lyapunov_rows(W)
    bad = np.isnan(rows)
    if bad.any():
        warnings.warn(f"lyapunov statistic undefined for {int(bad.sum())} all-zero off-diagonal rows; excluded",
                      RuntimeWarning, stacklevel=2)
    if bad.all():
        return float("nan")
    return float(np.max(rows[~bad]))


@dataclass
class EffectiveStats:
    W: np.ndarray
    diag_mean: float
    diag_var: float
    bias_mean: float
    bias_var: float
    row_offdiag_mean: np.ndarray
    row_offdiag_sumsq: np.ndarray
    delta_var_noise: float
    lyapunov: float

    def summary(self) -> dict:
        """Scalar fields only."""
        return {
            "diag_mean": self.diag_mean,
            "diag_var": self.diag_var,
            "bias_mean": self.bias_mean,
            "bias_var": self.bias_var,
            "delta_var_noise": self.delta_var_noise,
            "lyapunov": self.lyapunov,
        }


def stats_report(model: ToyModel, p: float) -> EffectiveStats:
    W = effective_matrix(model)
    diag = np.diag(W)
    n = W.shape[0]
    offsum = W.sum(axis=1) - diag
    lyap = lyapunov_stat(W)
    return EffectiveStats(
        W=W,
        diag_mean=float(diag.mean()),
        diag_var=diag_fluctuation(W),
        bias_mean=float(model.b.mean()),
        bias_var=bias_fluctuation(model.b),
        row_offdiag_mean=offsum / max(n - 1, 1),
        row_offdiag_sumsq=_offdiag_sumsq(W),
        delta_var_noise=offdiag_symmetry(W, p),
        lyapunov=lyap,
    )
