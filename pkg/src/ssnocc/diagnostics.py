"""Convergence diagnostics: split rank-normalized R-hat and Geyer ESS."""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.special import ndtri


class ConstantChainWarning(UserWarning):
    pass


def _as_chain_matrix(chains) -> np.ndarray:
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("chains must be (n_chains, n_draws)")
    return x


def _split(x: np.ndarray) -> np.ndarray:
    m, n = x.shape
    half = n // 2
    return np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    from scipy.stats import rankdata

    ranks = rankdata(x.ravel(), method="average")
    z = ndtri((ranks - 3.0 / 8.0) / (ranks.size + 0.25))
    return z.reshape(x.shape)


def rhat(chains) -> float:
    """Split-chain rank-normalized potential scale reduction factor.

    Constant chains return 1.0 by convention with a ConstantChainWarning.
    """
    x = _as_chain_matrix(chains)
    if x.shape[0] < 2:
        raise ValueError("rhat requires at least 2 chains")
    if np.ptp(x) == 0:
        warnings.warn("all draws identical; R-hat set to 1", ConstantChainWarning)
        return 1.0
    z = _split(_rank_normalize(x))
    m, n = z.shape
    chain_means = z.mean(axis=1)
    B = n * chain_means.var(ddof=1)
    W = z.var(axis=1, ddof=1).mean()
    if W == 0:
        # chains internally constant but not identical: unbounded disagreement
        return math.inf
    var_plus = (n - 1) / n * W + B / n
    return max(1.0, float(np.sqrt(var_plus / W)))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of one chain via FFT."""
    n = len(x)
    xc = x - x.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n].real
    return acov / n


def ess(chains) -> float:
    """Effective sample size via the multi-chain autocorrelation sum with
    Geyer's initial-positive-sequence truncation.

    Constant chains return the retained-draw count with a warning.
    """
    x = _as_chain_matrix(chains)
    m, n = x.shape
    total = m * n
    if np.ptp(x) == 0:
        warnings.warn("all draws identical; ESS set to draw count", ConstantChainWarning)
        return float(total)
    acov = np.array([_autocovariance(row) for row in x])
    chain_var = acov[:, 0] * n / (n - 1)
    W = chain_var.mean()
    if m > 1:
        B = n * x.mean(axis=1).var(ddof=1)
        var_plus = W * (n - 1) / n + B / n
    else:
        var_plus = W * (n - 1) / n
    if var_plus == 0:
        warnings.warn("zero variance; ESS set to draw count", ConstantChainWarning)
        return float(total)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus  # rho[0] == 1
    # Geyer: sum consecutive pairs while their sum stays positive
    tau = 1.0
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
        t += 2
    return float(min(total, total / tau))
