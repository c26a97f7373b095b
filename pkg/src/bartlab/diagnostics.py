"""Rank-normalised split R-hat and bulk effective sample size."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


def _split(x: np.ndarray) -> np.ndarray:
    """(chains, draws) -> (2 * chains, draws // 2), dropping a middle draw."""
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, x.shape[1] - n:]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _degenerate(x: np.ndarray) -> bool:
    return not np.all(np.isfinite(x)) or np.all(np.ptp(x, axis=1) == 0)


def _rhat(x: np.ndarray) -> float:
    m, n = x.shape
    w = x.var(axis=1, ddof=1).mean()
    b = n * x.mean(axis=1).var(ddof=1)
    return float(np.sqrt(((n - 1) / n * w + b / n) / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size, axis=1)
    return np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n] / n


def _ess(x: np.ndarray) -> float:
    m, n = x.shape
    if n < 4:
        return float(m * n)
    acov = _autocov(x)
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer's initial positive then initial monotone sequence over pairs
    pairs = rho[: (n // 2) * 2].reshape(-1, 2).sum(axis=1)
    stop = np.argmax(pairs < 0) if np.any(pairs < 0) else len(pairs)
    pairs = np.minimum.accumulate(pairs[:stop])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def split_rhat(x) -> float | None:
    """Split R-hat for draws shaped (chains, draws).

    The largest of the rank-normalised bulk, the rank-normalised tail and
    the classic split statistic; rank normalisation alone saturates when
    chains do not overlap at all. ``None`` when undefined (constant chains).
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 1 or x.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    s = _split(x)
    if _degenerate(s):
        return None
    bulk = _rhat(_rank_normalize(s))
    folded = np.abs(s - np.median(s))
    tail = _rhat(_rank_normalize(folded)) if not _degenerate(folded) else bulk
    return max(bulk, tail, _rhat(s))


def bulk_ess(x) -> float | None:
    x = np.asarray(x, dtype=float)
    if x.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    s = _split(x)
    if _degenerate(s):
        return None
    return _ess(_rank_normalize(s))


def basic_ess(x) -> float | None:
    """ESS of the raw (not rank-normalised) split chains; used for Monte
    Carlo standard errors of means."""
    x = np.asarray(x, dtype=float)
    s = _split(x)
    if _degenerate(s):
        return None
    return _ess(s)
