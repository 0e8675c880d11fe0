"""Multi-chain convergence diagnostics: split R-hat and effective sample size."""

from __future__ import annotations

import numpy as np


def split_rhat(chains) -> np.ndarray:
    """Split-chain potential scale reduction factor.

    ``chains`` has shape (n_chains, n_draws) or (n_chains, n_draws, n_coords).
    Each chain is cut in half so that within-chain drift also inflates R-hat.
    """
    x = np.asarray(chains, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[..., None]
    m, n, k = x.shape
    half = n // 2
    if half < 2:
        out = np.full(k, np.nan)
        return float(out[0]) if squeeze else out
    x = np.concatenate([x[:, :half], x[:, n - half:]], axis=0)
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = half * means.var(axis=0, ddof=1)
    var_plus = (half - 1) / half * W + B / half
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    r = np.where(W == 0, np.where(B == 0, 1.0, np.inf), r)
    return float(r[0]) if squeeze else r


def _autocov(x):
    n = x.shape[-1]
    nfft = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, nfft, axis=-1)
    ac = np.fft.irfft(f * np.conj(f), nfft, axis=-1)[..., :n]
    return ac / n


def ess(chains) -> np.ndarray:
    """Effective sample size from pooled autocorrelations.

    Uses Geyer's initial monotone positive-pair truncation on the
    multi-chain autocorrelation estimate.
    """
    x = np.asarray(chains, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[..., None]
    m, n, k = x.shape
    out = np.empty(k)
    for j in range(k):
        c = x[:, :, j]
        acov = _autocov(c)  # (m, n)
        chain_var = acov[:, 0] * n / (n - 1.0)
        W = chain_var.mean()
        var_plus = W * (n - 1.0) / n
        if m > 1:
            var_plus += c.mean(axis=1).var(ddof=1)
        if var_plus <= 0:
            out[j] = float(m * n)
            continue
        rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
        rho[0] = 1.0
        # pair sums
        npairs = n // 2
        P = rho[0:2 * npairs:2] + rho[1:2 * npairs:2]
        tau = -1.0
        prev = np.inf
        for t in range(npairs):
            p = P[t]
            if p <= 0:
                break
            p = min(p, prev)
            prev = p
            tau += 2.0 * p
        tau = max(tau, 1.0 / np.log10(m * n)) if m * n > 1 else 1.0
        out[j] = m * n / tau
    return float(out[0]) if squeeze else out


def weights_ess(log_weights) -> float:
    """Kish effective sample size of self-normalized importance weights."""
    lw = np.asarray(log_weights, dtype=float).ravel()
    w = np.exp(lw - lw.max())
    return float(w.sum() ** 2 / np.sum(w * w))
