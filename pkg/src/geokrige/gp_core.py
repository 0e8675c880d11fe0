"""Dense symmetric linear algebra and Gaussian conditioning.

Everything downstream factorizes covariance matrices through
:func:`cholesky`, which applies a small, bounded jitter only when the plain
factorization fails.  Jitter events are reported on the
``geokrige.diagnostics`` logger so that near-singular systems (expected for
KILE with nearly coincident sites) are never silently regularized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

log = logging.getLogger("geokrige.diagnostics")

JITTER_SCALE = 1e-10
MAX_ESCALATIONS = 3


class SingularMatrixError(np.linalg.LinAlgError):
    """Cholesky factorization failed even after jitter escalation.

    ``index`` is the 1-based order of the leading minor that was not
    positive definite, as reported by LAPACK ``potrf``.
    """

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class Cholesky:
    """Lower Cholesky factor of ``A + jitter * I``."""

    factor: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.factor.shape[0]

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.factor))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        x, info = lapack.dpotrs(self.factor, b, lower=1)
        if info != 0:  # pragma: no cover - only on malformed input
            raise ValueError(f"dpotrs failed with info={info}")
        return x

    def inverse(self) -> np.ndarray:
        inv, info = lapack.dpotri(self.factor, lower=1)
        if info != 0:
            raise SingularMatrixError("inverse of singular factor", index=info)
        inv = np.tril(inv)
        return inv + np.tril(inv, -1).T


def _potrf(a: np.ndarray) -> tuple[np.ndarray, int]:
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    return c, info


def cholesky(a: np.ndarray, *, allow_jitter: bool = True) -> Cholesky:
    """Factorize a symmetric positive definite matrix.

    On failure a diagonal jitter of ``1e-10 * mean(diag(a))`` is added and
    escalated by a factor of 10 at most three times.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SingularMatrixError("matrix has non-finite entries", index=0)
    c, info = _potrf(a)
    if info == 0:
        return Cholesky(c)
    if info < 0:  # pragma: no cover
        raise ValueError(f"dpotrf rejected argument {-info}")
    first_failure = info
    if allow_jitter:
        scale = float(np.mean(np.diag(a)))
        jitter = JITTER_SCALE * (scale if scale > 0 else 1.0)
        eye = np.eye(a.shape[0])
        for _ in range(MAX_ESCALATIONS):
            c, info = _potrf(a + jitter * eye)
            if info == 0:
                log.warning(
                    "cholesky: added jitter %.3e (leading minor %d failed)",
                    jitter, first_failure,
                )
                return Cholesky(c, jitter)
            jitter *= 10.0
    raise SingularMatrixError(
        f"matrix is not positive definite: leading minor {first_failure} failed"
        + (" after jitter escalation" if allow_jitter else ""),
        index=first_failure,
    )


def chol_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``a^{-1} b`` for SPD ``a`` via :func:`cholesky`."""
    return cholesky(a).solve(b)


@dataclass(frozen=True)
class GaussianConditional:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.clip(np.diag(self.cov), 0.0, None)


def condition(cxx, cxy, cyy, y, factor: Cholesky | None = None) -> GaussianConditional:
    """Condition a zero-mean jointly Gaussian ``(x, y)`` on an observed ``y``.

    Parameters
    ----------
    cxx : (m, m) array
        Prior covariance of ``x``.
    cxy : (m, n) array
        Cross covariance ``Cov[x, y]``.
    cyy : (n, n) array
        Covariance of ``y``; ignored when ``factor`` is supplied.
    y : (n,) array
    """
    cxx = np.atleast_2d(np.asarray(cxx, dtype=float))
    cxy = np.atleast_2d(np.asarray(cxy, dtype=float))
    y = np.asarray(y, dtype=float)
    if factor is None:
        factor = cholesky(cyy)
    gamma = factor.solve(cxy.T)  # (n, m)
    mean = gamma.T @ y
    cov = cxx - cxy @ gamma
    cov = 0.5 * (cov + cov.T)
    return GaussianConditional(mean, cov)


def batched_cholesky_inverse(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Invert a stack of SPD matrices.

    Returns ``(inverse, logdet, ok)``.  Entries that fail to factorize are
    flagged in ``ok`` and left as NaN rather than jittered; callers treat
    them as zero-density states.
    """
    nb, n, _ = a.shape
    try:
        chol = np.linalg.cholesky(a)
        ok = np.ones(nb, dtype=bool)
    except np.linalg.LinAlgError:
        chol = np.zeros_like(a)
        ok = np.zeros(nb, dtype=bool)
        for b in range(nb):
            c, info = lapack.dpotrf(a[b], lower=1, clean=1)
            if info == 0:
                chol[b] = c
                ok[b] = True
    logdet = np.full(nb, np.nan)
    inv = np.full_like(a, np.nan)
    for b in np.flatnonzero(ok):
        ci, info = lapack.dpotri(chol[b], lower=1)
        if info != 0:
            ok[b] = False
            continue
        inv[b] = ci
    diag = np.diagonal(chol, axis1=1, axis2=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        logdet[ok] = 2.0 * np.sum(np.log(diag[ok]), axis=1)
    # dpotri fills the lower triangle; the strict upper one is still zero
    d = np.diagonal(inv, axis1=1, axis2=2).copy()
    inv = inv + np.swapaxes(inv, 1, 2)
    idx = np.arange(n)
    inv[:, idx, idx] = d
    return inv, logdet, ok
