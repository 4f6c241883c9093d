"""Closed-form Bayes risk of the unconstrained MAP estimator and its gradients.

For the linear-Gaussian model the risk is ``1/(2 sigma^2) ||M_alpha^+||_F^2`` with
``M_alpha = [M; alpha L]``. With ``L = I`` it reduces to a sum over the
singular values of ``M`` plus a tail for its null space. For weighted angle
selection the per-angle squared singular values are collected in ``Pi``; this
fast path is exact only when the per-angle Gram matrices share eigenvectors,
which :func:`build_pi` checks and records.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SpectralCache",
    "RankDeficientError",
    "LemmaAssumptionWarning",
    "bayes_risk_frobenius",
    "bayes_risk_spectrum_identityL",
    "numerical_rank",
    "bayes_risk_identityL",
    "build_pi",
    "risk_and_gradient_a",
    "exact_risk_and_gradient_a",
    "sample_covariance_factor",
]

RANK_TOL = 1e-10
MAX_EXACT_N = 4096


class RankDeficientError(ValueError):
    pass


class LemmaAssumptionWarning(RuntimeWarning):
    """The fast spectral path is used although the Gram matrices do not commute."""


def _dense(A):
    if A is None:
        return None
    if hasattr(A, "matrix"):
        A = A.matrix
    return A.toarray() if sp.issparse(A) else np.atleast_2d(np.asarray(A, dtype=float))


def bayes_risk_frobenius(M, L, alpha: float, sigma: float) -> float:
    """``1/(2 sigma^2) sum_i sigma_alpha_i^{-2}`` over the singular values of ``[M; alpha L]``."""
    L = _dense(L)
    M = _dense(M)
    n = L.shape[1]
    if M.size == 0:
        M = np.zeros((0, n))
    stacked = np.vstack([M, alpha * L])
    sv = np.linalg.svd(stacked, compute_uv=False)
    if sv.size < n or sv.min() <= RANK_TOL * sv.max():
        raise RankDeficientError("[M; alpha L] does not have full column rank")
    return float(np.sum(sv ** -2.0)) / (2.0 * sigma ** 2)


def numerical_rank(singular_values, tol: float = RANK_TOL) -> int:
    sv = np.asarray(singular_values, dtype=float)
    if sv.size == 0 or sv.max() == 0:
        return 0
    return int(np.count_nonzero(sv > tol * sv.max()))


def bayes_risk_spectrum_identityL(singular_values, r: int, n: int, alpha: float, sigma: float) -> float:
    """Risk for ``L = I`` from the leading ``r`` singular values of ``M``.

    ``1/(2 sigma^2) (sum_{i<=r} 1/(s_i^2 + alpha^2) + (n - r)/alpha^2)``.
    """
    sv = np.sort(np.asarray(singular_values, dtype=float))[::-1][:r]
    return (float(np.sum(1.0 / (sv ** 2 + alpha ** 2))) + (n - r) / alpha ** 2) / (2.0 * sigma ** 2)


def bayes_risk_identityL(M, n: int, alpha: float, sigma: float) -> float:
    """Convenience wrapper: SVD of ``M`` followed by the spectral formula."""
    M = _dense(M)
    sv = np.linalg.svd(M, compute_uv=False) if M.size else np.zeros(0)
    return bayes_risk_spectrum_identityL(sv, numerical_rank(sv), n, alpha, sigma)


@dataclass(frozen=True, eq=False)
class SpectralCache:
    """Per-angle squared singular values aligned on a shared eigenbasis.

    Column ``j`` of ``Pi`` holds the eigenvalues of ``A_j' A_j`` in the common
    basis ``V``. ``offdiag_residual`` is the largest relative off-diagonal mass
    of ``V' A_j' A_j V``; the fast path is exact when it vanishes.
    """

    Pi: np.ndarray
    angles: np.ndarray
    basis: np.ndarray
    offdiag_residual: float
    commuting_assumption_validated: bool


def _commuting_tol():
    return 1e-8


def build_pi(blocks, angles=None, workers: int = 1, tol: float | None = None) -> SpectralCache:
    """Build ``Pi`` from per-angle operators ``A_j`` (sparse or dense).

    The shared basis diagonalizes a fixed generic combination of the Gram
    matrices. When they commute it diagonalizes each of them, so the diagonal
    of ``V' A_j' A_j V`` lists the squared singular values of ``A_j`` in a
    consistent order.
    """
    blocks = [_dense(A) for A in blocks]
    if not blocks:
        raise ValueError("at least one angle is required")
    ell = len(blocks)
    n = blocks[0].shape[1]
    angles = np.arange(ell, dtype=float) if angles is None else np.asarray(angles, dtype=float)
    tol = _commuting_tol() if tol is None else tol

    def gram(A):
        return A.T @ A

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            grams = list(ex.map(gram, blocks))
    else:
        grams = [gram(A) for A in blocks]

    # irrational, distinct weights make accidental eigenvalue ties unlikely
    weights = 1.0 + np.sqrt(2.0) * np.arange(1, ell + 1) / (ell + 1) + np.sqrt(3.0) * (np.arange(ell) % 3)
    combo = np.zeros((n, n))
    for w, G in zip(weights, grams):
        combo += w * G
    _, V = np.linalg.eigh(combo)

    Pi = np.empty((n, ell))
    worst = 0.0
    for j, G in enumerate(grams):
        B = V.T @ G @ V
        diag = np.diag(B).copy()
        Pi[:, j] = np.maximum(diag, 0.0)
        total = np.linalg.norm(B)
        if total > 0:
            worst = max(worst, float(np.linalg.norm(B - np.diag(diag)) / total))
    return SpectralCache(Pi, angles, V, worst, worst <= tol)


def commutator_defect(blocks) -> float:
    """Largest relative ``||[G_i, G_j]||_F`` over pairs of Gram matrices."""
    grams = [_dense(A).T @ _dense(A) for A in blocks]
    worst = 0.0
    for i in range(len(grams)):
        for j in range(i + 1, len(grams)):
            Gi, Gj = grams[i], grams[j]
            denom = np.linalg.norm(Gi) * np.linalg.norm(Gj)
            if denom > 0:
                worst = max(worst, float(np.linalg.norm(Gi @ Gj - Gj @ Gi) / denom))
    return worst


def _check_design(p):
    p = np.asarray(p, dtype=float).reshape(-1)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("design weights must be finite and nonnegative")
    return p


def risk_and_gradient_a(cache: SpectralCache, p, alpha: float, sigma: float, beta: float = 0.0):
    """Fast spectral risk ``J(p)`` plus ``beta ||p||_1`` and its gradient.

    ``h = Pi (p*p)``; ``J = 1/(2 sigma^2) sum 1/(h + alpha^2) + beta sum(p)``;
    ``grad = -sigma^{-2} p * (Pi' (h + alpha^2)^{-2}) + beta``. On the
    nonnegative orthant the l1 term is linear, so its gradient is ``beta``.
    """
    p = _check_design(p)
    if p.size != cache.Pi.shape[1]:
        raise ValueError("design length does not match the cache")
    if not cache.commuting_assumption_validated:
        warnings.warn(
            f"per-angle Gram matrices do not commute (off-diagonal residual "
            f"{cache.offdiag_residual:.2e}); spectral fast path is approximate",
            LemmaAssumptionWarning, stacklevel=2)
    h = cache.Pi @ (p * p)
    shifted = h + alpha ** 2
    J = float(np.sum(1.0 / shifted)) / (2.0 * sigma ** 2) + beta * float(p.sum())
    grad = -(p * (cache.Pi.T @ shifted ** -2.0)) / sigma ** 2 + beta
    return J, grad


def exact_risk_and_gradient_a(blocks, p, alpha: float, sigma: float, beta: float = 0.0,
                              L=None, max_n: int = MAX_EXACT_N):
    """Risk and gradient from the eigendecomposition of ``sum p_j^2 A_j'A_j + alpha^2 L'L``.

    ``dJ/dp_k = -sigma^{-2} p_k tr(A_k' A_k H^{-2}) + beta``.
    """
    p = _check_design(p)
    blocks = list(blocks)
    if p.size != len(blocks):
        raise ValueError("design length does not match the number of blocks")
    n = blocks[0].shape[1]
    if n > max_n:
        raise ValueError(f"exact path limited to n <= {max_n} (got {n})")
    LtL = np.eye(n) if L is None else _dense(L).T @ _dense(L)
    H = alpha ** 2 * LtL
    for pj, A in zip(p, blocks):
        if pj != 0:
            Ad = _dense(A)
            H += pj ** 2 * (Ad.T @ Ad)
    evals, V = np.linalg.eigh(H)
    if evals.min() <= 0:
        raise RankDeficientError("regularized Gram matrix is not positive definite")
    J = float(np.sum(1.0 / evals)) / (2.0 * sigma ** 2) + beta * float(p.sum())
    grad = np.full(p.size, float(beta))
    inv2 = evals ** -2.0
    for k, A in enumerate(blocks):
        if p[k] == 0:
            continue
        B = (A @ V) if sp.issparse(A) else _dense(A) @ V
        grad[k] -= p[k] * float(np.sum((B * B) @ inv2)) / sigma ** 2
    return J, grad


def sample_covariance_factor(ts, ridge: float) -> np.ndarray:
    """``L`` with ``L'L`` equal to the inverse of the ridged sample covariance."""
    if not ridge > 0:
        raise ValueError("ridge must be positive")
    data = ts.data if hasattr(ts, "data") else np.asarray(ts, dtype=float)
    if data.shape[0] < 2:
        raise ValueError("need at least two samples")
    cov = np.cov(data, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov) + ridge * np.eye(data.shape[1])
    evals, V = np.linalg.eigh(cov)
    return (V / np.sqrt(evals)).T
