"""Derivatives of the reconstruction with respect to the design.

Differentiating the KKT conditions at a solved point ``(f, lambda_e, s, lambda_i)``
gives ``J = -K^{-1} [G; 0; 0; 0]`` (first block), where ``K`` is the KKT
Jacobian and ``G = d/dp (Q(p) f + b(p))``. Eliminating ``ds`` and
``dlambda_i`` leaves a symmetric reduced system, so one factorization serves
both Jacobian-vector and transposed products.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator
from scipy.sparse.linalg import norm as sparse_norm

from .qp import QpError, QpProblem, QpSolution, ReducedKKT, active_set_kkt
from .tomo import ForwardOperatorA, ForwardOperatorB, ProjectionBank

__all__ = [
    "SensitivityError",
    "DegeneracyWarning",
    "KinkWarning",
    "SensitivityOperator",
    "build_sensitivity",
    "grad_rhs_problem_a",
    "grad_rhs_problem_b",
    "dense_columns",
]



class SensitivityError(RuntimeError):
    pass


class DegeneracyWarning(RuntimeWarning):
    """Complementarity is close to degenerate; the Jacobian may be unreliable."""


class KinkWarning(RuntimeWarning):
    """Analytic and finite-difference rotation derivatives disagree."""


class SensitivityOperator:
    """Matrix-free ``J_f(p)`` at one solved inner problem."""

    def __init__(self, kkt: ReducedKKT, rhs: LinearOperator):
        self.kkt = kkt
        self.rhs = rhs
        self.shape = rhs.shape  # (n, ell)

    def jvp(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float).reshape(-1)
        if v.size != self.shape[1]:
            raise ValueError(f"jvp expects {self.shape[1]} entries, got {v.size}")
        x, _ = self.kkt.solve(self.rhs.matvec(v))
        return -x

    def vjp(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float).reshape(-1)
        if w.size != self.shape[0]:
            raise ValueError(f"vjp expects {self.shape[0]} entries, got {w.size}")
        x, _ = self.kkt.solve(w)
        return -self.rhs.rmatvec(x)

    def dense(self) -> np.ndarray:
        return np.column_stack([self.jvp(e) for e in np.eye(self.shape[1])])


def build_sensitivity(
    problem: QpProblem,
    solution: QpSolution,
    rhs: LinearOperator,
    gap_tol: float = 1e-12,
    kkt: ReducedKKT | None = None,
    limit: str = "active-set",
) -> SensitivityOperator:
    """Factorize the KKT Jacobian at ``solution`` for products with ``J_f``.

    ``rhs`` maps a design direction to ``d/dp (Q f + b)`` (shape ``(n, ell)``).
    Without inequalities the matrix does not depend on the solution, so a
    factorization shared between problems with the same ``Q`` can be passed
    as ``kkt``. ``gap_tol=0`` silences the degeneracy warning.

    ``limit="active-set"`` replaces ``Lambda S^{-1}`` by its value at
    ``mu -> 0`` under strict complementarity: constraints with
    ``lambda_i > s_i`` are held fixed and the others are dropped. This is the derivative of
    the exact solution map. ``limit="interior"`` keeps ``lambda/s`` from the
    final interior-point iterate, which is biased by ``O(mu)`` when some
    multipliers are small.
    """
    if limit not in ("active-set", "interior"):
        raise ValueError(f"unknown limit {limit!r}")
    D = None
    if problem.m_i:
        s, lam = solution.slack, solution.lambda_ineq
        if np.any(s <= 0) or np.any(lam <= 0):
            raise SensitivityError("slacks and multipliers must be strictly positive")
        gap = np.maximum(s, lam)
        scale = max(1.0, float(np.max(gap)))
        if gap.min() < gap_tol * scale:
            warnings.warn(
                f"near-degenerate complementarity: min max(s_i, lambda_i) = {gap.min():.2e}, "
                f"min s_i*lambda_i = {np.min(s * lam):.2e}",
                DegeneracyWarning, stacklevel=2)
        D = lam / s
    if rhs.shape[0] != problem.n:
        raise ValueError("rhs operator does not match the problem size")
    if kkt is not None and D is None:
        return SensitivityOperator(kkt, rhs)
    if limit == "active-set" and solution.factorization is not None:
        return SensitivityOperator(solution.factorization, rhs)
    try:
        if limit == "active-set" and D is not None:
            kkt = active_set_kkt(problem, s, lam)
        else:
            kkt = ReducedKKT(problem, D)
    except QpError as exc:
        detail = ""
        if problem.m_i:
            detail = f"; min s_i*lambda_i = {np.min(solution.slack * solution.lambda_ineq):.3e}"
        raise SensitivityError(f"KKT matrix is singular{detail} ({exc})") from None
    return SensitivityOperator(kkt, rhs)


def dense_columns(G: LinearOperator) -> np.ndarray:
    return np.column_stack([G.matvec(e) for e in np.eye(G.shape[1])])


def grad_rhs_problem_a(op: ForwardOperatorA, f_hat, d_p) -> LinearOperator:
    """``d/dp (Q f + b)`` for weighted angle selection.

    Column ``k`` is ``2 A_k' (p_k A_k f - (d(p))_k)`` with ``A_k = T R(theta_k)``
    and ``d(p)`` the selected, scaled data. Columns of angles outside the
    support are zero.
    """
    f_hat = np.asarray(f_hat, dtype=float)
    d_p = np.asarray(d_p, dtype=float).reshape(-1)
    ell, nr, n = len(op.angles), op.n_rays, op.n
    sup = op.support
    if d_p.size != sup.size * nr:
        raise ValueError("data does not match the operator support")
    if sup.size:
        A_s = sp.vstack([op.blocks[k] for k in sup], format="csr")
        resid = op.apply(f_hat) - d_p
    else:
        A_s = sp.csr_matrix((0, n))
        resid = np.zeros(0)

    def matvec(v):
        v = np.asarray(v, dtype=float).reshape(-1)
        return 2.0 * (A_s.T @ (np.repeat(v[sup], nr) * resid))

    def rmatvec(z):
        z = np.asarray(z, dtype=float).reshape(-1)
        out = np.zeros(ell)
        if sup.size:
            out[sup] = 2.0 * ((A_s @ z) * resid).reshape(sup.size, nr).sum(axis=1)
        return out

    return LinearOperator((n, ell), matvec=matvec, rmatvec=rmatvec, dtype=float)


def grad_rhs_problem_b(
    op: ForwardOperatorB,
    f_hat,
    d,
    bank: ProjectionBank,
    f_true=None,
    noise_z=None,
    noise_level: float = 0.0,
    mode: str = "analytic",
    check_kinks: bool = False,
) -> LinearOperator:
    """``d/dp (Q f + b)`` for free angles (per degree).

    With ``f_true`` given, the data are treated as re-simulated at each angle
    vector, ``d(p) = M(p) f_true + c(p) z`` with ``c = level ||M f_true|| / sqrt(m)``,
    and their dependence on ``p`` is included. Otherwise ``d`` is held fixed.
    """
    f_hat = np.asarray(f_hat, dtype=float)
    d = np.asarray(d, dtype=float).reshape(-1)
    ell, nr, n = len(op.angles), op.n_rays, op.n
    for a in op.angles:
        if not 0.0 <= a <= 180.0:
            raise ValueError(f"angle {a} outside [0, 180]")
    dA = [bank.view_derivative(a, mode=mode) for a in op.angles]
    if check_kinks and mode != "fd":
        for a, D in zip(op.angles, dA):
            fd = bank.view_derivative(a, mode="fd")
            raw = bank.view_derivative(a, mode="analytic-raw")
            rel = sparse_norm(raw - fd) / max(sparse_norm(fd), 1e-300)
            if rel > 1e-3:
                warnings.warn(f"rotation derivative at {a:.6g} deg crosses a kink "
                              f"(relative mismatch {rel:.2e}); using guarded values",
                              KinkWarning, stacklevel=2)
    A = op.blocks
    resid = (op.apply(f_hat) - d).reshape(ell, nr)
    err = f_hat if f_true is None else f_hat - np.asarray(f_true, dtype=float)

    cols = np.empty((n, ell))
    for k in range(ell):
        cols[:, k] = dA[k].T @ resid[k] + A[k].T @ (dA[k] @ err)
    if f_true is not None and noise_z is not None and noise_level > 0:
        z = np.asarray(noise_z, dtype=float).reshape(ell, nr)
        clean = op.apply(f_true).reshape(ell, nr)
        norm = np.linalg.norm(clean)
        m = ell * nr
        Mtz = op.adjoint(z.reshape(-1))
        for k in range(ell):
            dc = noise_level / np.sqrt(m) * float(clean[k] @ (dA[k] @ f_true)) / norm
            cols[:, k] -= dc * Mtz

    return LinearOperator((n, ell), matvec=lambda v: cols @ np.asarray(v).reshape(-1),
                          rmatvec=lambda z: cols.T @ np.asarray(z).reshape(-1), dtype=float)
