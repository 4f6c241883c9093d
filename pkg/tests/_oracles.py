"""Independent reference implementations used by the tests."""

from __future__ import annotations

import copy
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from oedtomo.qp import ConstraintSpec, QpProblem, solve
from oedtomo.tomo import ForwardOperatorA


def segment_lengths_by_sampling(start, end, width, height, samples=200_000):
    """Pixel intersection lengths of a segment by dense midpoint sampling."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    t = (np.arange(samples) + 0.5) / samples
    pts = start + t[:, None] * (end - start)
    cols = np.floor(pts[:, 0]).astype(int)
    rows = np.floor(pts[:, 1]).astype(int)
    ok = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    out = np.zeros(width * height)
    np.add.at(out, rows[ok] * width + cols[ok], np.linalg.norm(end - start) / samples)
    return out


def rotation_by_enumeration(size, theta_deg):
    """Dense bilinear rotation built pixel by pixel with explicit loops."""
    n = size * size
    R = np.zeros((n, n))
    c = (size - 1) / 2.0
    t = np.deg2rad(theta_deg)
    for r in range(size):
        for q in range(size):
            x, y = q - c, c - r
            u = np.cos(t) * x + np.sin(t) * y
            v = -np.sin(t) * x + np.cos(t) * y
            col, row = u + c, c - v
            col = round(col) if abs(col - round(col)) < 1e-9 else col
            row = round(row) if abs(row - round(row)) < 1e-9 else row
            r0, c0 = int(np.floor(row)), int(np.floor(col))
            fr, fc = row - r0, col - c0
            for dr, wr in ((0, 1 - fr), (1, fr)):
                for dc, wc in ((0, 1 - fc), (1, fc)):
                    rr, cc = r0 + dr, c0 + dc
                    if 0 <= rr < size and 0 <= cc < size and wr * wc > 0:
                        R[r * size + q, rr * size + cc] += wr * wc
    return R


def dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)


def random_qp(rng, n, m_e, m_i):
    """Strictly convex QP with a strictly feasible point, as a QpProblem."""
    G = rng.standard_normal((n, n))
    Q = G @ G.T + 0.5 * np.eye(n)
    b = rng.standard_normal(n) * 3.0
    x0 = rng.standard_normal(n)
    Ce = rng.standard_normal((m_e, n))
    ce = Ce @ x0
    Ci = rng.standard_normal((m_i, n))
    ci = Ci @ x0 - rng.uniform(0.1, 2.0, m_i)
    return QpProblem(b=b, Q=Q, Ce=Ce, ce=ce, Ci=sp.csr_matrix(Ci), ci=ci)


def active_set_oracle(problem: QpProblem, tol=1e-9):
    """Solve a small convex QP by enumerating active sets, smallest first.

    For each candidate set the equality-constrained subproblem is solved
    directly; the first point that is primal feasible with nonnegative
    inequality multipliers is the unique minimizer of a strictly convex QP.
    """
    Q, b = problem.dense_Q, problem.b
    Ce, ce = problem.Ce, problem.ce
    Ci, ci = dense(problem.Ci), problem.ci
    n, m_e, m_i = problem.n, problem.m_e, problem.m_i
    for k in range(0, min(m_i, n - m_e) + 1):
        for act in combinations(range(m_i), k):
            act = list(act)
            A = np.vstack([Ce, Ci[act]])
            rhs = np.concatenate([ce, ci[act]])
            m = A.shape[0]
            K = np.block([[Q, -A.T], [A, np.zeros((m, m))]])
            if np.linalg.matrix_rank(K) < n + m:
                continue
            sol = np.linalg.solve(K, np.concatenate([-b, rhs]))
            f, lam = sol[:n], sol[n:]
            if np.all(Ci @ f - ci >= -tol) and np.all(lam[m_e:] >= -tol):
                full = np.zeros(m_i)
                full[act] = lam[m_e:]
                return f, lam[:m_e], full
    raise ValueError("no KKT point found")


def null_space_equality(Q, b, Ce, ce):
    """Equality-constrained QP by a null-space basis of ``Ce``."""
    x_p = np.linalg.lstsq(Ce, ce, rcond=None)[0]
    _, s, Vt = np.linalg.svd(Ce)
    Z = Vt[np.sum(s > 1e-12):].T
    y = np.linalg.solve(Z.T @ Q @ Z, -Z.T @ (Q @ x_p + b))
    return x_p + Z @ y


def central_difference(fun, x, h):
    x = np.asarray(x, dtype=float)
    out = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h))
    return np.array(out).T


class RandomDesign:
    """Weighted-view least squares ``M(p) = [p_k A_k]`` with random dense blocks.

    Mirrors the structure of the weighted-angle forward operator on a problem
    small enough for finite differences through repeated solves.
    """

    def __init__(self, rng, n=8, ell=3, rays=4, alpha=0.3, constraint=None, noise=0.05):
        self.n, self.ell, self.rays, self.alpha = n, ell, rays, alpha
        self.blocks = tuple(sp.csr_matrix(rng.standard_normal((rays, n))) for _ in range(ell))
        self.f_true = rng.uniform(-0.3, 1.3, n)
        full = np.concatenate([A @ self.f_true for A in self.blocks])
        self.d_full = full + noise * rng.standard_normal(full.size)
        self.constraint = constraint or ConstraintSpec.box()

    def with_constraint(self, constraint):
        other = copy.copy(self)
        other.constraint = constraint
        return other

    def operator(self, p):
        p = np.asarray(p, dtype=float)
        support = np.flatnonzero(p > 0)
        return ForwardOperatorA(np.arange(self.ell, dtype=float), p.copy(), support,
                                self.blocks, self.rays, self.n)

    def solve(self, p, tol=1e-12):
        op = self.operator(p)
        d = op.select(self.d_full)
        prob = QpProblem.from_map(op, d, self.alpha, self.constraint)
        return op, d, prob, solve(prob, tol=tol)
