"""Inner MAP reconstruction as a convex quadratic program.

Solves::

    min_f  1/2 f'Qf + b'f   s.t.  Ce f - ce = 0,  Ci f - ci >= 0

with ``Q = M'M + alpha^2 L'L`` and ``b = -M'd - alpha^2 L'L mu``. Direct
factorizations handle the unconstrained and equality-constrained cases; a
primal-dual interior-point method with Mehrotra's predictor-corrector handles
inequalities. All Newton systems go through :class:`ReducedKKT`, which
eliminates slacks and inequality multipliers and factorizes the remaining
``(n + m_e)`` system once per iteration.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

__all__ = [
    "QpError",
    "ConstraintSpec",
    "QpProblem",
    "QpSolution",
    "KKTResiduals",
    "ReducedKKT",
    "solve",
    "solve_unconstrained",
    "solve_equality",
    "solve_interior_point",
    "kkt_residuals",
]

KKT_REGULARIZATION = 1e-10
REGULARIZATION_SHIFTS = (0.0, 1e-14, 1e-12, 1e-10)
ACTIVE_PENALTY = 1e12
POLISH_RETRIES = 2
WOODBURY_ROWS = 0.6  # Woodbury when M has fewer rows than this fraction of n
FRACTION_TO_BOUNDARY = 0.995


class QpError(RuntimeError):
    """Inner solve failure; ``trace`` holds the iteration history when available."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = tuple(trace)


@dataclass(frozen=True)
class ConstraintSpec:
    """Linear constraints on the image.

    ``kind`` is one of ``unconstrained``, ``equality_sum``, ``nonnegative``,
    ``box`` or ``general``. For ``equality_sum`` a ``c_e`` of ``None`` means the
    total mass is supplied per problem (e.g. the mass of the true image).
    """

    kind: str = "unconstrained"
    c_e: float | None = None
    lo: float = 0.0
    hi: float = 1.0
    Ce: np.ndarray | None = field(default=None, repr=False)
    ce: np.ndarray | None = field(default=None, repr=False)
    Ci: object = field(default=None, repr=False)
    ci: np.ndarray | None = field(default=None, repr=False)

    KINDS = ("unconstrained", "equality_sum", "nonnegative", "box", "general")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "box" and not self.lo < self.hi:
            raise ValueError(f"box needs lo < hi, got [{self.lo}, {self.hi}]")

    @classmethod
    def unconstrained(cls):
        return cls("unconstrained")

    @classmethod
    def equality_sum(cls, c_e=None):
        return cls("equality_sum", c_e=c_e)

    @classmethod
    def nonnegative(cls):
        return cls("nonnegative")

    @classmethod
    def box(cls, lo=0.0, hi=1.0):
        return cls("box", lo=float(lo), hi=float(hi))

    @classmethod
    def general(cls, Ce=None, ce=None, Ci=None, ci=None):
        return cls("general", Ce=Ce, ce=ce, Ci=Ci, ci=ci)

    @classmethod
    def parse(cls, text: str) -> "ConstraintSpec":
        """Parse ``unconstrained|equality[:c]|nonnegative|box[:lo:hi]``."""
        parts = text.strip().lower().split(":")
        name = parts[0]
        if name in ("unconstrained", "none"):
            return cls.unconstrained()
        if name in ("equality", "equality_sum", "eq"):
            return cls.equality_sum(float(parts[1]) if len(parts) > 1 else None)
        if name in ("nonnegative", "nonneg"):
            return cls.nonnegative()
        if name == "box":
            if len(parts) == 3:
                return cls.box(float(parts[1]), float(parts[2]))
            if len(parts) == 1:
                return cls.box()
        raise ValueError(f"cannot parse constraint {text!r}")

    @property
    def label(self) -> str:
        return {"equality_sum": "equality", "nonnegative": "nonneg"}.get(self.kind, self.kind)

    @property
    def has_inequalities(self) -> bool:
        if self.kind == "general":
            return self.Ci is not None and self.Ci.shape[0] > 0
        return self.kind in ("nonnegative", "box")

    def lower(self, n: int, mass: float | None = None):
        """Return ``(Ce, ce, Ci, ci)`` with dense ``Ce`` and CSR ``Ci``."""
        Ce = np.zeros((0, n))
        ce = np.zeros(0)
        Ci = sp.csr_matrix((0, n))
        ci = np.zeros(0)
        if self.kind == "equality_sum":
            c = self.c_e if self.c_e is not None else mass
            if c is None:
                raise ValueError("equality constraint needs a target mass")
            Ce = np.ones((1, n))
            ce = np.array([float(c)])
        elif self.kind == "nonnegative":
            Ci = sp.identity(n, format="csr")
            ci = np.zeros(n)
        elif self.kind == "box":
            Ci = sp.vstack([sp.identity(n), -sp.identity(n)], format="csr")
            ci = np.concatenate([np.full(n, self.lo), np.full(n, -self.hi)])
        elif self.kind == "general":
            if self.Ce is not None:
                Ce = np.atleast_2d(np.asarray(self.Ce, dtype=float))
                ce = np.asarray(self.ce, dtype=float).reshape(-1)
            if self.Ci is not None:
                Ci = sp.csr_matrix(self.Ci)
                ci = np.asarray(self.ci, dtype=float).reshape(-1)
        return Ce, ce, Ci, ci


def _as_operator(M):
    if hasattr(M, "matrix"):
        return M.matrix
    return M if sp.issparse(M) else np.atleast_2d(np.asarray(M, dtype=float))


@dataclass(frozen=True, eq=False)
class QpProblem:
    """Convex QP data.

    ``Q`` may be omitted when ``gram = (M, shift)`` describes ``Q = M'M + shift*I``;
    the dense matrix is then built only if a dense factorization is needed.
    """

    b: np.ndarray
    Q: np.ndarray | None = None
    Ce: np.ndarray = None
    ce: np.ndarray = None
    Ci: sp.csr_matrix = None
    ci: np.ndarray = None
    gram: tuple | None = None
    alpha: float | None = None
    L: object = None
    prior_mean: np.ndarray | None = None

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).reshape(-1)
        n = b.size
        object.__setattr__(self, "b", b)
        if self.Q is None and self.gram is None:
            raise ValueError("either Q or gram must be given")
        if self.Q is not None:
            Q = self.Q.toarray() if sp.issparse(self.Q) else np.asarray(self.Q, dtype=float)
            if Q.shape != (n, n):
                raise ValueError(f"Q has shape {Q.shape}, expected {(n, n)}")
            object.__setattr__(self, "Q", Q)
        Ce = np.zeros((0, n)) if self.Ce is None else np.atleast_2d(np.asarray(self.Ce, dtype=float))
        ce = np.zeros(Ce.shape[0]) if self.ce is None else np.asarray(self.ce, dtype=float).reshape(-1)
        Ci = sp.csr_matrix((0, n)) if self.Ci is None else sp.csr_matrix(self.Ci)
        ci = np.zeros(Ci.shape[0]) if self.ci is None else np.asarray(self.ci, dtype=float).reshape(-1)
        if Ce.shape[1] != n or ce.size != Ce.shape[0]:
            raise ValueError("equality constraint dimensions do not match")
        if Ci.shape[1] != n or ci.size != Ci.shape[0]:
            raise ValueError("inequality constraint dimensions do not match")
        object.__setattr__(self, "Ce", Ce)
        object.__setattr__(self, "ce", ce)
        object.__setattr__(self, "Ci", Ci)
        object.__setattr__(self, "ci", ci)

    @classmethod
    def from_map(
        cls,
        M,
        d,
        alpha: float,
        constraints: ConstraintSpec | None = None,
        L=None,
        prior_mean=None,
        mass: float | None = None,
        Q=None,
    ) -> "QpProblem":
        """Build the MAP problem for operator ``M``, data ``d`` and prior ``(mu, L)``.

        ``L=None`` means the identity. A precomputed dense ``Q`` can be passed in
        to share it between problems with the same operator.
        """
        M = _as_operator(M)
        n = M.shape[1]
        d = np.asarray(d, dtype=float).reshape(-1)
        if d.size != M.shape[0]:
            raise ValueError(f"data has {d.size} entries, operator has {M.shape[0]} rows")
        mu = np.zeros(n) if prior_mean is None else np.asarray(prior_mean, dtype=float)
        a2 = float(alpha) ** 2
        if L is None:
            b = -(M.T @ d) - a2 * mu
            gram = (M, a2)
        else:
            L = _as_operator(L)
            b = -(M.T @ d) - a2 * (L.T @ (L @ mu))
            gram = None
            if Q is None:
                MtM = M.T @ M
                LtL = L.T @ L
                MtM = MtM.toarray() if sp.issparse(MtM) else MtM
                LtL = LtL.toarray() if sp.issparse(LtL) else LtL
                Q = MtM + a2 * LtL
        constraints = constraints or ConstraintSpec.unconstrained()
        Ce, ce, Ci, ci = constraints.lower(n, mass)
        return cls(b=np.asarray(b).reshape(-1), Q=Q, Ce=Ce, ce=ce, Ci=Ci, ci=ci, gram=gram,
                   alpha=float(alpha), L=L, prior_mean=mu)

    @property
    def n(self) -> int:
        return self.b.size

    @property
    def m_e(self) -> int:
        return self.Ce.shape[0]

    @property
    def m_i(self) -> int:
        return self.Ci.shape[0]

    @cached_property
    def single_entry_rows(self):
        """``(cols, vals)`` when every inequality row has exactly one nonzero."""
        Ci = self.Ci
        if Ci.shape[0] == 0 or not np.all(np.diff(Ci.indptr) == 1):
            return None
        return Ci.indices.copy(), Ci.data.copy()

    @cached_property
    def dense_Q(self) -> np.ndarray:
        if self.Q is not None:
            return self.Q
        M, shift = self.gram
        MtM = M.T @ M
        MtM = MtM.toarray() if sp.issparse(MtM) else np.array(MtM)
        MtM[np.diag_indices_from(MtM)] += shift
        return MtM

    def apply_Q(self, x) -> np.ndarray:
        if self.Q is not None:
            return self.Q @ x
        M, shift = self.gram
        return M.T @ (M @ x) + shift * x

    def objective(self, f) -> float:
        return 0.5 * float(f @ self.apply_Q(f)) + float(self.b @ f)


class KKTResiduals(NamedTuple):
    r_d: np.ndarray
    r_e: np.ndarray
    r_i: np.ndarray
    complementarity: np.ndarray
    comp_measure: float

    def norms(self) -> tuple[float, float, float, float]:
        return (float(np.linalg.norm(self.r_d)), float(np.linalg.norm(self.r_e)),
                float(np.linalg.norm(self.r_i)), float(self.comp_measure))


@dataclass(frozen=True, eq=False)
class QpSolution:
    f_hat: np.ndarray
    lambda_eq: np.ndarray
    slack: np.ndarray
    lambda_ineq: np.ndarray
    comp_measure: float
    iterations: int
    residuals: tuple[float, float, float]
    trace: tuple = ()
    polished: bool = False
    factorization: object = None  # active-set ReducedKKT when polished


class ReducedKKT:
    """Factorization of ``[[Q + Ci' D Ci, -Ce'], [Ce, 0]]`` for diagonal ``D >= 0``.

    ``W = Q + Ci' D Ci + reg*I`` is factorized by dense Cholesky, or through the
    Woodbury identity when ``Q = M'M + shift*I`` with fewer rows in ``M`` than
    unknowns and ``Ci' D Ci`` is diagonal. Equality constraints are handled by
    a Schur complement on ``W``.
    """

    def __init__(self, problem: QpProblem, D=None, reg: float = KKT_REGULARIZATION,
                 method: str = "auto"):
        self.problem = problem
        n = problem.n
        extra = None
        extra_diag = None
        if D is None or problem.m_i == 0:
            extra_diag = np.zeros(n)
        elif problem.single_entry_rows is not None:
            cols, vals = problem.single_entry_rows
            extra_diag = np.bincount(cols, weights=np.asarray(D, dtype=float) * vals ** 2, minlength=n)
        else:
            extra = (problem.Ci.T @ sp.diags(np.asarray(D, dtype=float)) @ problem.Ci).tocsr()
            if _is_diagonal(extra):
                extra_diag = extra.diagonal()

        if method == "auto":
            method = "dense"
            if problem.gram is not None and extra_diag is not None:
                M = problem.gram[0]
                if M.shape[0] < WOODBURY_ROWS * n:
                    method = "woodbury"
        self.method = method
        self.D = None if D is None else np.asarray(D, dtype=float)
        try:
            if method == "woodbury":
                M, shift = problem.gram
                self._M = M
                self._dt = shift + extra_diag + reg
                if np.any(self._dt <= 0):
                    raise np.linalg.LinAlgError("nonpositive diagonal")
                if sp.issparse(M):
                    C = _weighted_outer(M, 1.0 / self._dt)
                else:
                    C = (M / self._dt) @ M.T
                C[np.diag_indices_from(C)] += 1.0
                self._cho = sla.cho_factor(C, lower=False, check_finite=False)
            elif method == "dense":
                W = np.array(problem.dense_Q, dtype=float, copy=True)
                if extra_diag is not None:
                    W[np.diag_indices_from(W)] += extra_diag
                else:
                    W += extra.toarray()
                W[np.diag_indices_from(W)] += reg
                self._cho = _regularized_cholesky(W)
            else:
                raise ValueError(f"unknown factorization method {method!r}")
        except np.linalg.LinAlgError as exc:
            raise QpError(f"reduced KKT matrix is not positive definite ({exc})") from None

        self._schur = None
        if problem.m_e > 0:
            Ce = problem.Ce
            self._Y = self._solve_W(Ce.T)
            S = Ce @ self._Y
            try:
                self._schur = sla.cho_factor(S, check_finite=False)
            except np.linalg.LinAlgError:
                raise QpError("saddle-point matrix is singular: equality constraints are "
                              "rank deficient") from None
            if np.linalg.cond(S) > 1e14:
                raise QpError("saddle-point matrix is singular: equality constraints are "
                              "rank deficient")

    def _solve_W(self, r):
        if self.method == "woodbury":
            x = r / (self._dt[:, None] if r.ndim == 2 else self._dt)
            y = sla.cho_solve(self._cho, self._M @ x, check_finite=False)
            corr = self._M.T @ y
            return x - corr / (self._dt[:, None] if r.ndim == 2 else self._dt)
        return sla.cho_solve(self._cho, r, check_finite=False)

    def solve(self, r1, r2=None):
        """Solve for ``(x, y)`` with ``W x - Ce' y = r1`` and ``Ce x = r2``."""
        x0 = self._solve_W(np.asarray(r1, dtype=float))
        if self._schur is None:
            return x0, np.zeros(0)
        r2 = np.zeros(self.problem.m_e) if r2 is None else np.asarray(r2, dtype=float)
        y = sla.cho_solve(self._schur, r2 - self.problem.Ce @ x0, check_finite=False)
        return x0 + self._Y @ y, y


def _regularized_cholesky(W: np.ndarray):
    """Cholesky of ``W``; on breakdown retry with small diagonal shifts relative to ``max|W_ii|``.

    Late interior-point iterates put ``lambda/s ~ 1e16`` on nearly active rows,
    where a plain factorization can fail on round-off alone.
    """
    scale = float(np.max(np.abs(np.diag(W)))) if W.size else 0.0
    for shift in REGULARIZATION_SHIFTS:
        A = W.copy()
        A[np.diag_indices_from(A)] += shift * scale
        try:
            return sla.cho_factor(A, lower=False, overwrite_a=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("not positive definite after regularization")


_PAIR_CACHE: dict = {}


def _pair_expansion(M) -> sp.csr_matrix:
    """Sparse ``P`` with ``(P @ v).reshape(m, m)`` = upper triangle of ``M diag(v) M'``.

    Built once per operator and cached while the operator is alive.
    """
    key = id(M)
    hit = _PAIR_CACHE.get(key)
    if hit is not None and hit[0]() is M:
        return hit[1]
    m, n = M.shape
    Mc = sp.csc_matrix(M)
    Mc.sort_indices()
    rows, cols, vals = [], [], []
    for j in range(n):
        lo, hi = Mc.indptr[j], Mc.indptr[j + 1]
        r = Mc.indices[lo:hi]
        a = Mc.data[lo:hi]
        s_idx, t_idx = np.triu_indices(r.size)
        rows.append(r[s_idx] * m + r[t_idx])
        vals.append(a[s_idx] * a[t_idx])
        cols.append(np.full(s_idx.size, j))
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m * m, n))
    for k in [k for k, (ref, _) in _PAIR_CACHE.items() if ref() is None]:
        del _PAIR_CACHE[k]
    _PAIR_CACHE[key] = (weakref.ref(M), P)
    return P


def _weighted_outer(M, v) -> np.ndarray:
    """Upper triangle of ``M diag(v) M'`` as a dense array (lower part zero)."""
    m = M.shape[0]
    return (_pair_expansion(M) @ v).reshape(m, m)


def _is_diagonal(A: sp.csr_matrix) -> bool:
    coo = A.tocoo()
    off = coo.row != coo.col
    return not np.any(coo.data[off] != 0)


def _refine(problem, kkt, r1, r2, x, y, steps=2):
    """Iterative refinement against the unregularized saddle system."""
    for _ in range(steps):
        res1 = r1 - (problem.apply_Q(x) - problem.Ce.T @ y)
        res2 = (r2 - problem.Ce @ x) if problem.m_e else None
        dx, dy = kkt.solve(res1, res2)
        x = x + dx
        y = y + dy
    return x, y


def solve_unconstrained(problem: QpProblem, kkt: ReducedKKT | None = None) -> QpSolution:
    """Minimize ``1/2 f'Qf + b'f`` by Cholesky (constraints must be absent)."""
    if problem.m_e or problem.m_i:
        raise ValueError("solve_unconstrained called on a constrained problem")
    kkt = kkt or ReducedKKT(problem)
    r1 = -problem.b
    f, _ = kkt.solve(r1)
    f, _ = _refine(problem, kkt, r1, None, f, np.zeros(0))
    rd = problem.apply_Q(f) + problem.b
    return QpSolution(f, np.zeros(0), np.zeros(0), np.zeros(0), 0.0, 1,
                      (float(np.linalg.norm(rd)), 0.0, 0.0))


def solve_equality(problem: QpProblem, kkt: ReducedKKT | None = None) -> QpSolution:
    """Solve the equality-constrained saddle-point system (no inequalities)."""
    if problem.m_i:
        raise ValueError("solve_equality called on a problem with inequalities")
    kkt = kkt or ReducedKKT(problem)
    r1, r2 = -problem.b, problem.ce
    f, lam = kkt.solve(r1, r2)
    f, lam = _refine(problem, kkt, r1, r2, f, lam)
    rd = problem.apply_Q(f) + problem.b - problem.Ce.T @ lam
    re = problem.Ce @ f - problem.ce
    return QpSolution(f, lam, np.zeros(0), np.zeros(0), 0.0, 1,
                      (float(np.linalg.norm(rd)), float(np.linalg.norm(re)), 0.0))


def kkt_residuals(problem: QpProblem, point, interior: bool = True) -> KKTResiduals:
    """Evaluate the KKT blocks (centrality zero) at ``point``.

    ``point`` is a :class:`QpSolution` or a tuple ``(f, lambda_eq, s, lambda_ineq)``.
    With ``interior=True`` slacks and multipliers must be strictly positive;
    ``interior=False`` admits boundary points such as exact KKT solutions.
    """
    if isinstance(point, QpSolution):
        f, le, s, li = point.f_hat, point.lambda_eq, point.slack, point.lambda_ineq
    else:
        f, le, s, li = point
    f = np.asarray(f, dtype=float)
    le = np.asarray(le, dtype=float).reshape(-1)
    s = np.asarray(s, dtype=float).reshape(-1)
    li = np.asarray(li, dtype=float).reshape(-1)
    if f.size != problem.n or le.size != problem.m_e or s.size != problem.m_i or li.size != problem.m_i:
        raise ValueError("point dimensions do not match the problem")
    if interior and (np.any(s <= 0) or np.any(li <= 0)):
        raise ValueError("slacks and inequality multipliers must be strictly positive")
    if not interior and (np.any(s < 0) or np.any(li < 0)):
        raise ValueError("slacks and inequality multipliers must be nonnegative")
    r_d = problem.apply_Q(f) + problem.b - problem.Ce.T @ le - problem.Ci.T @ li
    r_e = problem.Ce @ f - problem.ce
    r_i = problem.Ci @ f - problem.ci - s
    comp = s * li
    mu = float(comp.sum() / problem.m_i) if problem.m_i else 0.0
    return KKTResiduals(r_d, r_e, r_i, comp, mu)


def _bounds_from_rows(problem: QpProblem):
    """Per-variable bounds implied by single-entry inequality rows."""
    n = problem.n
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    Ci = problem.Ci
    rows = np.flatnonzero(np.diff(Ci.indptr) == 1)
    cols = Ci.indices[Ci.indptr[rows]]
    c = Ci.data[Ci.indptr[rows]]
    pos, neg = c > 0, c < 0
    np.maximum.at(lb, cols[pos], problem.ci[rows[pos]] / c[pos])
    np.minimum.at(ub, cols[neg], problem.ci[rows[neg]] / c[neg])
    return lb, ub


def _starting_point(problem: QpProblem):
    f = np.zeros(problem.n) if problem.prior_mean is None else np.array(problem.prior_mean, dtype=float)
    lb, ub = _bounds_from_rows(problem)
    width = np.where(np.isfinite(ub - lb), ub - lb, 1.0)
    margin = 0.01 * np.minimum(width, 1.0)
    f = np.where(np.isfinite(lb), np.maximum(f, lb + margin), f)
    f = np.where(np.isfinite(ub), np.minimum(f, ub - margin), f)
    s = np.maximum(problem.Ci @ f - problem.ci, 1.0)
    return f, np.zeros(problem.m_e), s, np.ones(problem.m_i)


def _max_step(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, tau * float(np.min(-v[neg] / dv[neg])))


def solve_interior_point(
    problem: QpProblem,
    tol: float = 1e-8,
    max_iter: int = 100,
    tau: float = FRACTION_TO_BOUNDARY,
    method: str = "auto",
    polish_result: bool = True,
) -> QpSolution:
    """Primal-dual interior-point method with Mehrotra predictor-corrector.

    Stops when ``max(|r_d|, |r_e|, |r_i|, mu) <= tol * (1 + |b|)``. Slacks and
    inequality multipliers stay strictly positive throughout. The converged
    point is then polished on its active set (see :func:`polish`); if that
    fails the target is tightened by 100x, at most twice, and the iteration
    continues.
    """
    if problem.m_i == 0:
        raise ValueError("interior-point solve needs at least one inequality")
    Ci, Ce = problem.Ci, problem.Ce
    mi = problem.m_i
    target = tol * (1.0 + np.linalg.norm(problem.b))
    f, le, s, li = _starting_point(problem)
    retries = POLISH_RETRIES
    trace = []
    first = None

    for it in range(max_iter + 1):
        res = kkt_residuals(problem, (f, le, s, li))
        nd, ne, ni, mu = res.norms()
        worst = max(nd, ne, ni, mu)
        if first is None:
            first = worst
        if it:
            trace[-1]["residual"] = worst
        if worst <= target:
            sol = QpSolution(f, le, s, li, mu, it, (nd, ne, ni), tuple(trace))
            if not polish_result:
                return sol
            polished = polish(problem, sol, method=method)
            if polished.polished or retries == 0 or it == max_iter:
                return polished
            # active set not yet identifiable: tighten and keep iterating
            retries -= 1
            target *= 1e-2
        if it == max_iter:
            break
        if not np.isfinite(worst) or worst > 1e12 * (1.0 + first):
            raise QpError(f"interior point diverged at iteration {it} "
                          f"(residual {worst:.3e}); problem may be infeasible", trace)

        kkt = ReducedKKT(problem, li / s, method=method)
        r1, r2, r3 = -res.r_d, -res.r_e, -res.r_i

        def direction(r4):
            rhs = r1 + Ci.T @ ((r4 + li * r3) / s)
            df, dle = kkt.solve(rhs, r2)
            ds = Ci @ df - r3
            dli = (r4 - li * ds) / s
            return df, dle, ds, dli

        # predictor: affine scaling step
        _, _, ds_a, dl_a = direction(-s * li)
        a_aff = min(_max_step(s, ds_a, 1.0), _max_step(li, dl_a, 1.0))
        mu_aff = float((s + a_aff * ds_a) @ (li + a_aff * dl_a)) / mi
        centering = (mu_aff / mu) ** 3

        # corrector with centring and second-order term
        df, dle, ds, dli = direction(-s * li - ds_a * dl_a + centering * mu)
        step = min(_max_step(s, ds, tau), _max_step(li, dli, tau))
        trace.append({"iteration": it, "mu": mu, "centering": centering, "step": step})
        if step < 1e-14:
            raise QpError(f"interior point stalled at iteration {it} (step {step:.1e})", trace)
        f = f + step * df
        le = le + step * dle
        s = s + step * ds
        li = li + step * dli

    raise QpError(f"interior point did not converge in {max_iter} iterations "
                  f"(residual {worst:.3e} > {target:.3e})", trace)


def active_set_kkt(problem: QpProblem, slack, lambda_ineq, method: str = "auto",
                   active=None) -> ReducedKKT:
    """Factorization of the KKT system in the limit ``mu -> 0`` on an active set.

    By default a row is active when ``lambda_i > s_i``. Bound rows get a stiff
    diagonal penalty (``Lambda S^{-1}`` in the strictly complementary limit),
    which Cholesky handles accurately and which keeps large grids on the fast
    paths. General rows are imposed exactly as equalities, because a stiff
    penalty on them costs about ``log10(penalty)`` digits. In that case the
    returned factorization belongs to the augmented problem, whose equality
    block is ``[Ce; Ci_active]``.
    """
    lam = np.asarray(lambda_ineq, dtype=float)
    if active is None:
        active = lam > np.asarray(slack)
    if problem.single_entry_rows is None and np.any(active):
        idx = np.flatnonzero(active)
        Ce = np.vstack([problem.Ce, problem.Ci[idx].toarray()])
        ce = np.concatenate([problem.ce, problem.ci[idx]])
        return ReducedKKT(replace(problem, Ce=Ce, ce=ce, Ci=None, ci=None), method=method)
    D = lam / np.asarray(slack, dtype=float)
    stiff = max(ACTIVE_PENALTY, float(D.max()) if D.size else 0.0)
    return ReducedKKT(problem, np.where(active, stiff, 0.0), method=method)


def _active_multipliers(problem: QpProblem, f, lambda_eq, active):
    """Least-squares multipliers of the active rows from stationarity."""
    r = problem.apply_Q(f) + problem.b
    if problem.m_e:
        r = r - problem.Ce.T @ lambda_eq
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return np.zeros(0), float(np.linalg.norm(r))
    rows = problem.single_entry_rows
    if rows is not None:
        cols, vals = rows
        c_act = cols[idx]
        lam = r[c_act] / vals[idx]
        if np.unique(c_act).size == idx.size:
            resid = r.copy()
            resid[c_act] = 0.0
            return lam, float(np.linalg.norm(resid))
    CA = problem.Ci[idx].toarray().T
    lam, *_ = np.linalg.lstsq(CA, r, rcond=None)
    return lam, float(np.linalg.norm(CA @ lam - r))


def _solve_on_active_set(problem: QpProblem, s, li, active, method):
    """Solve on ``active``; returns ``(kkt, f, lambda_eq, lambda_active, stationarity)``."""
    kkt = active_set_kkt(problem, s, li, method=method, active=active)
    if kkt.problem is problem:
        r1 = -problem.b + problem.Ci.T @ (kkt.D * problem.ci)
        f, le = kkt.solve(r1, problem.ce if problem.m_e else None)
        lam, stat = _active_multipliers(problem, f, le, active)
        return kkt, f, le, lam, stat
    f, y = kkt.solve(-problem.b, np.concatenate([problem.ce, problem.ci[active]]))
    le, lam = y[:problem.m_e], y[problem.m_e:]
    r = problem.apply_Q(f) + problem.b - problem.Ce.T @ le - problem.Ci[active].T @ lam
    return kkt, f, le, lam, float(np.linalg.norm(r))


def polish(problem: QpProblem, solution: QpSolution, method: str = "auto",
           feas_tol: float = 1e-9, rounds: int = 5) -> QpSolution:
    """Re-solve on the active set guessed from an interior-point solution.

    An interior iterate is off the exact solution by ``O(s_i)`` on active rows,
    which matters when their multipliers are small. The rows with
    ``lambda_i > s_i`` are held active and the equality-constrained problem is
    solved once. Rows the result violates are added, rows whose multiplier (from
    stationarity) is negative are released, and the solve is repeated at most
    ``rounds`` times. The polished point is kept only if it satisfies the KKT
    conditions to ``feas_tol``; otherwise the interior iterate is returned.
    Slacks are recomputed from the polished point (floored at round-off level
    to stay positive) and active rows take the polished multipliers, so the pair
    stays strictly positive and consistent. The factorization of the final
    active-set system is attached for reuse.
    """
    s, li = solution.slack, solution.lambda_ineq
    active = li > s
    scale_b = 1.0 + float(np.linalg.norm(problem.b))
    for _ in range(rounds):
        try:
            kkt, f, le, lam, stat = _solve_on_active_set(problem, s, li, active, method)
        except QpError:
            return solution
        viol = problem.Ci @ f - problem.ci
        tol = feas_tol * (1.0 + float(np.max(np.abs(f))))
        add = ~active & (viol < -tol)
        drop = np.zeros_like(active)
        drop[np.flatnonzero(active)] = lam < -feas_tol * scale_b
        if not np.any(add) and not np.any(drop):
            if stat > feas_tol * scale_b or np.any(np.abs(viol[active]) > tol):
                return solution
            floor = np.finfo(float).eps * (1.0 + np.abs(problem.ci))
            slack = np.maximum(viol, floor)
            lam_full = li.copy()
            lam_full[active] = np.where(lam > 0, lam, li[active])
            out = replace(solution, f_hat=f, lambda_eq=le if problem.m_e else solution.lambda_eq,
                          slack=slack, lambda_ineq=lam_full, polished=True, factorization=kkt)
            nd, ne, ni, mu = kkt_residuals(problem, out).norms()
            return replace(out, comp_measure=mu, residuals=(nd, ne, ni))
        active = (active | add) & ~drop
    return solution


def solve(problem: QpProblem, tol: float = 1e-8, max_iter: int = 100, kkt=None) -> QpSolution:
    """Dispatch to the direct or interior-point solver by constraint type."""
    if problem.m_i:
        return solve_interior_point(problem, tol=tol, max_iter=max_iter)
    if problem.m_e:
        return solve_equality(problem, kkt=kkt)
    return solve_unconstrained(problem, kkt=kkt)
