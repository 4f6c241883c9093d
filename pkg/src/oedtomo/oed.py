"""Outer design loop: empirical Bayes risk, its gradient and the two design problems.

Problem A weights a fixed fine grid of angles and sparsifies the weights with
an l1 penalty; Problem B moves a fixed number of angles. Both minimize the
sample average ``J_N(p) = 1/(2N) sum_i ||f_hat_i(p) - f_i||^2`` (plus
``beta * sum(p)`` for A) by projected steepest descent with an Armijo line
search. Gradients come from implicit differentiation of each inner solve.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
from threadpoolctl import threadpool_limits

from .bayesrisk import bayes_risk_frobenius, bayes_risk_identityL
from .datagen import NoiseSpec, TrainingSet, make_rng, simulate_data
from .qp import WOODBURY_ROWS, ConstraintSpec, QpError, QpProblem, ReducedKKT, solve
from .sensitivity import build_sensitivity, grad_rhs_problem_a, grad_rhs_problem_b
from .tomo import ProjectionBank, assemble_forward_A, assemble_forward_B

__all__ = [
    "DesignVector",
    "OedConfig",
    "OedResult",
    "OedError",
    "OverRegularizedError",
    "Evaluation",
    "ProblemA",
    "ProblemB",
    "empirical_objective",
    "project_increments",
    "increments_to_angles",
    "angles_to_increments",
    "projected_gradient",
    "solve_oed_a",
    "solve_oed_b",
    "LandscapeResult",
    "landscape_scan",
    "alpha_sweep",
    "beta_sweep",
    "mse_at_design",
]

SUPPORT_THRESHOLD = 1e-3
ARMIJO_C = 1e-4


class OedError(RuntimeError):
    pass


class OverRegularizedError(OedError):
    """The l1 penalty removed every angle."""


@dataclass(frozen=True)
class DesignVector:
    """Design parameters: per-angle weights (A) or angle positions in degrees (B).

    For angles, ``lower``/``upper`` are the bounds ``a``/``b`` of the ordered
    increment form ``delta_1 >= a, delta_j >= 0, sum(delta) <= b``.
    """

    values: np.ndarray
    kind: str = "weights"
    lower: float = 0.0
    upper: float = 180.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.kind not in ("weights", "angles"):
            raise ValueError(f"unknown design kind {self.kind!r}")
        if not np.all(np.isfinite(v)):
            raise ValueError("design values must be finite")
        if self.kind == "weights" and np.any(v < 0):
            raise ValueError("design weights must be nonnegative")

    @classmethod
    def weights(cls, values) -> "DesignVector":
        return cls(values, "weights")

    @classmethod
    def angles(cls, values, lower: float = 0.0, upper: float = 180.0) -> "DesignVector":
        return cls(values, "angles", lower, upper)

    def is_feasible(self, tol: float = 1e-12) -> bool:
        v = self.values
        if self.kind == "weights":
            return bool(np.all(v >= 0))
        if v.size == 0:
            return False
        return bool(v[0] >= self.lower - tol and np.all(np.diff(v) >= -tol) and v[-1] <= self.upper + tol)

    @property
    def increments(self) -> np.ndarray:
        return angles_to_increments(self.values)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class OedConfig:
    """Settings of the bilevel problem.

    ``gamma`` is an alternative way to give the regularization: ``alpha = gamma/sigma``.
    """

    alpha: float | None = 1e-2
    sigma: float = 1.0
    beta: float = 0.0
    gamma: float | None = None
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec.box)
    inner_tol: float = 1e-10
    inner_max_iter: int = 100
    outer_tol: float = 1e-6
    max_outer_iter: int = 50
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(1e-3, 0))
    parallel_workers: int = 1
    L: object = None
    prior_mean: np.ndarray | None = None
    support_threshold: float = SUPPORT_THRESHOLD
    n_rays: int | None = None

    def __post_init__(self):
        if self.gamma is not None:
            derived = self.gamma / self.sigma
            if self.alpha is not None and not math.isclose(self.alpha, derived, rel_tol=1e-12):
                raise ValueError("alpha and gamma/sigma disagree")
            object.__setattr__(self, "alpha", derived)
        if self.alpha is None or not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.beta >= 0:
            raise ValueError("beta must be nonnegative")
        if self.parallel_workers < 1:
            raise ValueError("parallel_workers must be at least 1")
        if self.max_outer_iter < 0:
            raise ValueError("max_outer_iter must be nonnegative")


@dataclass(frozen=True, eq=False)
class Evaluation:
    objective: float
    gradient: np.ndarray | None
    sq_errors: np.ndarray  # ||f_hat_i - f_i||^2 per sample
    reconstructions: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class OedResult:
    p_opt: DesignVector
    objective_trace: tuple
    per_sample_mse: np.ndarray  # ||f_hat_i - f_i||^2 / n
    support: np.ndarray | None = None
    reconstructions: np.ndarray | None = None
    phase1: DesignVector | None = None
    phase1_support: np.ndarray | None = None
    beta: float | None = None
    iterations: int = 0
    converged: bool = False

    @property
    def mse(self) -> float:
        return float(np.mean(self.per_sample_mse))


def _map(fn: Callable, items, workers: int) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


class _Experiment:
    """State shared by all evaluations on one training set."""

    def __init__(self, ts: TrainingSet, cfg: OedConfig, bank: ProjectionBank | None = None):
        if len(ts) == 0:
            raise ValueError("training set is empty")
        self.ts = ts
        self.cfg = cfg
        self.grid = ts.grid
        self.bank = bank or ProjectionBank(ts.grid, cfg.n_rays)
        self.n = ts.grid.n
        self.masses = ts.data.sum(axis=1)
        self._gram_L = None
        if cfg.L is not None:
            L = cfg.L.toarray() if sp.issparse(cfg.L) else np.asarray(cfg.L, dtype=float)
            self._gram_L = L.T @ L

    def _problem(self, op, d, i, Q=None):
        cfg = self.cfg
        return QpProblem.from_map(op, d, cfg.alpha, cfg.constraint, L=cfg.L,
                                  prior_mean=cfg.prior_mean, mass=float(self.masses[i]), Q=Q)

    def _shared_Q(self, op):
        """Dense ``Q`` shared by all samples when a dense factorization will be used."""
        M = op.matrix
        if self._gram_L is None and M.shape[0] < WOODBURY_ROWS * self.n:
            return None
        MtM = (M.T @ M).toarray() if M.shape[0] else np.zeros((self.n, self.n))
        prior = self._gram_L if self._gram_L is not None else np.eye(self.n)
        return MtM + self.cfg.alpha ** 2 * prior

    def _shared_kkt(self, problem):
        if self.cfg.constraint.has_inequalities:
            return None
        return ReducedKKT(problem)

    def _solve(self, problem, i, kkt):
        try:
            return solve(problem, tol=self.cfg.inner_tol, max_iter=self.cfg.inner_max_iter, kkt=kkt)
        except QpError as exc:
            raise OedError(f"inner solve failed for sample {i}: {exc}") from exc

    def _reduce(self, parts, grad_size, need_grad, keep):
        N = len(parts)
        sq = np.array([q for q, _, _ in parts])
        J = 0.0
        for q in sq:
            J += q
        J /= 2.0 * N
        grad = None
        if need_grad:
            grad = np.zeros(grad_size)
            for _, g, _ in parts:
                grad += g
            grad /= N
        recon = np.stack([f for _, _, f in parts]) if keep else None
        return J, grad, sq, recon


class ProblemA(_Experiment):
    """Empirical risk of weighted angle selection on a fixed angle grid."""

    def __init__(self, ts: TrainingSet, angles, cfg: OedConfig, bank: ProjectionBank | None = None):
        super().__init__(ts, cfg, bank)
        self.angles = np.asarray(angles, dtype=float).reshape(-1)
        if self.angles.size == 0:
            raise ValueError("angle grid is empty")
        full = self.bank.stacked(self.angles)
        # data on the full grid are simulated once; d(p) selects and scales rows
        self.d_full = [simulate_data(full, ts.data[i], cfg.noise, stream=i) for i in range(len(ts))]

    def evaluate(self, p, need_grad: bool = True, keep: bool = False,
                 allow_empty: bool = False, beta: float | None = None) -> Evaluation:
        p = np.asarray(p, dtype=float).reshape(-1)
        if p.size != self.angles.size:
            raise ValueError(f"design has {p.size} weights, grid has {self.angles.size} angles")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("weights must be finite and nonnegative")
        beta = self.cfg.beta if beta is None else beta
        op = assemble_forward_A(self.angles, p, self.grid, bank=self.bank)
        if op.support.size == 0 and not allow_empty:
            raise OedError("design has empty support")
        Q = self._shared_Q(op)
        d0 = op.select(self.d_full[0])
        kkt = self._shared_kkt(self._problem(op, d0, 0, Q))

        def work(i):
            f = self.ts.data[i]
            d = op.select(self.d_full[i])
            prob = self._problem(op, d, i, Q)
            sol = self._solve(prob, i, kkt)
            err = sol.f_hat - f
            g = None
            if need_grad:
                G = grad_rhs_problem_a(op, sol.f_hat, d)
                S = build_sensitivity(prob, sol, G, gap_tol=0.0, kkt=kkt)
                g = S.vjp(err)
            return float(err @ err), g, sol.f_hat

        parts = _map(work, range(len(self.ts)), self.cfg.parallel_workers)
        J, grad, sq, recon = self._reduce(parts, p.size, need_grad, keep)
        J += beta * float(p.sum())
        if grad is not None:
            grad += beta
        return Evaluation(J, grad, sq, recon)


class ProblemB(_Experiment):
    """Empirical risk of ``ell`` free angles; data are re-simulated at every design."""

    def __init__(self, ts: TrainingSet, cfg: OedConfig, bank: ProjectionBank | None = None,
                 derivative_mode: str = "analytic"):
        super().__init__(ts, cfg, bank)
        self.derivative_mode = derivative_mode

    def evaluate(self, p, need_grad: bool = True, keep: bool = False,
                 workers: int | None = None) -> Evaluation:
        p = np.asarray(p, dtype=float).reshape(-1)
        if p.size == 0:
            raise OedError("design has no angles")
        op = assemble_forward_B(p, self.grid, bank=self.bank)
        Q = self._shared_Q(op)
        noise = self.cfg.noise
        data = [simulate_data(op, self.ts.data[i], noise, stream=i) for i in range(len(self.ts))]
        kkt = self._shared_kkt(self._problem(op, data[0], 0, Q))
        m = op.shape[0]

        def work(i):
            f = self.ts.data[i]
            prob = self._problem(op, data[i], i, Q)
            sol = self._solve(prob, i, kkt)
            err = sol.f_hat - f
            g = None
            if need_grad:
                z = make_rng(noise.seed, i).standard_normal(m) if noise.relative_level > 0 else None
                G = grad_rhs_problem_b(op, sol.f_hat, data[i], self.bank, f_true=f, noise_z=z,
                                       noise_level=noise.relative_level, mode=self.derivative_mode)
                S = build_sensitivity(prob, sol, G, gap_tol=0.0, kkt=kkt)
                g = S.vjp(err)
            return float(err @ err), g, sol.f_hat

        workers = self.cfg.parallel_workers if workers is None else workers
        parts = _map(work, range(len(self.ts)), workers)
        J, grad, sq, recon = self._reduce(parts, p.size, need_grad, keep)
        return Evaluation(J, grad, sq, recon)


def empirical_objective(p, ts: TrainingSet, cfg: OedConfig, angles=None):
    """``(J_N, grad)`` at design ``p``.

    With ``angles`` given, ``p`` holds Problem-A weights on that grid and the
    objective includes ``beta * sum(p)``; otherwise ``p`` lists Problem-B angles.
    """
    if isinstance(p, DesignVector):
        if angles is None and p.kind != "angles":
            raise ValueError("weights need an angle grid")
        p = p.values
    with threadpool_limits(limits=1):
        if angles is not None:
            ev = ProblemA(ts, angles, cfg).evaluate(p)
        else:
            ev = ProblemB(ts, cfg).evaluate(p)
    return ev.objective, ev.gradient


# ---------------------------------------------------------------------------
# projections and the increment parameterization

def increments_to_angles(delta) -> np.ndarray:
    return np.cumsum(np.asarray(delta, dtype=float))


def angles_to_increments(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    return np.concatenate([p[:1], np.diff(p)])


def _project_capped_simplex(u, radius):
    """Euclidean projection onto ``{u >= 0, sum(u) <= radius}``."""
    clipped = np.maximum(u, 0.0)
    if clipped.sum() <= radius:
        return clipped
    if radius <= 0:
        return np.zeros_like(clipped)
    # the sum constraint is active: project onto the scaled simplex
    srt = np.sort(u)[::-1]
    css = np.cumsum(srt) - radius
    k = np.arange(1, u.size + 1)
    # index 0 always qualifies in exact arithmetic; guard against round-off
    hits = np.flatnonzero(srt - css / k > 0)
    rho = hits[-1] if hits.size else 0
    return np.maximum(u - css[rho] / (rho + 1), 0.0)


def project_increments(delta, a: float, b: float) -> np.ndarray:
    """Projection onto ``{delta_1 >= a, delta_j >= 0 (j >= 2), sum(delta) <= b}``."""
    delta = np.asarray(delta, dtype=float).reshape(-1)
    if b < a:
        raise ValueError("empty increment set: upper bound below lower bound")
    shift = np.zeros_like(delta)
    shift[0] = a
    return _project_capped_simplex(delta - shift, b - a) + shift


def projected_gradient(
    fun: Callable,
    x0,
    project: Callable,
    tol: float = 1e-6,
    max_iter: int = 50,
    c: float = ARMIJO_C,
    first_step: float | None = None,
    reject: Callable | None = None,
    callback: Callable | None = None,
):
    """Projected steepest descent with Armijo backtracking (halving).

    ``fun(x) -> (value, gradient)``. The first trial step length is
    Barzilai-Borwein from the previous iteration. ``reject(x)`` marks trial
    points that are not allowed; they are treated as failed steps.
    Returns ``(x, value, gradient, trace, converged)``.
    """
    x = project(np.asarray(x0, dtype=float))
    J, g = fun(x)
    trace = [J]
    t = first_step
    if t is None:
        gmax = float(np.max(np.abs(g))) if g.size else 0.0
        t = 0.5 * max(float(np.max(np.abs(x))), 1.0) / gmax if gmax > 0 else 1.0
    converged = False
    x_prev = g_prev = None
    for it in range(max_iter):
        pg = x - project(x - g)
        if float(np.linalg.norm(pg)) <= tol:
            converged = True
            break
        if x_prev is not None:
            s, y = x - x_prev, g - g_prev
            sy = float(s @ y)
            if sy > 0:
                t = float(s @ s) / sy
        accepted = False
        for _ in range(40):
            x_new = project(x - t * g)
            step = x_new - x
            if not np.any(step):
                break
            if reject is None or not reject(x_new):
                J_new, g_new = fun(x_new)
                if J_new <= J + c * float(g @ step):
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            converged = True  # no admissible descent step left at this resolution
            break
        x_prev, g_prev = x, g
        x, J, g = x_new, J_new, g_new
        trace.append(J)
        if callback is not None:
            callback(it, x, J)
    return x, J, g, trace, converged


# ---------------------------------------------------------------------------
# Problem A

def _support(p, threshold):
    p = np.asarray(p, dtype=float)
    top = float(np.max(p)) if p.size else 0.0
    if top <= 0:
        return np.zeros(0, dtype=int)
    return np.flatnonzero(p > threshold * top)


def solve_oed_a(ts: TrainingSet, angles, cfg: OedConfig, p0=None,
                problem: ProblemA | None = None, keep_reconstructions: bool = False,
                reoptimize: bool = True) -> OedResult:
    """Two-phase sparsified weight design on a fine angle grid.

    Phase 1 minimizes ``J_N + beta * sum(p)`` over ``p >= 0`` from ``p = e``.
    Angles with ``p_i > support_threshold * max(p)`` survive; phase 2
    re-optimizes their weights with ``beta = 0``. With ``reoptimize=False``
    phase 2 is skipped and the result reports the phase-1 weights.
    """
    angles = np.asarray(angles, dtype=float).reshape(-1)
    prob = problem or ProblemA(ts, angles, cfg)
    ell = angles.size
    x0 = np.ones(ell) if p0 is None else np.asarray(p0, dtype=float).reshape(-1)
    if x0.size != ell or np.any(x0 < 0):
        raise ValueError("starting weights must be nonnegative with one entry per angle")
    nonneg = lambda x: np.maximum(x, 0.0)  # noqa: E731

    with threadpool_limits(limits=1):
        def phase1(x):
            ev = prob.evaluate(x, allow_empty=True)
            return ev.objective, ev.gradient

        p1, _, _, trace1, conv1 = projected_gradient(
            phase1, x0, nonneg, tol=cfg.outer_tol, max_iter=cfg.max_outer_iter)
        support = _support(p1, cfg.support_threshold)
        if support.size == 0 or float(np.max(p1)) < 1e-12:
            raise OverRegularizedError(f"beta = {cfg.beta:g} removed every angle; decrease beta")

        def phase2(x):
            full = np.zeros(ell)
            full[support] = x
            ev = prob.evaluate(full, beta=0.0)
            return ev.objective, ev.gradient[support]

        p2 = np.zeros(ell)
        if reoptimize:
            p2s, _, _, trace2, conv2 = projected_gradient(
                phase2, p1[support], nonneg, tol=cfg.outer_tol, max_iter=cfg.max_outer_iter,
                reject=lambda x: not np.any(x > 0))
            p2[support] = p2s
        else:
            p2[support], trace2, conv2 = p1[support], [], True
        final = prob.evaluate(p2, need_grad=False, keep=keep_reconstructions, beta=0.0)

    return OedResult(
        p_opt=DesignVector.weights(p2),
        objective_trace=tuple(trace1) + tuple(trace2),
        per_sample_mse=final.sq_errors / prob.n,
        support=np.flatnonzero(p2 > 0),
        reconstructions=final.reconstructions,
        phase1=DesignVector.weights(p1),
        phase1_support=support,
        beta=cfg.beta,
        iterations=len(trace1) - 1 + max(len(trace2) - 1, 0),
        converged=conv1 and conv2,
    )


def beta_sweep(ts: TrainingSet, angles, cfg: OedConfig, beta_values,
               problem: ProblemA | None = None) -> list[dict]:
    """``solve_oed_a`` for each beta; rows ``(beta, support size, support angles, MSE)``.

    Over-regularized runs are reported with an empty support and NaN MSE.
    """
    angles = np.asarray(angles, dtype=float).reshape(-1)
    prob = problem or ProblemA(ts, angles, cfg)
    rows = []
    for beta in beta_values:
        run_cfg = replace(cfg, beta=float(beta))
        prob.cfg = run_cfg
        try:
            res = solve_oed_a(ts, angles, run_cfg, problem=prob)
            rows.append({"beta": float(beta), "support": len(res.phase1_support),
                         "angles": angles[res.phase1_support], "mse": res.mse,
                         "weights": res.p_opt.values, "result": res})
        except OverRegularizedError:
            rows.append({"beta": float(beta), "support": 0, "angles": np.zeros(0),
                         "mse": float("nan"), "weights": np.zeros(angles.size), "result": None})
    prob.cfg = cfg
    return rows


# ---------------------------------------------------------------------------
# Problem B

def solve_oed_b(ts: TrainingSet, p0, cfg: OedConfig, problem: ProblemB | None = None,
                keep_reconstructions: bool = False) -> OedResult:
    """Angle placement by projected descent on ordered increments.

    ``p = cumsum(delta)``, so ``grad_delta = (dp/ddelta)' grad_p`` is a reversed
    cumulative sum of ``grad_p``.
    """
    if not isinstance(p0, DesignVector):
        p0 = DesignVector.angles(p0)
    if p0.kind != "angles":
        raise ValueError("Problem B needs an angle design")
    if not p0.is_feasible():
        raise ValueError(f"infeasible start {p0.values.tolist()}: angles must be ascending "
                         f"within [{p0.lower}, {p0.upper}]")
    a, b = p0.lower, p0.upper
    prob = problem or ProblemB(ts, cfg)

    def fun(delta):
        ev = prob.evaluate(increments_to_angles(delta))
        return ev.objective, np.cumsum(ev.gradient[::-1])[::-1]

    with threadpool_limits(limits=1):
        delta, _, _, trace, conv = projected_gradient(
            fun, p0.increments, lambda x: project_increments(x, a, b),
            tol=cfg.outer_tol, max_iter=cfg.max_outer_iter)
        p = increments_to_angles(delta)
        final = prob.evaluate(p, need_grad=False, keep=keep_reconstructions)
    return OedResult(
        p_opt=DesignVector.angles(p, a, b),
        objective_trace=tuple(trace),
        per_sample_mse=final.sq_errors / prob.n,
        reconstructions=final.reconstructions,
        iterations=len(trace) - 1,
        converged=conv,
    )


# ---------------------------------------------------------------------------
# scans and sweeps

@dataclass(frozen=True, eq=False)
class LandscapeResult:
    """Objective on the triangle ``p1 >= p2``; cells with ``p1 < p2`` hold NaN."""

    angles: np.ndarray
    values: np.ndarray  # values[i, j] at (p1, p2) = (angles[i], angles[j])
    mode: str

    def cells(self):
        for i, p1 in enumerate(self.angles):
            for j in range(i + 1):
                yield float(p1), float(self.angles[j]), float(self.values[i, j])

    def best(self, k: int = 2):
        rows = sorted(self.cells(), key=lambda c: (c[2], c[0], c[1]))
        return rows[:k]


def scan_angles(step: float, lo: float = 0.0, hi: float = 180.0) -> np.ndarray:
    if not step > 0:
        raise ValueError("scan step must be positive")
    count = int(math.floor((hi - lo) / step + 1e-9))
    return lo + step * np.arange(count + 1)


def _bayes_cell(bank, p, cfg, n):
    M = bank.stacked(p)
    if cfg.L is None:
        return bayes_risk_identityL(M, n, cfg.alpha, cfg.sigma)
    return bayes_risk_frobenius(M, cfg.L, cfg.alpha, cfg.sigma)


def landscape_scan(ts: TrainingSet | None, cfg: OedConfig, step: float = 1.0,
                   mode: str = "empirical", grid=None, lo: float = 0.0,
                   hi: float = 180.0) -> LandscapeResult:
    """Objective over all two-angle designs ``p1 >= p2`` on a regular grid.

    ``mode="empirical"`` evaluates ``J_N`` (inner problems under ``cfg.constraint``);
    ``mode="bayes"`` evaluates the closed-form risk of the unconstrained
    estimator with prior factor ``cfg.L`` (identity when ``None``).
    """
    if mode not in ("empirical", "bayes"):
        raise ValueError(f"unknown scan mode {mode!r}")
    angles = scan_angles(step, lo, hi)
    k = angles.size
    cells = [(i, j) for i in range(k) for j in range(i + 1)]
    values = np.full((k, k), np.nan)

    if mode == "bayes":
        grid = grid if grid is not None else ts.grid
        bank = ProjectionBank(grid, cfg.n_rays)
        for a in angles:
            bank.view(a)
        n = grid.n

        def cell(ij):
            i, j = ij
            return _bayes_cell(bank, [angles[i], angles[j]], cfg, n)
    else:
        prob = ProblemB(ts, cfg)
        for a in angles:
            prob.bank.view(a)

        def cell(ij):
            i, j = ij
            return prob.evaluate([angles[j], angles[i]], need_grad=False, workers=1).objective

    with threadpool_limits(limits=1):
        out = _map(cell, cells, cfg.parallel_workers)
    for (i, j), v in zip(cells, out):
        values[i, j] = v
    return LandscapeResult(angles, values, mode)


def mse_at_design(ts: TrainingSet, p, cfg: OedConfig) -> float:
    """Mean per-pixel squared error ``(1/N) sum ||f_hat_i - f_i||^2 / n`` at angles ``p``."""
    with threadpool_limits(limits=1):
        ev = ProblemB(ts, cfg).evaluate(np.sort(np.asarray(p, dtype=float)), need_grad=False)
    return float(np.mean(ev.sq_errors)) / ts.grid.n


def alpha_sweep(ts: TrainingSet, p_opt, cfg: OedConfig, values=None,
                constraints=None) -> list[dict]:
    """MSE at a fixed angle design across ``alpha`` values and constraint regimes."""
    values = np.logspace(-4, 3, 20) if values is None else np.asarray(values, dtype=float)
    if constraints is None:
        constraints = [ConstraintSpec.unconstrained(), ConstraintSpec.equality_sum(),
                       ConstraintSpec.nonnegative(), ConstraintSpec.box()]
    p = p_opt.values if isinstance(p_opt, DesignVector) else np.asarray(p_opt, dtype=float)
    rows = []
    for con in constraints:
        for a in values:
            mse = mse_at_design(ts, p, replace(cfg, alpha=float(a), gamma=None, constraint=con))
            rows.append({"alpha": float(a), "constraint": con.label, "mse": mse})
    return rows
