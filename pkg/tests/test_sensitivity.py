import warnings
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp

from _oracles import RandomDesign, central_difference
from oedtomo.datagen import NoiseSpec, make_rng, simulate_data
from oedtomo.qp import ConstraintSpec, QpProblem, ReducedKKT, solve
from oedtomo.sensitivity import (
    DegeneracyWarning,
    KinkWarning,
    SensitivityError,
    build_sensitivity,
    dense_columns,
    grad_rhs_problem_a,
    grad_rhs_problem_b,
)
from oedtomo.tomo import Grid, ProjectionBank, assemble_forward_B


def strictly_complementary(sol, margin=1e-3):
    if sol.slack.size == 0:
        return True
    return float(np.min(np.maximum(sol.slack, sol.lambda_ineq))) > margin


def jacobian_and_fd(design, p, h=1e-5):
    op, d, prob, sol = design.solve(p)
    S = build_sensitivity(prob, sol, grad_rhs_problem_a(op, sol.f_hat, d))
    fd = central_difference(lambda q: design.solve(q)[3].f_hat, p, h)
    return S, sol, fd


@pytest.mark.parametrize("constraint", [
    ConstraintSpec.unconstrained(),
    ConstraintSpec.equality_sum(3.0),
    ConstraintSpec.nonnegative(),
    ConstraintSpec.box(),
])
def test_jacobian_matches_finite_differences(constraint):
    rng = np.random.default_rng(10)
    checked = 0
    for _ in range(20):
        design = RandomDesign(rng, constraint=constraint)
        p = rng.uniform(0.5, 1.5, design.ell)
        S, sol, fd = jacobian_and_fd(design, p)
        if not strictly_complementary(sol):
            continue
        J = S.dense()
        assert np.linalg.norm(J - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)
        checked += 1
        if checked == 3:
            break
    assert checked == 3


def test_unconstrained_classical_formula():
    rng = np.random.default_rng(11)
    design = RandomDesign(rng, constraint=ConstraintSpec.unconstrained())
    p = rng.uniform(0.5, 1.5, design.ell)
    op, d, prob, sol = design.solve(p)
    G = grad_rhs_problem_a(op, sol.f_hat, d)
    S = build_sensitivity(prob, sol, G)
    expected = -np.linalg.solve(prob.dense_Q, dense_columns(G))
    np.testing.assert_allclose(S.dense(), expected, atol=1e-10)


def test_inactive_constraints_match_unconstrained():
    rng = np.random.default_rng(12)
    design = RandomDesign(rng, constraint=ConstraintSpec.box(-100.0, 100.0))
    p = rng.uniform(0.5, 1.5, design.ell)
    op, d, prob, sol = design.solve(p)
    S = build_sensitivity(prob, sol, grad_rhs_problem_a(op, sol.f_hat, d))
    free = design.with_constraint(ConstraintSpec.unconstrained())
    op2, d2, prob2, sol2 = free.solve(p)
    S2 = build_sensitivity(prob2, sol2, grad_rhs_problem_a(op2, sol2.f_hat, d2))
    np.testing.assert_allclose(S.dense(), S2.dense(), atol=1e-8)


def test_pinned_variable_has_zero_sensitivity():
    # one unknown, one view: min (p a f - p d)^2/2 + alpha^2 f^2/2, f >= 0 with d < 0
    design = RandomDesign.__new__(RandomDesign)
    design.n, design.ell, design.rays, design.alpha = 1, 1, 1, 0.5
    design.blocks = (sp.csr_matrix([[2.0]]),)
    design.d_full = np.array([-1.0])
    design.constraint = ConstraintSpec.nonnegative()
    op, d, prob, sol = design.solve(np.array([1.3]))
    assert abs(sol.f_hat[0]) < 1e-10
    S = build_sensitivity(prob, sol, grad_rhs_problem_a(op, sol.f_hat, d))
    assert abs(S.dense()[0, 0]) < 1e-10


def test_zero_direction_and_dimension_checks():
    rng = np.random.default_rng(13)
    design = RandomDesign(rng)
    op, d, prob, sol = design.solve(np.ones(design.ell))
    S = build_sensitivity(prob, sol, grad_rhs_problem_a(op, sol.f_hat, d))
    np.testing.assert_array_equal(S.jvp(np.zeros(design.ell)), 0)
    with pytest.raises(ValueError):
        S.jvp(np.ones(design.ell + 1))
    with pytest.raises(ValueError):
        S.vjp(np.ones(design.n + 1))


@pytest.mark.parametrize("limit", ["active-set", "interior"])
def test_adjoint_identity(limit):
    rng = np.random.default_rng(14)
    for _ in range(5):
        design = RandomDesign(rng, n=10, ell=4)
        p = rng.uniform(0.5, 1.5, design.ell)
        op, d, prob, sol = design.solve(p)
        S = build_sensitivity(prob, sol, grad_rhs_problem_a(op, sol.f_hat, d), limit=limit)
        v = rng.standard_normal(design.ell)
        w = rng.standard_normal(design.n)
        lhs, rhs = S.jvp(v) @ w, v @ S.vjp(w)
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_rejects_nonpositive_pairs_and_unknown_limit():
    rng = np.random.default_rng(15)
    design = RandomDesign(rng)
    op, d, prob, sol = design.solve(np.ones(design.ell))
    G = grad_rhs_problem_a(op, sol.f_hat, d)
    with pytest.raises(SensitivityError):
        build_sensitivity(prob, replace(sol, slack=np.zeros_like(sol.slack)), G)
    with pytest.raises(ValueError):
        build_sensitivity(prob, sol, G, limit="exact")


def test_degeneracy_warning():
    rng = np.random.default_rng(16)
    design = RandomDesign(rng)
    op, d, prob, sol = design.solve(np.ones(design.ell))
    G = grad_rhs_problem_a(op, sol.f_hat, d)
    with pytest.warns(DegeneracyWarning):
        build_sensitivity(prob, sol, G, gap_tol=1e6)


def test_rhs_a_vanishes_on_consistent_data():
    rng = np.random.default_rng(17)
    design = RandomDesign(rng, noise=0.0)
    p = rng.uniform(0.5, 1.5, design.ell)
    op = design.operator(p)
    d = op.select(design.d_full)
    G = dense_columns(grad_rhs_problem_a(op, design.f_true, d))
    np.testing.assert_allclose(G, 0, atol=1e-12)


def test_rhs_a_single_view_symbolic():
    g = Grid.square(4)
    bank = ProjectionBank(g)
    A = bank.view(30.0).toarray()
    design = RandomDesign.__new__(RandomDesign)
    design.n, design.ell, design.rays = 16, 1, 4
    design.blocks = (sp.csr_matrix(A),)
    rng = np.random.default_rng(18)
    dk = rng.standard_normal(4)
    design.d_full = dk
    p1 = 1.7
    op = design.operator(np.array([p1]))
    f = rng.standard_normal(16)
    G = dense_columns(grad_rhs_problem_a(op, f, op.select(dk)))[:, 0]
    # d/dp1 [p1^2 A'A f - p1 A' (p1 d)] with d(p) = p1 d
    expected = 2 * p1 * A.T @ A @ f - 2 * p1 * A.T @ dk
    np.testing.assert_allclose(G, expected, atol=1e-12)


def _qf_plus_b(grid, angles, f, f_true, noise, alpha=0.2):
    op = assemble_forward_B(angles, grid)
    d = simulate_data(op, f_true, noise, stream=0)
    prob = QpProblem.from_map(op, d, alpha)
    return prob.apply_Q(f) + prob.b


@pytest.mark.parametrize("level", [0.0, 0.01])
def test_rhs_b_matches_finite_differences(level):
    g = Grid.square(8)
    rng = np.random.default_rng(19)
    f_true = rng.uniform(0, 1, g.n)
    f = rng.uniform(0, 1, g.n)
    angles = np.array([23.3, 71.9])
    noise = NoiseSpec(level, 5)
    op = assemble_forward_B(angles, g)
    d = simulate_data(op, f_true, noise, stream=0)
    z = make_rng(5, 0).standard_normal(op.shape[0]) if level else None
    G = dense_columns(grad_rhs_problem_b(op, f, d, ProjectionBank(g), f_true=f_true,
                                         noise_z=z, noise_level=level))
    fd = central_difference(lambda a: _qf_plus_b(g, a, f, f_true, noise), angles, 1e-5)
    np.testing.assert_allclose(G, fd, atol=1e-6 * np.abs(fd).max())


def test_rhs_b_fixed_data_and_kink_warning():
    g = Grid.square(6)
    rng = np.random.default_rng(20)
    f = rng.uniform(0, 1, g.n)
    d = rng.uniform(0, 1, 2 * g.width)
    bank = ProjectionBank(g)
    op = assemble_forward_B([10.0, 0.0], g)
    with pytest.warns(KinkWarning):
        grad_rhs_problem_b(op, f, d, bank, check_kinks=True)
    op = assemble_forward_B([13.7, 51.2], g)
    G = dense_columns(grad_rhs_problem_b(op, f, d, bank))

    def rhs(a):
        prob = QpProblem.from_map(assemble_forward_B(a, g), d, 0.2)
        return prob.apply_Q(f) + prob.b

    fd = central_difference(rhs, np.array([13.7, 51.2]), 1e-5)
    np.testing.assert_allclose(G, fd, atol=1e-6 * np.abs(fd).max())
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        grad_rhs_problem_b(op, f, d, bank, check_kinks=True)


def test_shared_factorization_reuse_matches_fresh():
    rng = np.random.default_rng(21)
    design = RandomDesign(rng, constraint=ConstraintSpec.unconstrained())
    op, d, prob, sol = design.solve(np.ones(design.ell))
    G = grad_rhs_problem_a(op, sol.f_hat, d)
    a = build_sensitivity(prob, sol, G, kkt=ReducedKKT(prob)).dense()
    b = build_sensitivity(prob, sol, G).dense()
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert solve(prob).f_hat.shape == (design.n,)
