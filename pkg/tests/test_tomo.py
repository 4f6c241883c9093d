import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import rotation_by_enumeration, segment_lengths_by_sampling
from oedtomo.tomo import (
    ForwardOperatorA,
    Grid,
    Image,
    ProjectionBank,
    assemble_forward_A,
    assemble_forward_B,
    build_projector,
    build_rotation,
    build_rotation_derivative,
    siddon,
)


def test_grid_validation():
    assert Grid.square(5).n == 25
    with pytest.raises(ValueError):
        Grid(1, 1)
    with pytest.raises(ValueError):
        Grid(4, 5)
    with pytest.raises(ValueError):
        Grid(4, 4, pixel_size=2.0)


def test_image_rejects_bad_values():
    g = Grid.square(2)
    with pytest.raises(ValueError):
        Image(g, np.ones(3))
    with pytest.raises(ValueError):
        Image(g, [0, 1, np.nan, 0])
    assert Image(g, np.arange(4)).as_array().shape == (2, 2)


def test_projector_two_by_two_constant_image():
    T = build_projector(Grid.square(2), 2)
    np.testing.assert_allclose(T @ np.ones(4), [2.0, 2.0])


def test_projector_entries_nonnegative_and_shape():
    T = build_projector(Grid.square(7), 5)
    assert T.shape == (5, 49)
    assert T.data.min() >= 0


def test_projector_single_pixel_hits_ray_zero():
    T = build_projector(Grid.square(4), 4)
    f = np.zeros(16)
    f[0] = 1.0
    y = T @ f
    assert np.count_nonzero(y) == 1
    assert y[0] == 1.0


def test_projector_rejects_nonpositive_rays():
    with pytest.raises(ValueError):
        build_projector(Grid.square(4), 0)


def test_projector_matches_sampled_intersections():
    g = Grid.square(6)
    T = build_projector(g, 4).toarray()
    for r in range(4):
        x = (r + 0.5) * 6 / 4
        ref = segment_lengths_by_sampling((x, 0.0), (x, 6.0), 6, 6, samples=60_000)
        np.testing.assert_allclose(T[r], ref, atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1.0, 7.0), min_size=4, max_size=4))
def test_siddon_matches_brute_force(coords):
    x0, y0, x1, y1 = coords
    idx, lengths = siddon((x0, y0), (x1, y1), 6, 6)
    got = np.zeros(36)
    np.add.at(got, idx, lengths)
    ref = segment_lengths_by_sampling((x0, y0), (x1, y1), 6, 6, samples=40_000)
    seg = np.hypot(x1 - x0, y1 - y0)
    np.testing.assert_allclose(got, ref, atol=2e-3 * max(seg, 1.0))


def test_rotation_zero_is_identity():
    R = build_rotation(Grid.square(5), 0.0)
    assert (R != sp.identity(25)).nnz == 0


def test_rotation_ninety_is_permutation():
    R = build_rotation(Grid.square(2), 90.0).toarray()
    assert set(np.unique(R)) <= {0.0, 1.0}
    np.testing.assert_array_equal(R.sum(axis=0), 1)
    np.testing.assert_array_equal(R.sum(axis=1), 1)
    # counterclockwise: top-left pixel (0) receives the top-right source pixel (1)
    f = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(R @ f, [2.0, 4.0, 1.0, 3.0])


@pytest.mark.parametrize("theta", [0.0, 17.0, 33.0, 90.0, 135.5, 180.0])
def test_rotation_matches_enumeration(theta):
    R = build_rotation(Grid.square(5), theta).toarray()
    np.testing.assert_allclose(R, rotation_by_enumeration(5, theta), atol=1e-12)


def test_rotation_mass_change_small_on_interior_constant():
    g = Grid.square(40)
    img = np.zeros((40, 40))
    img[5:35, 5:35] = 1.0
    R = build_rotation(g, 33.0)
    rotated = R @ img.ravel()
    assert abs(rotated.sum() - img.sum()) / img.sum() < 0.02


@settings(max_examples=25, deadline=None)
@given(st.floats(-360.0, 360.0, allow_nan=False))
def test_rotation_rows_are_partitions_of_unity(theta):
    g = Grid.square(9)
    R = build_rotation(g, theta)
    assert R.data.min() >= 0 and R.data.max() <= 1 + 1e-15
    sums = np.asarray(R.sum(axis=1)).ravel()
    assert sums.max() <= 1 + 1e-12
    from oedtomo.tomo import _source_coordinates
    row, col, _, _ = _source_coordinates(g, theta)
    inner = (row > 0) & (row < 8) & (col > 0) & (col < 8)
    np.testing.assert_allclose(sums[inner], 1.0, atol=1e-12)


def test_rotation_rejects_nonfinite():
    with pytest.raises(ValueError):
        build_rotation(Grid.square(3), np.inf)


@pytest.mark.parametrize("theta", [12.3, 47.0, 101.7])
def test_rotation_derivative_matches_fd(theta):
    g = Grid.square(8)
    D = build_rotation_derivative(g, theta).toarray()
    h = 1e-5
    fd = (build_rotation(g, theta + h) - build_rotation(g, theta - h)).toarray() / (2 * h)
    np.testing.assert_allclose(D, fd, atol=1e-6)


def test_rotation_derivative_mass_of_interior_constant():
    g = Grid.square(30)
    img = np.zeros((30, 30))
    cy = cx = 14.5
    yy, xx = np.mgrid[0:30, 0:30]
    img[np.hypot(yy - cy, xx - cx) < 9] = 1.0
    D = build_rotation_derivative(g, 21.0)
    assert abs((D @ img.ravel()).sum()) < 0.05 * img.sum() * np.pi / 180


def test_rotation_derivative_unknown_mode():
    with pytest.raises(ValueError):
        build_rotation_derivative(Grid.square(3), 1.0, mode="spline")


def test_forward_a_empty_and_full():
    g = Grid.square(4)
    angles = [0.0, 45.0, 90.0]
    op = assemble_forward_A(angles, np.zeros(3), g)
    assert op.support.size == 0 and op.shape == (0, 16)
    op = assemble_forward_A(angles, np.ones(3), g, threshold=0.0)
    bank = ProjectionBank(g)
    assert op.shape == (12, 16)
    assert (op.matrix != bank.stacked(angles)).nnz == 0


def test_forward_a_drops_zero_weight_rows():
    g = Grid.square(4)
    angles = [0.0, 30.0, 60.0]
    p = np.array([2.0, 0.0, 0.5])
    op = assemble_forward_A(angles, p, g)
    full = ProjectionBank(g).stacked(angles).toarray()
    expected = np.vstack([2.0 * full[0:4], 0.5 * full[8:12]])
    np.testing.assert_allclose(op.matrix.toarray(), expected, atol=1e-15)


def test_forward_a_rejects_negative_weights():
    with pytest.raises(ValueError):
        assemble_forward_A([0.0, 1.0], [1.0, -1.0], Grid.square(3))


def test_forward_a_row_scaling_linearity():
    rng = np.random.default_rng(0)
    g = Grid.square(6)
    angles = np.arange(0, 180, 30.0)
    p = rng.uniform(0.2, 2.0, angles.size)
    f = rng.standard_normal(g.n)
    scaled = assemble_forward_A(angles, p, g).apply(f)
    plain = assemble_forward_A(angles, np.ones_like(p), g).apply(f)
    np.testing.assert_allclose(scaled, np.repeat(p, g.width) * plain, rtol=1e-12, atol=1e-12)


def test_forward_a_select_scales_data():
    g = Grid.square(3)
    op = assemble_forward_A([0.0, 90.0], [0.0, 3.0], g)
    d = np.arange(6.0)
    np.testing.assert_allclose(op.select(d), [9.0, 12.0, 15.0])


def test_forward_b_cases():
    g = Grid.square(4)
    T = build_projector(g, 4).toarray()
    np.testing.assert_allclose(assemble_forward_B([0.0], g).matrix.toarray(), T)
    two = assemble_forward_B([0.0, 0.0], g).matrix.toarray()
    np.testing.assert_array_equal(two[:4], two[4:])
    op = assemble_forward_B([0.0, 90.0], g).matrix.toarray()
    P = rotation_by_enumeration(4, 90.0)
    assert set(np.unique(P)) <= {0.0, 1.0}
    np.testing.assert_allclose(op[4:], T @ P, atol=1e-15)


def test_forward_b_rejects_out_of_range():
    with pytest.raises(ValueError):
        assemble_forward_B([-1.0], Grid.square(3))
    with pytest.raises(ValueError):
        assemble_forward_B([181.0], Grid.square(3))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adjoint_consistency(seed):
    rng = np.random.default_rng(seed)
    g = Grid.square(7)
    angles = rng.uniform(0, 180, 4)
    for op in (assemble_forward_A(angles, rng.uniform(0, 2, 4), g), assemble_forward_B(angles, g)):
        x = rng.standard_normal(g.n)
        w = rng.standard_normal(op.shape[0])
        lhs = op.apply(x) @ w
        rhs = x @ op.adjoint(w)
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(x) * np.linalg.norm(w)


def test_forward_operator_a_direct_construction():
    blocks = (sp.csr_matrix(np.eye(2)), sp.csr_matrix(2 * np.eye(2)))
    op = ForwardOperatorA(np.array([0.0, 1.0]), np.array([1.0, 3.0]), np.array([1]), blocks, 2, 2)
    np.testing.assert_allclose(op.apply([1.0, 1.0]), [6.0, 6.0])
