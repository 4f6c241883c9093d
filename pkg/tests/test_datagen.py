import numpy as np
import pytest
from scipy import ndimage

from oedtomo.datagen import (
    PENTAGON_NORMALS_DEG,
    NoiseSpec,
    TrainingSet,
    format_tomoset,
    gen_phantoms,
    gen_shapes,
    generate,
    make_rng,
    pentagon_vertices,
    read_tomoset,
    shepp_logan,
    simulate_data,
    write_tomoset,
)
from oedtomo.tomo import Grid, ProjectionBank


def test_rectangles_binary_and_shape():
    ts = generate("rectangles", 20, 40, seed=3)
    assert ts.data.shape == (20, 1600)
    assert set(np.unique(ts.data)) <= {0.0, 1.0}
    for img in ts.data.reshape(20, 40, 40):
        rows = np.flatnonzero(img.any(axis=1))
        cols = np.flatnonzero(img.any(axis=0))
        box = img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        assert box.all() and img.sum() == box.size >= 4


def test_generation_is_deterministic():
    for name in ("rectangles", "pentagons", "shapes", "phantom"):
        a = generate(name, 3, 16, seed=11)
        b = generate(name, 3, 16, seed=11)
        assert format_tomoset(a) == format_tomoset(b)
        c = generate(name, 3, 16, seed=12)
        assert not np.array_equal(a.data, c.data)


def test_generate_rejects_bad_arguments():
    with pytest.raises(ValueError):
        generate("pentagons", 2, 4, seed=0)
    with pytest.raises(ValueError):
        generate("circles", 2, 16, seed=0)
    with pytest.raises(ValueError):
        generate("rectangles", 0, 16, seed=0)


def test_pentagons_binary_and_edge_normals():
    ts = generate("pentagons", 20, 40, seed=5)
    assert ts.data.shape == (20, 1600)
    assert set(np.unique(ts.data)) <= {0.0, 1.0}
    assert np.all(ts.data.sum(axis=1) > 0)
    verts = pentagon_vertices((0.0, 0.0), 1.0)
    edges = np.roll(verts, -1, axis=0) - verts
    normals = np.rad2deg(np.arctan2(edges[:, 0], -edges[:, 1])) % 180
    np.testing.assert_allclose(np.sort(normals), [27, 63, 99, 135, 171], atol=1e-9)
    np.testing.assert_allclose(np.sort(PENTAGON_NORMALS_DEG % 180), [27, 63, 99, 135, 171])


def test_shapes_range_and_connected_support():
    ts = gen_shapes(20, Grid.square(40), seed=9)
    assert ts.data.min() >= 0 and ts.data.max() <= 1
    connected = 0
    for img in ts.data.reshape(20, 40, 40):
        _, count = ndimage.label(img > 0)
        connected += count == 1
    assert connected >= 18


def test_phantoms_range_and_zero_jitter():
    g = Grid.square(64)
    ts = gen_phantoms(20, g, seed=2)
    assert ts.data.shape == (20, 4096)
    assert ts.data.min() >= 0 and ts.data.max() <= 1
    plain = gen_phantoms(1, g, seed=2, axis_jitter=0, rotation_jitter=0,
                         intensity_jitter=0, max_tumors=0)
    np.testing.assert_array_equal(plain.data[0], np.clip(shepp_logan(g), 0, 1))


def test_noise_free_and_noise_level():
    g = Grid.square(16)
    M = ProjectionBank(g).stacked([0.0, 45.0, 90.0])
    f = generate("rectangles", 1, 16, seed=1).data[0]
    np.testing.assert_array_equal(simulate_data(M, f, NoiseSpec(0.0)), M @ f)
    clean = M @ f
    ratios = [np.linalg.norm(simulate_data(M, f, NoiseSpec(1e-3, s)) - clean) / np.linalg.norm(clean)
              for s in range(5)]
    for r in ratios:
        assert 0.7e-3 <= r <= 1.3e-3
    a = simulate_data(M, f, NoiseSpec(1e-3, 4), stream=2)
    b = simulate_data(M, f, NoiseSpec(1e-3, 4), stream=2)
    np.testing.assert_array_equal(a, b)


def test_simulate_rejects_empty_operator():
    with pytest.raises(ValueError):
        simulate_data(np.zeros((0, 4)), np.ones(4), NoiseSpec(0.0))


def test_rng_streams_differ():
    a = make_rng(1, 0).standard_normal(4)
    b = make_rng(1, 1).standard_normal(4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(make_rng(7).integers(0, 100, 5), make_rng(7).integers(0, 100, 5))


def test_tomoset_round_trip(tmp_path):
    ts = generate("shapes", 2, 10, seed=4)
    path = tmp_path / "s.tomoset"
    write_tomoset(ts, path)
    text = path.read_text()
    assert text.splitlines()[0] == "TOMOSET 1 2 10 10"
    back = read_tomoset(path)
    np.testing.assert_array_equal(back.data, ts.data)
    write_tomoset(back, tmp_path / "t.tomoset")
    assert (tmp_path / "t.tomoset").read_text() == text


def test_tomoset_rejects_malformed(tmp_path):
    bad = tmp_path / "bad.tomoset"
    bad.write_text("TOMOSET 1 1 2 2\n0 1\n")
    with pytest.raises(ValueError):
        read_tomoset(bad)
    bad.write_text("TOMO 1 1 2 2\n")
    with pytest.raises(ValueError):
        read_tomoset(bad)


def test_training_set_validation():
    with pytest.raises(ValueError):
        TrainingSet(np.ones((2, 5)), Grid.square(2))
    ts = TrainingSet(np.ones((3, 4)), Grid.square(2))
    assert len(ts.subset([0, 2])) == 2
    with pytest.raises(ValueError):
        ts.data[0, 0] = 2.0
