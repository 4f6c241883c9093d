"""Synthetic training sets, noisy measurement simulation and TOMOSET files.

Every generator draws from ``numpy.random.Generator(Philox(key=seed))``
(Philox-4x64-10, a counter-based 64-bit generator) and consumes its stream in a
fixed order, so a seed fully determines a dataset. TOMOSET files are the
interchange contract; byte equality of files is what reproducibility means.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tomo import Grid, Image

__all__ = [
    "TrainingSet",
    "NoiseSpec",
    "make_rng",
    "gen_rectangles",
    "gen_pentagons",
    "gen_shapes",
    "gen_phantoms",
    "generate",
    "shepp_logan",
    "simulate_data",
    "pentagon_vertices",
    "PENTAGON_NORMALS_DEG",
    "write_tomoset",
    "read_tomoset",
    "format_tomoset",
]

MIN_SIZE = 8

# Outward edge normals of every generated pentagon, measured in image
# coordinates (x = column, y = row pointing down).
PENTAGON_NORMALS_DEG = np.array([27.0, 99.0, 171.0, 243.0, 315.0])

# Modified Shepp-Logan table: intensity, semi-axis a, semi-axis b, x0, y0, phi (deg)
_MODIFIED_SHEPP_LOGAN = np.array([
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
])


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """``N`` ground-truth images on one grid, stored as an ``(N, n)`` array."""

    data: np.ndarray
    grid: Grid
    name: str = "custom"
    seed: int | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=float, ndmin=2)
        if data.shape[1] != self.grid.n:
            raise ValueError(f"images have {data.shape[1]} pixels, grid needs {self.grid.n}")
        if data.shape[0] < 1:
            raise ValueError("a training set needs at least one image")
        if not np.all(np.isfinite(data)):
            raise ValueError("training images must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def images(self) -> list[Image]:
        return [Image(self.grid, row) for row in self.data]

    def subset(self, indices) -> "TrainingSet":
        return TrainingSet(self.data[np.asarray(indices)], self.grid, self.name, self.seed)


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian white noise with standard deviation ``relative_level * ||Mf|| / sqrt(m)``."""

    relative_level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.relative_level >= 0:
            raise ValueError("noise level must be nonnegative")


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Philox generator keyed by ``seed`` (and an optional stream index)."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    if stream is None:
        return np.random.Generator(np.random.Philox(key=seed))
    key = np.array([seed, int(stream) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _check(count, grid: Grid):
    if int(count) != count or count < 1:
        raise ValueError(f"count must be a positive integer, got {count!r}")
    if grid.width < MIN_SIZE:
        raise ValueError(f"grid {grid.width}x{grid.height} is too small; need at least {MIN_SIZE}")


def gen_rectangles(count: int, grid: Grid, seed: int) -> TrainingSet:
    """Binary images, each holding one axis-aligned rectangle."""
    _check(count, grid)
    rng = make_rng(seed)
    size = grid.width
    out = np.zeros((count, size, size))
    for k in range(count):
        h = int(rng.integers(2, size - 1))
        w = int(rng.integers(2, size - 1))
        r0 = int(rng.integers(0, size - h + 1))
        c0 = int(rng.integers(0, size - w + 1))
        out[k, r0:r0 + h, c0:c0 + w] = 1.0
    return TrainingSet(out.reshape(count, -1), grid, "rectangles", seed)


def pentagon_vertices(center, radius) -> np.ndarray:
    """Vertices (x=column, y=row) of the fixed-orientation regular pentagon."""
    ang = np.deg2rad(PENTAGON_NORMALS_DEG + 36.0)
    return np.asarray(center, dtype=float) + radius * np.column_stack([np.cos(ang), np.sin(ang)])


def _rasterize_pentagon(size, center, radius):
    cols, rows = np.meshgrid(np.arange(size), np.arange(size))
    normals = np.deg2rad(PENTAGON_NORMALS_DEG)
    apothem = radius * np.cos(np.pi / 5)
    inside = np.ones((size, size), dtype=bool)
    for a in normals:
        inside &= (cols - center[0]) * np.cos(a) + (rows - center[1]) * np.sin(a) <= apothem
    return inside.astype(float)


def gen_pentagons(count: int, grid: Grid, seed: int) -> TrainingSet:
    """Binary images of filled regular pentagons sharing one orientation.

    A pixel is set iff its centre lies inside the polygon.
    """
    _check(count, grid)
    rng = make_rng(seed)
    size = grid.width
    unit = pentagon_vertices((0.0, 0.0), 1.0)
    r_min = max(2.0, 0.1 * size)
    r_max = 0.45 * (size - 1)
    out = np.empty((count, size * size))
    for k in range(count):
        radius = float(rng.uniform(r_min, r_max))
        lo = -radius * unit.min(axis=0)
        hi = (size - 1) - radius * unit.max(axis=0)
        center = rng.uniform(lo, hi)
        out[k] = _rasterize_pentagon(size, center, radius).ravel()
    return TrainingSet(out, grid, "pentagons", seed)


def gen_shapes(
    count: int,
    grid: Grid,
    seed: int,
    n_modes: int = 10,
    max_frequency: int = 3,
) -> TrainingSet:
    """Smooth random fields on random star-shaped supports, values in [0, 1]."""
    _check(count, grid)
    rng = make_rng(seed)
    size = grid.width
    cols, rows = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
    out = np.empty((count, size * size))
    for k in range(count):
        freqs = rng.integers(-max_frequency, max_frequency + 1, size=(n_modes, 2))
        amps = rng.normal(size=n_modes)
        phases = rng.uniform(0, 2 * np.pi, size=n_modes)
        field = np.zeros((size, size))
        for (fx, fy), a, ph in zip(freqs, amps, phases):
            field += a * np.cos(2 * np.pi * (fx * cols + fy * rows) / size + ph)

        r0 = rng.uniform(0.2, 0.35) * size
        cx, cy = rng.uniform(0.4, 0.6, size=2) * (size - 1)
        harm = rng.uniform(-0.12, 0.12, size=3)
        harm_phase = rng.uniform(0, 2 * np.pi, size=3)
        phi = np.arctan2(rows - cy, cols - cx)
        boundary = r0 * (1 + sum(h * np.cos((m + 2) * phi + s)
                                 for m, (h, s) in enumerate(zip(harm, harm_phase))))
        mask = np.hypot(cols - cx, rows - cy) <= boundary

        vals = field[mask]
        span = vals.max() - vals.min()
        img = np.zeros((size, size))
        img[mask] = (vals - vals.min()) / span if span > 0 else 1.0
        out[k] = img.ravel()
    return TrainingSet(out, grid, "shapes", seed)


def shepp_logan(grid: Grid, table=None) -> np.ndarray:
    """Rasterize an ellipse table (default: Modified Shepp-Logan) onto ``grid``."""
    table = _MODIFIED_SHEPP_LOGAN if table is None else np.asarray(table, dtype=float)
    size = grid.width
    x, y = grid.centers()
    x = x / (size / 2.0)
    y = y / (size / 2.0)
    img = np.zeros(grid.n)
    for val, a, b, x0, y0, phi in table:
        t = np.deg2rad(phi)
        xr = (x - x0) * np.cos(t) + (y - y0) * np.sin(t)
        yr = -(x - x0) * np.sin(t) + (y - y0) * np.cos(t)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return img


def gen_phantoms(
    count: int,
    grid: Grid,
    seed: int,
    axis_jitter: float = 0.1,
    rotation_jitter: float = 10.0,
    intensity_jitter: float = 0.1,
    max_tumors: int = 3,
) -> TrainingSet:
    """Randomly perturbed Modified Shepp-Logan phantoms clipped to [0, 1].

    Head and skull semi-axes share one random scale per axis, the two
    ventricles get independent scales, the whole head is rotated and every
    intensity is scaled. Up to ``max_tumors`` small ellipses are added inside
    the brain. All jitters at zero reproduce the plain phantom.
    """
    _check(count, grid)
    rng = make_rng(seed)
    base = _MODIFIED_SHEPP_LOGAN
    out = np.empty((count, grid.n))
    for k in range(count):
        table = base.copy()
        head_scale = 1 + axis_jitter * rng.uniform(-1, 1, size=2)
        table[0:2, 1] *= head_scale[0]
        table[0:2, 2] *= head_scale[1]
        table[0:2, 4] *= head_scale[1]
        vent_scale = 1 + axis_jitter * rng.uniform(-1, 1, size=(2, 2))
        table[2:4, 1:3] *= vent_scale
        table[:, 0] *= 1 + intensity_jitter * rng.uniform(-1, 1, size=len(table))

        n_tumors = int(rng.integers(0, max_tumors + 1))
        tumors = []
        for _ in range(n_tumors):
            a, b = rng.uniform(0.03, 0.08, size=2)
            rad = rng.uniform(0.0, 0.5)
            ang = rng.uniform(0, 2 * np.pi)
            x0 = rad * 0.69 * np.cos(ang) * head_scale[0]
            y0 = rad * 0.92 * np.sin(ang) * head_scale[1]
            tumors.append([rng.uniform(0.1, 0.3), a, b, x0, y0, rng.uniform(0, 180)])
        if tumors:
            table = np.vstack([table, tumors])

        rot = rotation_jitter * rng.uniform(-1, 1)
        t = np.deg2rad(rot)
        x0, y0 = table[:, 3].copy(), table[:, 4].copy()
        table[:, 3] = np.cos(t) * x0 - np.sin(t) * y0
        table[:, 4] = np.sin(t) * x0 + np.cos(t) * y0
        table[:, 5] += rot
        out[k] = np.clip(shepp_logan(grid, table), 0.0, 1.0)
    return TrainingSet(out, grid, "phantom", seed)


_GENERATORS = {
    "rectangles": gen_rectangles,
    "pentagons": gen_pentagons,
    "shapes": gen_shapes,
    "phantom": gen_phantoms,
}


def generate(name: str, count: int, size: int, seed: int, **kwargs) -> TrainingSet:
    try:
        gen = _GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(_GENERATORS)}") from None
    if int(size) != size or size < MIN_SIZE:
        raise ValueError(f"invalid size {size!r}; need an integer >= {MIN_SIZE}")
    return gen(count, Grid.square(int(size)), seed, **kwargs)


def simulate_data(M, f, noise: NoiseSpec, stream: int | None = None) -> np.ndarray:
    """Noisy data ``d = M f + eps`` for one image.

    ``M`` is anything with an ``apply`` method or supporting ``@``. The noise
    draw is keyed by ``(noise.seed, stream)`` so it is reproducible.
    """
    values = f.values if isinstance(f, Image) else np.asarray(f, dtype=float)
    clean = M.apply(values) if hasattr(M, "apply") else M @ values
    clean = np.asarray(clean, dtype=float).reshape(-1)
    m = clean.size
    if m == 0:
        raise ValueError("cannot simulate data for an operator with no rows")
    if noise.relative_level == 0:
        return clean
    z = make_rng(noise.seed, stream).standard_normal(m)
    scale = noise.relative_level * np.linalg.norm(clean) / np.sqrt(m)
    return clean + scale * z


def format_tomoset(ts: TrainingSet) -> str:
    buf = io.StringIO()
    h, w = ts.grid.shape
    buf.write(f"TOMOSET 1 {len(ts)} {h} {w}\n")
    for img in ts.data:
        for row in img.reshape(h, w):
            buf.write(" ".join("%.17g" % v for v in row))
            buf.write("\n")
    return buf.getvalue()


def write_tomoset(ts: TrainingSet, path) -> None:
    Path(path).write_text(format_tomoset(ts))


def read_tomoset(path, name: str | None = None) -> TrainingSet:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "TOMOSET" or head[1] != "1":
        raise ValueError(f"{path}: not a TOMOSET v1 file")
    count, h, w = (int(v) for v in head[2:])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count * h:
        raise ValueError(f"{path}: expected {count * h} data lines, found {len(body)}")
    data = np.array([[float(v) for v in ln.split()] for ln in body])
    if data.shape != (count * h, w):
        raise ValueError(f"{path}: malformed data block")
    return TrainingSet(data.reshape(count, h * w), Grid(w, h), name or path.stem, None)
