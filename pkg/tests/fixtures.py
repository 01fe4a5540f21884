"""Synthetic attention stacks and images shared by the attention and acceptance tests."""

import numpy as np

GRID = 16
IMAGE = 64
LAYERS = 26
BLOB_CENTER = (5.0, 10.0)  # (row, col) in grid cells
BLOB_SIGMA = 1.5


def blob_grid(center=BLOB_CENTER, sigma=BLOB_SIGMA, grid=GRID):
    yy, xx = np.mgrid[0:grid, 0:grid]
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    return np.exp(-d2 / (2 * sigma**2))


def blob_stacks(rng=None):
    """Positive: flat base plus one Gaussian blob, deeper layers sharper; negative: uniform."""
    bump = blob_grid()
    layers = []
    for l in range(LAYERS):
        layers.append(1.0 + (2.0 + 0.5 * l) * bump)
    pos = np.stack(layers)
    if rng is not None:
        pos = pos + rng.uniform(0, 1e-3, size=pos.shape)
    neg = np.full_like(pos, 0.02)
    return pos, neg


def blob_pixel_box(level=0.5):
    """Half-open pixel box (x0, y0, x1, y1) covering grid cells where the blob is at least ``level``."""
    cells = blob_grid() >= level
    rows = np.flatnonzero(cells.any(axis=1))
    cols = np.flatnonzero(cells.any(axis=0))
    block = IMAGE // GRID
    return (cols[0] * block, rows[0] * block, (cols[-1] + 1) * block, (rows[-1] + 1) * block)


def test_image(rng):
    img = rng.integers(0, 256, size=(IMAGE, IMAGE, 3)).astype(np.uint8)
    return img


def box_contains(outer, inner):
    return outer[0] <= inner[0] and outer[1] <= inner[1] and outer[2] >= inner[2] and outer[3] >= inner[3]


def cancellation_stacks(rng, r, epsilon=1e-3, layers=3, size=8):
    """Positive = generic * specific, negative = generic, with min(generic) = r * epsilon."""
    generic = r * epsilon * (1 + 999 * rng.uniform(size=(layers, size, size)))
    generic.reshape(layers, -1)[:, 0] = r * epsilon
    specific = rng.uniform(0.1, 5.0, size=(layers, size, size))
    return generic * specific, generic, specific
