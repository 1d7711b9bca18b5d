import numpy as np
import pytest

from cellgraph.featureio import CellFeatureSet, LabeledMask


def random_feature_set(rng, n, dims=(64, 48), dim=16, label=None):
    w, h = dims
    cents = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
    feats = rng.normal(size=(n, dim))
    return CellFeatureSet((w, h), dim, cents, feats, label)


def square_mask(size, squares, color=(128, 128, 128)):
    """Label image with ``squares = [(label, x0, y0, side), ...]``."""
    labels = np.zeros((size, size), dtype=np.uint16)
    for lab, x0, y0, side in squares:
        labels[y0:y0 + side, x0:x0 + side] = lab
    rgb = np.empty((size, size, 3), dtype=np.uint8)
    rgb[:] = color
    return LabeledMask(labels, rgb)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
