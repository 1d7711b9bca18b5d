"""Grid distribution maps and per-box random downsampling of cells.

The image is split into a ``d x d`` grid of half-open boxes; box ``(i, j)``
covers rows ``[i*h/d, (i+1)*h/d)`` and columns ``[j*w/d, (j+1)*w/d)``, with the
last row/column of boxes closed on the far image edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BudgetMismatch, EmptyDistribution, OutOfBounds
from .rng import SplitMix64, derive_seed

DEFAULT_GRID = 32


@dataclass
class DistributionMap:
    d: int
    image_dims: tuple[int, int]
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.shape != (self.d, self.d):
            raise ValueError(f"counts must be {self.d}x{self.d}, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")

    @property
    def total(self):
        return float(self.counts.sum())

    def at(self, points):
        """Map value at the box containing each point."""
        rows, cols = point_boxes(points, self.image_dims, self.d)
        return self.counts[rows, cols]


@dataclass
class SampleBudget:
    M: int
    allocation: np.ndarray

    @property
    def total(self):
        return int(self.allocation.sum())


def _axis_index(v, extent, d):
    j = np.floor(v * d / extent).astype(np.int64)
    j = np.clip(j, 0, d - 1)
    # the float division can land one box off near a boundary; compare against the
    # boundaries themselves so that v == j*extent/d always goes to box j
    j = np.where((j + 1 < d) & ((j + 1) * extent / d <= v), j + 1, j)
    j = np.where((j > 0) & (j * extent / d > v), j - 1, j)
    return j


def point_boxes(points, image_dims, d):
    """``(rows, cols)`` box indices of each ``(x, y)`` point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    w, h = image_dims
    bad = (pts[:, 0] < 0) | (pts[:, 0] > w) | (pts[:, 1] < 0) | (pts[:, 1] > h) | ~np.isfinite(pts).all(axis=1)
    if bad.any():
        k = int(np.argmax(bad))
        raise OutOfBounds(f"point #{k} {tuple(pts[k])} lies outside the {w}x{h} image")
    return _axis_index(pts[:, 1], h, d), _axis_index(pts[:, 0], w, d)


def build_distribution_map(points, image_dims, d=DEFAULT_GRID):
    if d < 1:
        raise ValueError("grid dimension must be >= 1")
    rows, cols = point_boxes(points, image_dims, d)
    counts = np.zeros((d, d))
    np.add.at(counts, (rows, cols), 1.0)
    return DistributionMap(d, tuple(image_dims), counts)


def scale_distribution(dist, M):
    """Rescale so the entries sum to ``M`` (L1 normalisation times ``M``)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    total = dist.total
    if total == 0:
        raise EmptyDistribution("cannot scale an all-zero distribution map")
    return DistributionMap(dist.d, dist.image_dims, dist.counts * (M / total))


def allocate_counts(scaled, raw, M=None):
    """Integer picks per box by largest remainder, capped by the raw counts.

    Boxes are ranked by fractional remainder (descending), ties broken by
    row-major index. Seats lost to capping go to boxes that still have spare
    points, in the same order.
    """
    if M is None:
        M = int(round(scaled.total))
    vals = scaled.counts.ravel()
    near = np.rint(vals)
    vals = np.where(np.abs(vals - near) <= 1e-9 * np.maximum(1.0, vals), near, vals)
    caps = raw.counts.ravel().astype(np.int64)
    floors = np.floor(vals).astype(np.int64)
    alloc = np.minimum(floors, caps)
    remainder = vals - floors
    target = min(int(M), int(caps.sum()))
    order = np.lexsort((np.arange(len(vals)), -remainder))
    deficit = target - int(alloc.sum())
    while deficit > 0:
        progressed = False
        for idx in order:
            if alloc[idx] < caps[idx]:
                alloc[idx] += 1
                deficit -= 1
                progressed = True
                if deficit == 0:
                    break
        if not progressed:
            break
    return SampleBudget(int(M), alloc.reshape(raw.counts.shape))


def select_features(fs, budget, seed):
    """Pick ``allocation[i, j]`` cells uniformly at random inside every box.

    Each box draws from its own stream, so the result does not depend on the
    order in which boxes are processed. Output keeps the input cell order.
    """
    d = budget.allocation.shape[0]
    rows, cols = point_boxes(fs.centroids, fs.image_dims, d)
    box_of = rows * d + cols
    alloc = budget.allocation.ravel()
    members = [[] for _ in range(d * d)]
    for idx, b in enumerate(box_of):
        members[b].append(idx)
    chosen = []
    for b in np.flatnonzero(alloc):
        k = int(alloc[b])
        if k > len(members[b]):
            raise BudgetMismatch(f"box ({b // d}, {b % d}) holds {len(members[b])} cells "
                                 f"but {k} were allocated")
        chosen.extend(SplitMix64(derive_seed(seed, "select", int(b))).sample(members[b], k))
    return fs.subset(sorted(chosen))


def downsample(fs, M, d=DEFAULT_GRID, seed=0):
    """Full selection pass. Returns ``(selected, scaled_map, raw_map)``."""
    raw = build_distribution_map(fs.centroids, fs.image_dims, d)
    scaled = scale_distribution(raw, M)
    budget = allocate_counts(scaled, raw, M)
    return select_features(fs, budget, seed), scaled, raw
