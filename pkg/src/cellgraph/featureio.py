"""Cell instances, per-cell features, synthetic tissue and their file formats.

Feature layout (``dim=16``)::

    0-3   mean R, G, B, gray over the bounding box
    4-7   std  R, G, B, gray over the bounding box
    8     pixel area
    9     perimeter (count of pixel edges shared with non-cell pixels)
    10    bbox aspect ratio (width / height)
    11    extent (area / bbox area)
    12    mean gray over the mask
    13    std gray over the mask
    14    bbox diagonal
    15    solidity (area / convex hull area of the pixel squares)

``dim=12`` keeps columns 0-11, ``dim=8`` keeps 0-7. Gray is (R+G+B)/3 and every
std is the population std.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

from .errors import DimMismatch, EmptyMask, FormatError, MissingColor, SpecError
from .rng import numpy_rng

VALID_DIMS = (8, 12, 16)
FEATURE_NAMES = (
    "bbox_mean_r", "bbox_mean_g", "bbox_mean_b", "bbox_mean_gray",
    "bbox_std_r", "bbox_std_g", "bbox_std_b", "bbox_std_gray",
    "area", "perimeter", "aspect_ratio", "extent",
    "mask_mean_gray", "mask_std_gray", "bbox_diagonal", "solidity",
)


@dataclass
class LabeledMask:
    """Instance label image (``labels[y, x]``, 0 = background) with optional color."""

    labels: np.ndarray
    rgb: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2 or self.labels.size == 0:
            raise ValueError("labels must be a non-empty 2-D array")
        if np.issubdtype(self.labels.dtype, np.signedinteger) and (self.labels < 0).any():
            raise ValueError("labels must be non-negative")
        if self.rgb is not None:
            self.rgb = np.asarray(self.rgb, dtype=np.uint8)
            if self.rgb.shape != self.labels.shape + (3,):
                raise ValueError(f"rgb shape {self.rgb.shape} does not match labels {self.labels.shape}")

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def height(self):
        return self.labels.shape[0]


@dataclass(frozen=True)
class CellInstance:
    id: int
    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]
    pixel_count: int
    source_label: int = 0


@dataclass
class CellFeatureSet:
    """Centroids and feature vectors of the cells of one image."""

    image_dims: tuple[int, int]
    dim: int
    centroids: np.ndarray
    features: np.ndarray
    label: int | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        if self.dim not in VALID_DIMS:
            raise DimMismatch(f"dim must be one of {VALID_DIMS}, got {self.dim}")
        self.image_dims = (int(self.image_dims[0]), int(self.image_dims[1]))
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, self.dim)
        n = len(self.centroids)
        if len(self.features) != n:
            raise ValueError("centroids and features disagree on cell count")
        if self.ids is None:
            self.ids = np.arange(1, n + 1, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not np.isfinite(self.features).all():
            raise ValueError("feature vectors must be finite")
        w, h = self.image_dims
        c = self.centroids
        if n and ((c[:, 0] < 0).any() or (c[:, 0] > w).any() or (c[:, 1] < 0).any() or (c[:, 1] > h).any()):
            raise ValueError("centroid outside image")
        if self.label is not None and self.label not in (0, 1, 2):
            raise ValueError(f"grade label must be 0, 1 or 2, got {self.label}")

    def __len__(self):
        return len(self.centroids)

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return CellFeatureSet(self.image_dims, self.dim, self.centroids[index],
                              self.features[index], self.label, self.ids[index])

    def truncate(self, dim):
        """Same cells with the feature prefix of length ``dim``."""
        if dim not in VALID_DIMS or dim > self.dim:
            raise DimMismatch(f"cannot reduce dim {self.dim} to {dim}")
        return CellFeatureSet(self.image_dims, dim, self.centroids,
                              self.features[:, :dim], self.label, self.ids)

    def __eq__(self, other):
        if not isinstance(other, CellFeatureSet):
            return NotImplemented
        return (self.image_dims == other.image_dims and self.dim == other.dim
                and self.label == other.label
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.centroids, other.centroids)
                and np.array_equal(self.features, other.features))


def extract_cells(mask):
    """One :class:`CellInstance` per distinct nonzero label, renumbered 1..K."""
    labels = mask.labels
    values, inverse = np.unique(labels, return_inverse=True)
    inverse = inverse.reshape(labels.shape)
    if values[0] == 0:
        values = values[1:]
    else:
        inverse = inverse + 1
    if len(values) == 0:
        raise EmptyMask("mask contains no labelled pixels")
    # inverse now maps background -> 0 and original labels -> 1..K in ascending order
    k = len(values)
    ys, xs = np.indices(labels.shape)
    flat = inverse.ravel()
    counts = np.bincount(flat, minlength=k + 1)
    sx = np.bincount(flat, weights=xs.ravel(), minlength=k + 1)
    sy = np.bincount(flat, weights=ys.ravel(), minlength=k + 1)
    cells = []
    for i, sl in enumerate(ndimage.find_objects(inverse), start=1):
        ysl, xsl = sl
        cells.append(CellInstance(
            id=i,
            centroid=(sx[i] / counts[i], sy[i] / counts[i]),
            bbox=(xsl.start, ysl.start, xsl.stop - 1, ysl.stop - 1),
            pixel_count=int(counts[i]),
            source_label=int(values[i - 1]),
        ))
    return cells


def _perimeter(region):
    padded = np.pad(region, 1)
    edges = 0
    for axis in (0, 1):
        edges += np.count_nonzero(np.diff(padded.astype(np.int8), axis=axis))
    return float(edges)


def _convex_area(region):
    ys, xs = np.nonzero(region)
    corners = np.concatenate([
        np.stack([xs + dx, ys + dy], axis=1) for dx in (0, 1) for dy in (0, 1)
    ]).astype(np.float64)
    corners = np.unique(corners, axis=0)
    return ConvexHull(corners).volume


def compute_features(mask, cells, dim=16):
    """Per-cell feature vectors; see the module docstring for the layout."""
    if dim not in VALID_DIMS:
        raise DimMismatch(f"dim must be one of {VALID_DIMS}, got {dim}")
    if mask.rgb is None:
        raise MissingColor("color image required for bounding-box features")
    rgb = mask.rgb.astype(np.float64)
    gray = rgb.sum(axis=2) / 3.0
    values = np.array([c.source_label for c in cells])
    feats = np.empty((len(cells), 16))
    for row, cell in enumerate(cells):
        x0, y0, x1, y1 = cell.bbox
        box = rgb[y0:y1 + 1, x0:x1 + 1].reshape(-1, 3)
        gbox = gray[y0:y1 + 1, x0:x1 + 1]
        region = mask.labels[y0:y1 + 1, x0:x1 + 1] == values[row]
        bw, bh = x1 - x0 + 1, y1 - y0 + 1
        area = float(cell.pixel_count)
        gmask = gbox[region]
        feats[row, 0:3] = box.mean(axis=0)
        feats[row, 3] = gbox.mean()
        feats[row, 4:7] = box.std(axis=0)
        feats[row, 7] = gbox.std()
        feats[row, 8] = area
        feats[row, 9] = _perimeter(region)
        feats[row, 10] = bw / bh
        feats[row, 11] = area / (bw * bh)
        feats[row, 12] = gmask.mean()
        feats[row, 13] = gmask.std()
        feats[row, 14] = math.hypot(bw, bh)
        feats[row, 15] = area / _convex_area(region)
    centroids = np.array([c.centroid for c in cells], dtype=np.float64).reshape(-1, 2)
    ids = np.array([c.id for c in cells], dtype=np.int64)
    return CellFeatureSet((mask.width, mask.height), dim, centroids, feats[:, :dim], None, ids)


# ---------------------------------------------------------------------------
# synthetic tissue

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic tissue generator.

    ``densities`` are mean cell counts per 512x512 pixels for grades 0, 1, 2.
    ``clustering`` is the fraction of cells placed around cluster centres.
    ``atypia`` is the fraction of enlarged, dark nuclei.
    """

    width: int = 512
    height: int = 512
    densities: tuple[float, float, float] = (50.0, 150.0, 400.0)
    density_jitter: float = 0.2
    clustering: tuple[float, float, float] = (0.0, 0.4, 0.8)
    n_clusters: int = 5
    cluster_sigma: float = 50.0
    atypia: tuple[float, float, float] = (0.05, 0.25, 0.5)
    radius: tuple[float, float] = (4.0, 7.0)
    atypical_scale: float = 1.4
    grade_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    max_retries: int = 200

    def cell_count_mean(self, grade):
        return self.densities[grade] * self.width * self.height / 512.0 ** 2


def _ellipse_stamp(a, b, theta):
    r = int(math.ceil(max(a, b)))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    c, s = math.cos(theta), math.sin(theta)
    u = (xx * c + yy * s) / a
    v = (-xx * s + yy * c) / b
    return u * u + v * v <= 1.0, r


def generate_synthetic_tissue(spec, seed, grade=None):
    """Render one synthetic H&E-like tile. Returns ``(LabeledMask, grade)``.

    Deterministic in ``(spec, seed, grade)``. Higher grades have more cells,
    stronger clustering and more atypical nuclei.
    """
    rng = numpy_rng(seed, "synth")
    if grade is None:
        grade = int(rng.choice(3, p=np.asarray(spec.grade_probs) / sum(spec.grade_probs)))
    w, h = spec.width, spec.height
    mean_count = spec.cell_count_mean(grade)
    n_cells = int(round(mean_count * (1.0 + spec.density_jitter * rng.uniform(-1.0, 1.0))))
    labels = np.zeros((h, w), dtype=np.uint16)
    rgb = np.empty((h, w, 3))
    rgb[:] = (232.0, 196.0, 220.0)
    rgb += rng.normal(0.0, 6.0, size=(h, w, 3))

    margin = spec.radius[1] * spec.atypical_scale + 1
    centres = rng.uniform((margin, margin), (w - margin, h - margin), size=(spec.n_clusters, 2))
    placed = 0
    for _ in range(n_cells):
        clustered = rng.random() < spec.clustering[grade]
        atypical = rng.random() < spec.atypia[grade]
        scale = spec.atypical_scale if atypical else 1.0
        for attempt in range(spec.max_retries):
            # crowded clusters spill over into uniform placement
            if clustered and attempt < spec.max_retries // 2:
                cx, cy = centres[rng.integers(spec.n_clusters)] + rng.normal(0.0, spec.cluster_sigma, 2)
            else:
                cx, cy = rng.uniform((0, 0), (w, h))
            a = rng.uniform(*spec.radius) * scale
            b = rng.uniform(spec.radius[0], a) if a > spec.radius[0] else a
            stamp, r = _ellipse_stamp(a, b, rng.uniform(0, math.pi))
            ix, iy = int(round(cx)), int(round(cy))
            if ix - r < 0 or iy - r < 0 or ix + r >= w or iy + r >= h:
                continue
            window = labels[iy - r:iy + r + 1, ix - r:ix + r + 1]
            # one background pixel of clearance keeps instances separable
            if window[ndimage.binary_dilation(stamp)].any():
                continue
            placed += 1
            window[stamp] = placed
            if atypical:
                base = np.array((70.0, 30.0, 110.0))
            else:
                base = np.array((120.0, 70.0, 160.0))
            base = base + rng.normal(0.0, 8.0, 3)
            rgb[iy - r:iy + r + 1, ix - r:ix + r + 1][stamp] = base + rng.normal(0.0, 10.0, (int(stamp.sum()), 3))
            break
        else:
            raise SpecError(f"could not place cell {placed + 1} of {n_cells} without overlap "
                            f"after {spec.max_retries} attempts")
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return LabeledMask(labels, rgb), grade


def features_from_mask(mask, dim=16, label=None):
    """``extract_cells`` + ``compute_features``; an empty mask yields an empty set."""
    try:
        cells = extract_cells(mask)
    except EmptyMask:
        return CellFeatureSet((mask.width, mask.height), dim, np.zeros((0, 2)), np.zeros((0, dim)), label)
    fs = compute_features(mask, cells, dim)
    fs.label = label
    return fs


# ---------------------------------------------------------------------------
# feature CSV

HEADER_PREFIX = "# cellgraph-features v1"


def save_features(fs, path):
    label = "none" if fs.label is None else str(int(fs.label))
    w, h = fs.image_dims
    lines = [f"{HEADER_PREFIX} dim={fs.dim} w={w} h={h} label={label}"]
    for i in range(len(fs)):
        vals = [repr(float(v)) for v in (*fs.centroids[i], *fs.features[i])]
        lines.append(",".join([str(int(fs.ids[i]))] + vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _parse_header(line, path):
    if not line.startswith(HEADER_PREFIX):
        raise FormatError("missing '# cellgraph-features v1' header", path, 1)
    fields = {}
    for tok in line[len(HEADER_PREFIX):].split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise FormatError(f"bad header token {tok!r}", path, 1)
        fields[key] = value
    try:
        dim = int(fields["dim"])
        w, h = int(fields["w"]), int(fields["h"])
        label = None if fields["label"] == "none" else int(fields["label"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad header: {exc}", path, 1) from None
    if dim not in VALID_DIMS:
        raise DimMismatch(f"{path}:1: dim must be one of {VALID_DIMS}, got {dim}")
    return dim, (w, h), label


def load_features(path):
    text = Path(path).read_text(encoding="ascii")
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty file", path, 1)
    dim, dims, label = _parse_header(lines[0], path)
    ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        nfeat = len(parts) - 3
        if nfeat != dim:
            if nfeat in VALID_DIMS:
                raise DimMismatch(f"{path}:{lineno}: row has {nfeat} features, header says dim={dim}")
            raise FormatError(f"expected {dim + 3} columns, found {len(parts)}", path, lineno)
        try:
            ids.append(int(parts[0]))
            rows.append([float(p) for p in parts[1:]])
        except ValueError as exc:
            raise FormatError(str(exc), path, lineno) from None
        if not all(math.isfinite(v) for v in rows[-1]):
            raise FormatError("non-finite value", path, lineno)
    arr = np.array(rows, dtype=np.float64).reshape(-1, dim + 2)
    try:
        return CellFeatureSet(dims, dim, arr[:, :2], arr[:, 2:], label, np.array(ids, dtype=np.int64))
    except ValueError as exc:
        raise FormatError(str(exc), path) from None


# ---------------------------------------------------------------------------
# PGM / PPM

def _read_netpbm(path, magic):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header", path)
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise FormatError(f"expected {magic.decode()} file, found {tokens[0]!r}", path)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("bad header fields", path) from None
    return w, h, maxval, data[pos:]


def read_pgm(path):
    w, h, maxval, payload = _read_netpbm(path, b"P5")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    if len(payload) < w * h * dtype.itemsize:
        raise FormatError("truncated pixel data", path)
    return np.frombuffer(payload, dtype=dtype, count=w * h).reshape(h, w).astype(np.uint16)


def write_pgm(path, labels):
    labels = np.asarray(labels)
    if labels.max(initial=0) > 65535:
        raise ValueError("labels exceed 16 bits")
    h, w = labels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + labels.astype(">u2").tobytes())


def read_ppm(path):
    w, h, maxval, payload = _read_netpbm(path, b"P6")
    if maxval > 255:
        raise FormatError("only 8-bit PPM supported", path)
    if len(payload) < w * h * 3:
        raise FormatError("truncated pixel data", path)
    return np.frombuffer(payload, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_mask(label_path, color_path=None):
    labels = read_pgm(label_path)
    rgb = None
    if color_path is not None:
        rgb = read_ppm(color_path)
        if rgb.shape[:2] != labels.shape:
            raise FormatError(f"color image {rgb.shape[1]}x{rgb.shape[0]} does not match "
                              f"label image {labels.shape[1]}x{labels.shape[0]}", color_path)
    return LabeledMask(labels, rgb)
