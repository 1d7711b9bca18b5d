"""Dense density-weighted cell graphs, quadrant patches and the CGPH file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyGraph, FormatError
from .sampler import DEFAULT_GRID, downsample

MAGIC = b"CGPH"
VERSION = 1
TEXT_MAGIC = "CGPH-TEXT"
_HEADER = struct.Struct("<4sHHIIIIiddII")


@dataclass(frozen=True)
class AugmentParams:
    alpha: float = 0.5
    beta: float = 0.5
    d: int = DEFAULT_GRID
    M: int = 200

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.d < 1 or self.M < 1:
            raise ValueError("d and M must be positive")


@dataclass
class CellGraph:
    features: np.ndarray
    coords: np.ndarray
    adjacency: np.ndarray
    label: int | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.features.shape[0]
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(n, 2)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64).reshape(n, n)
        if self.ids is None:
            self.ids = np.arange(1, n + 1, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def f(self):
        return self.features.shape[1]

    def subgraph(self, index):
        index = np.asarray(index, dtype=np.int64)
        return CellGraph(self.features[index], self.coords[index],
                         self.adjacency[np.ix_(index, index)], self.label, self.ids[index])

    def __eq__(self, other):
        if not isinstance(other, CellGraph):
            return NotImplemented
        return (self.label == other.label and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.adjacency, other.adjacency))


@dataclass
class PatchedGraph:
    """Four quadrant graphs ordered top-left, top-right, bottom-left, bottom-right."""

    patches: list
    label: int | None
    image_dims: tuple[int, int]


@dataclass
class GraphFile:
    """Contents of one CGPH container."""

    graph: CellGraph
    image_dims: tuple[int, int]
    params: AugmentParams
    patched: bool = False
    extra: dict = field(default_factory=dict)


def edge_weight(dk, dm, alpha, beta):
    """Edge value from the scaled densities of the two endpoint boxes."""
    return alpha * (dk + dm) + beta * abs(dk - dm)


def build_graph(fs, scaled, params):
    """Complete graph over the cells of ``fs``; weights from the scaled map ``scaled``."""
    if len(fs) == 0:
        raise EmptyGraph("feature set has no cells")
    dens = scaled.at(fs.centroids)
    dk = dens[:, None]
    dm = dens[None, :]
    adjacency = params.alpha * (dk + dm) + params.beta * np.abs(dk - dm)
    return CellGraph(fs.features.copy(), fs.centroids.copy(), adjacency, fs.label, fs.ids.copy())


def quadrant_of(coords, image_dims):
    """0..3 quadrant index (TL, TR, BL, BR); the midlines belong to right/bottom."""
    w, h = image_dims
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return (coords[:, 0] >= w / 2).astype(np.int64) + 2 * (coords[:, 1] >= h / 2).astype(np.int64)


def split_patches(graph, image_dims):
    q = quadrant_of(graph.coords, image_dims)
    patches = [graph.subgraph(np.flatnonzero(q == k)) for k in range(4)]
    return PatchedGraph(patches, graph.label, tuple(image_dims))


def augment(fs, params, seed=0):
    """Downsample ``fs`` to ``params.M`` cells and build the weighted graph."""
    if len(fs) == 0:
        raise EmptyGraph("feature set has no cells")
    selected, scaled, _raw = downsample(fs, params.M, params.d, seed)
    return build_graph(selected, scaled, params)


# ---------------------------------------------------------------------------
# CGPH container

def save_graph(gf, path, fmt="binary"):
    if fmt == "binary":
        Path(path).write_bytes(_encode_binary(gf))
    elif fmt == "text":
        Path(path).write_text(_encode_text(gf), encoding="ascii")
    else:
        raise ValueError(f"unknown graph format {fmt!r}")


def load_graph(path):
    data = Path(path).read_bytes()
    # the text magic starts with the binary one, so test it first
    if data.startswith(TEXT_MAGIC.encode()):
        return _decode_text(data.decode("ascii"), path)
    if data[:4] == MAGIC:
        return _decode_binary(data, path)
    raise FormatError("not a CGPH file", path)


def _node_dtype(f):
    return np.dtype([("id", "<i8"), ("cx", "<f8"), ("cy", "<f8"), ("feat", "<f8", (f,))])


def _encode_binary(gf):
    g, p = gf.graph, gf.params
    w, h = gf.image_dims
    label = -1 if g.label is None else int(g.label)
    head = _HEADER.pack(MAGIC, VERSION, int(gf.patched), g.n, g.f, w, h, label,
                        p.alpha, p.beta, p.d, p.M)
    nodes = np.zeros(g.n, dtype=_node_dtype(g.f))
    nodes["id"] = g.ids
    nodes["cx"] = g.coords[:, 0]
    nodes["cy"] = g.coords[:, 1]
    nodes["feat"] = g.features
    upper = g.adjacency[np.triu_indices(g.n)].astype("<f8")
    return head + nodes.tobytes() + upper.tobytes()


def _decode_binary(data, path):
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", path)
    magic, version, flags, n, f, w, h, label, alpha, beta, d, M = _HEADER.unpack_from(data)
    if version != VERSION:
        raise FormatError(f"unsupported CGPH version {version}", path)
    dt = _node_dtype(f)
    n_upper = n * (n + 1) // 2
    expected = _HEADER.size + n * dt.itemsize + 8 * n_upper
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(data)}", path)
    nodes = np.frombuffer(data, dtype=dt, count=n, offset=_HEADER.size)
    upper = np.frombuffer(data, dtype="<f8", count=n_upper, offset=_HEADER.size + n * dt.itemsize)
    graph = CellGraph(nodes["feat"].reshape(n, f).copy(),
                      np.stack([nodes["cx"], nodes["cy"]], axis=1),
                      _symmetric_from_upper(upper, n), None if label < 0 else label,
                      nodes["id"].copy())
    return GraphFile(graph, (w, h), AugmentParams(alpha, beta, d, M), bool(flags & 1))


def _symmetric_from_upper(upper, n):
    a = np.zeros((n, n))
    iu = np.triu_indices(n)
    a[iu] = upper
    a.T[iu] = upper
    return a


def _encode_text(gf):
    g, p = gf.graph, gf.params
    w, h = gf.image_dims
    label = "none" if g.label is None else str(int(g.label))
    out = [f"{TEXT_MAGIC} {VERSION}",
           f"n={g.n} f={g.f} w={w} h={h} label={label} alpha={p.alpha!r} beta={p.beta!r} "
           f"d={p.d} M={p.M} patched={int(gf.patched)}",
           "nodes"]
    for i in range(g.n):
        vals = [repr(float(v)) for v in (g.coords[i, 0], g.coords[i, 1], *g.features[i])]
        out.append(" ".join([str(int(g.ids[i]))] + vals))
    out.append("adjacency-upper")
    for i in range(g.n):
        out.append(" ".join(repr(float(v)) for v in g.adjacency[i, i:]))
    return "\n".join(out) + "\n"


def _decode_text(text, path):
    lines = text.splitlines()
    try:
        meta = dict(tok.split("=", 1) for tok in lines[1].split())
        n, f = int(meta["n"]), int(meta["f"])
        w, h = int(meta["w"]), int(meta["h"])
        label = None if meta["label"] == "none" else int(meta["label"])
        params = AugmentParams(float(meta["alpha"]), float(meta["beta"]), int(meta["d"]), int(meta["M"]))
        patched = meta["patched"] == "1"
        if lines[2] != "nodes" or lines[3 + n] != "adjacency-upper":
            raise ValueError("section markers missing")
        rows = [ln.split() for ln in lines[3:3 + n]]
        ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
        vals = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(n, f + 2)
        upper = []
        for i, ln in enumerate(lines[4 + n:4 + 2 * n]):
            row = [float(v) for v in ln.split()]
            if len(row) != n - i:
                raise ValueError(f"adjacency row {i} has {len(row)} entries")
            upper.extend(row)
        if len(upper) != n * (n + 1) // 2:
            raise ValueError("adjacency truncated")
    except (IndexError, KeyError, ValueError) as exc:
        raise FormatError(f"malformed text graph: {exc}", path) from None
    graph = CellGraph(vals[:, 2:], vals[:, :2], _symmetric_from_upper(np.array(upper), n), label, ids)
    return GraphFile(graph, (w, h), params, patched)
