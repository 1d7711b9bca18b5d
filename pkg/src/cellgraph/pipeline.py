"""Dataset assembly: synthetic tissue -> feature sets -> (patched) graphs, with a content-hash cache."""

from __future__ import annotations

import hashlib
import io
import tempfile
from pathlib import Path

from .featureio import SynthSpec, features_from_mask, generate_synthetic_tissue, save_features
from .graphbuilder import AugmentParams, GraphFile, augment, load_graph, save_graph, split_patches
from .rng import derive_seed


def synthetic_feature_sets(n_samples, seed=0, spec=None, dim=16):
    """``n_samples`` labelled feature sets with grades cycling 0, 1, 2."""
    spec = spec or SynthSpec()
    out = []
    for i in range(n_samples):
        mask, grade = generate_synthetic_tissue(spec, derive_seed(seed, "dataset", i), grade=i % 3)
        out.append(features_from_mask(mask, dim, grade))
    return out


def build_sample(fs, aug, patched=True, dim=None, seed=0):
    if dim is not None and dim != fs.dim:
        fs = fs.truncate(dim)
    graph = augment(fs, aug, seed)
    return split_patches(graph, fs.image_dims) if patched else graph


def build_samples(feature_sets, aug, patched=True, dim=None, seed=0, cache=None):
    out = []
    for i, fs in enumerate(feature_sets):
        sel_seed = derive_seed(seed, "selection", i)
        if cache is None:
            out.append(build_sample(fs, aug, patched, dim, sel_seed))
        else:
            out.append(cache.sample(fs, aug, patched, dim, sel_seed))
    return out


def feature_digest(fs):
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "f.csv"
        save_features(fs, p)
        return hashlib.sha256(p.read_bytes()).hexdigest()


class GraphCache:
    """CGPH files keyed by the hash of (feature CSV, augment params, dim, seed)."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def key(self, fs, aug, dim, seed):
        h = hashlib.sha256()
        h.update(feature_digest(fs).encode())
        h.update(f"|{aug.alpha!r}|{aug.beta!r}|{aug.d}|{aug.M}|{dim}|{seed}".encode())
        return h.hexdigest()

    def sample(self, fs, aug, patched, dim, seed):
        path = self.root / f"{self.key(fs, aug, dim, seed)}.cgph"
        if path.exists():
            self.hits += 1
            graph = load_graph(path).graph
        else:
            self.misses += 1
            src = fs if dim is None or dim == fs.dim else fs.truncate(dim)
            graph = augment(src, aug, seed)
            save_graph(GraphFile(graph, src.image_dims, aug), path)
        return split_patches(graph, fs.image_dims) if patched else graph


def describe_spec(spec):
    buf = io.StringIO()
    for k, v in vars(spec).items():
        buf.write(f"{k}={v}\n")
    return buf.getvalue()
