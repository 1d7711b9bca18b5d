"""Patched GraphSAGE / DiffPool classifier.

One patch goes through three convolution blocks::

    mean-aggregate -> 3 SAGE convs (concat) -> linear -> [patch norm] -> ReLU
        -> DiffPool to k_b clusters -> adjacency renormalisation

Patch norm is off by default (``HyperParams.norm="none"``). Standardising
every channel over a patch's nodes removes each patch's overall level, and
with a final pool to one node the readout keeps only distribution shape.

The last block pools to a single node, whose embedding feeds a 50-25-3 MLP.
Each patch's 3-vector goes through a shared 3-3-1 merge MLP and the patch
scalars are averaged into the prediction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant
from .errors import EmptyGraph, PatchCountError, ShapeMismatch
from .rng import numpy_rng

HEAD_DIMS = (50, 25, 3)
MERGE_DIMS = (3, 1)
NORM_EPS = 1e-5
MERGE_BIAS_INIT = 1.0
NORM_MODES = ("none", "patch")


@dataclass(frozen=True)
class HyperParams:
    e: int = 100
    p: float = 0.4
    pool_sizes: tuple = (64, 16, 1)
    renorm: str = "weighted"
    norm: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "pool_sizes", tuple(int(k) for k in self.pool_sizes))
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        ks = self.pool_sizes
        if len(ks) != 3 or any(a <= b for a, b in zip(ks, ks[1:])) or ks[-1] != 1:
            raise ValueError(f"pool_sizes must be 3 strictly decreasing sizes ending in 1, got {ks}")
        if self.renorm not in ("weighted", "literal"):
            raise ValueError(f"renorm must be 'weighted' or 'literal', got {self.renorm!r}")
        if self.norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}, got {self.norm!r}")
        if self.e < 1:
            raise ValueError("embedding dim must be positive")


def _t(x):
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------------------
# layers

def mean_aggregate(X, A):
    """Weighted mean over ``{v} U N(v)``: self weight 1, neighbour ``u`` weight ``A[v, u]``."""
    X, A = _t(X), _t(A)
    n = A.shape[0]
    if A.shape != (n, n) or X.shape[0] != n:
        raise ShapeMismatch(f"adjacency {A.shape} does not match features {X.shape}")
    eye = np.eye(n)
    walk = ad.add(ad.mul(A, constant(1.0 - eye)), constant(eye))
    deg = ad.row_sum(walk) @ constant(np.ones((1, X.shape[1])))
    return ad.divide(walk @ X, deg)


def sage_conv(X, A, W, activation=True):
    X, W = _t(X), _t(W)
    if X.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"features {X.shape} do not match weight {W.shape}")
    out = mean_aggregate(X, A) @ W
    return ad.relu(out) if activation else out


def renormalize_adjacency(A, p, mode="weighted"):
    """Self weight ``1-p``; ``p`` spread over the off-diagonal of each row.

    ``weighted`` spreads ``p`` proportionally to the existing weights.
    ``literal`` gives every off-diagonal entry ``p / sum(row)``. Rows without
    neighbours become the identity row.
    """
    A = _t(A)
    n = A.shape[0]
    eye = np.eye(n)
    off = ad.mul(A, constant(1.0 - eye))
    rsum = ad.row_sum(off)
    empty = rsum.value == 0.0
    safe = ad.add(rsum, constant(empty.astype(np.float64)))
    spread = constant(np.ones((1, n)))
    if mode == "weighted":
        scaled = ad.divide(off, safe @ spread)
    elif mode == "literal":
        inv = ad.divide(constant(np.ones((n, 1))), safe)
        scaled = ad.mul(inv @ spread, constant((1.0 - eye) * ~empty))
    else:
        raise ValueError(f"unknown renormalisation mode {mode!r}")
    diag = (1.0 - p) * eye + p * np.diag(empty.ravel().astype(np.float64))
    return ad.add(ad.scale(scaled, p), constant(diag))


def patch_norm(X, scale, shift, eps=NORM_EPS):
    """Per-channel standardisation over the nodes of one patch, then affine."""
    X, scale, shift = _t(X), _t(scale), _t(shift)
    n = X.shape[0]
    col = constant(np.ones((n, 1)))
    row = constant(np.ones((1, n)))
    mean = ad.scale(row @ X, 1.0 / n)
    centered = ad.sub(X, col @ mean)
    var = ad.scale(row @ ad.mul(centered, centered), 1.0 / n)
    std = ad.sqrt(ad.add(var, constant(np.full(var.shape, eps))))
    gain = ad.divide(scale, std)
    return ad.add(ad.mul(centered, col @ gain), col @ shift)


def diffpool(X, A, W_pool, assignment=None):
    """Return ``(S^T X, S^T A S, S)`` with ``S = softmax(sage_conv(X, A, W_pool))`` row-wise.

    ``assignment`` overrides ``S`` (testing hook).
    """
    X, A = _t(X), _t(A)
    if assignment is None:
        S = ad.softmax_rows(sage_conv(X, A, W_pool, activation=False))
    else:
        S = _t(assignment)
        if S.shape[0] != X.shape[0]:
            raise ShapeMismatch(f"assignment {S.shape} does not match {X.shape[0]} nodes")
    St = ad.transpose(S)
    return St @ X, (St @ A) @ S, S


def linear(x, W, b):
    n = x.shape[0]
    return ad.add(x @ W, constant(np.ones((n, 1))) @ b)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class ModelParams:
    """Learnable tensors plus the fixed input standardisation."""

    tensors: dict
    input_mean: np.ndarray
    input_std: np.ndarray
    feature_dim: int
    hp: HyperParams = field(default_factory=HyperParams)

    def __getitem__(self, name):
        return self.tensors[name]

    def trainable(self):
        return [self.tensors[k] for k in sorted(self.tensors)]

    def arrays(self):
        out = {k: t.value for k, t in self.tensors.items()}
        out["input.mean"] = self.input_mean.reshape(1, -1)
        out["input.std"] = self.input_std.reshape(1, -1)
        return out

    def copy(self):
        return ModelParams({k: Tensor(t.value.copy(), True, k) for k, t in self.tensors.items()},
                           self.input_mean.copy(), self.input_std.copy(), self.feature_dim, self.hp)

    def meta(self):
        hp = asdict(self.hp)
        hp["pool_sizes"] = list(hp["pool_sizes"])
        return {"feature_dim": self.feature_dim, "hyperparams": hp}

    def save(self, path, extra=None):
        meta = self.meta()
        if extra:
            meta.update(extra)
        ad.save_checkpoint(path, self.arrays(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = ad.load_checkpoint(path)
        hp = HyperParams(**meta["hyperparams"])
        mean = arrays.pop("input.mean").ravel()
        std = arrays.pop("input.std").ravel()
        tensors = {k: Tensor(v, True, k) for k, v in arrays.items()}
        return cls(tensors, mean, std, int(meta["feature_dim"]), hp)


def param_shapes(f, hp):
    e = hp.e
    shapes = {}
    in_dim = f
    for b, k in enumerate(hp.pool_sizes, start=1):
        for i in (1, 2, 3):
            shapes[f"b{b}.conv{i}"] = (in_dim, e)
        shapes[f"b{b}.embed.w"] = (3 * e, e)
        shapes[f"b{b}.embed.b"] = (1, e)
        shapes[f"b{b}.norm.scale"] = (1, e)
        shapes[f"b{b}.norm.shift"] = (1, e)
        shapes[f"b{b}.pool"] = (e, k)
        in_dim = e
    dims = (e,) + HEAD_DIMS
    for i in range(len(HEAD_DIMS)):
        shapes[f"head.l{i + 1}.w"] = (dims[i], dims[i + 1])
        shapes[f"head.l{i + 1}.b"] = (1, dims[i + 1])
    dims = (HEAD_DIMS[-1],) + MERGE_DIMS
    for i in range(len(MERGE_DIMS)):
        shapes[f"merge.l{i + 1}.w"] = (dims[i], dims[i + 1])
        shapes[f"merge.l{i + 1}.b"] = (1, dims[i + 1])
    return shapes


def init_params(f, hp, seed, input_mean=None, input_std=None):
    """Glorot-uniform weights, zero biases (except the merge layer), unit norm scale."""
    rng = numpy_rng(seed, "model")
    tensors = {}
    for name, shape in param_shapes(f, hp).items():
        if name == "merge.l1.b":
            # a 3-unit ReLU layer dies easily; start it inside the active region
            value = np.full(shape, MERGE_BIAS_INIT)
        elif name == "merge.l2.w":
            # zero output layer: the first updates cannot push every merge unit negative
            value = np.zeros(shape)
        elif name.endswith(".b") or name.endswith(".shift"):
            value = np.zeros(shape)
        elif name.endswith(".scale"):
            value = np.ones(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(value, requires_grad=True, name=name)
    mean = np.zeros(f) if input_mean is None else np.asarray(input_mean, dtype=np.float64)
    std = np.ones(f) if input_std is None else np.asarray(input_std, dtype=np.float64)
    return ModelParams(tensors, mean, std, f, hp)


# ---------------------------------------------------------------------------
# forward

def conv_block(X, A, params, b):
    """One block; returns pooled ``(X, A)`` with ``pool_sizes[b-1]`` nodes."""
    hp = params.hp
    P = params.tensors
    W = ad.concat([P[f"b{b}.conv{i}"] for i in (1, 2, 3)])
    Y = ad.relu(mean_aggregate(X, A) @ W)
    Z = linear(Y, P[f"b{b}.embed.w"], P[f"b{b}.embed.b"])
    if hp.norm == "patch":
        Z = patch_norm(Z, P[f"b{b}.norm.scale"], P[f"b{b}.norm.shift"])
    Z = ad.relu(Z)
    Xp, Ap, _S = diffpool(Z, A, P[f"b{b}.pool"])
    return Xp, renormalize_adjacency(Ap, hp.p, hp.renorm)


@dataclass
class GraphState:
    """Node features ``X`` (n x e) and adjacency ``A`` (n x n) between blocks."""

    X: Tensor
    A: Tensor

    def __post_init__(self):
        self.X, self.A = _t(self.X), _t(self.A)
        n = self.X.shape[0]
        if self.A.shape != (n, n):
            raise ShapeMismatch(f"adjacency {self.A.shape} does not match {n} nodes")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def e(self):
        return self.X.shape[1]


def run_block(state, params, b):
    return GraphState(*conv_block(state.X, state.A, params, b))


def canonical_order(features, coords):
    """Node order that depends only on node content, not on input order."""
    keys = np.column_stack([np.asarray(coords, dtype=np.float64), np.asarray(features, dtype=np.float64)])
    return np.lexsort(keys.T[::-1])


def _prepare(graph, params):
    f = params.feature_dim
    if graph.n == 0:
        return constant(np.zeros((1, f))), constant(np.zeros((1, 1)))
    if graph.f != f:
        raise ShapeMismatch(f"graph has {graph.f} features, model expects {f}")
    order = canonical_order(graph.features, graph.coords)
    X = (graph.features[order] - params.input_mean) / params.input_std
    A = graph.adjacency[np.ix_(order, order)]
    return constant(X), constant(A)


def patch_logits(graph, params):
    """3-vector head output for one (possibly empty) patch graph."""
    P = params.tensors
    X, A = _prepare(graph, params)
    for b in range(1, len(params.hp.pool_sizes) + 1):
        X, A = conv_block(X, A, params, b)
    h = X
    for i in range(1, len(HEAD_DIMS) + 1):
        h = linear(h, P[f"head.l{i}.w"], P[f"head.l{i}.b"])
        if i < len(HEAD_DIMS):
            h = ad.relu(h)
    return h


def patch_score(z, params):
    P = params.tensors
    m = ad.relu(linear(z, P["merge.l1.w"], P["merge.l1.b"]))
    return linear(m, P["merge.l2.w"], P["merge.l2.b"])


def _merge(graphs, params):
    scores = [patch_score(patch_logits(g, params), params) for g in graphs]
    return ad.mean_all(ad.concat(scores))


def forward(pg, params, pad_empty=True):
    """Scalar prediction (a 0-d Tensor) for a four-patch graph.

    Empty patches become a single zero node; with ``pad_empty=False`` they are
    skipped instead.
    """
    if len(pg.patches) != 4:
        raise PatchCountError(f"expected 4 patches, got {len(pg.patches)}")
    graphs = list(pg.patches) if pad_empty else [g for g in pg.patches if g.n > 0]
    if not graphs:
        raise EmptyGraph("all patches are empty")
    return _merge(graphs, params)


def forward_single(graph, params):
    if graph.n == 0:
        raise EmptyGraph("graph has no nodes")
    return _merge([graph], params)


def predict(sample, params):
    """Float prediction for a PatchedGraph or a CellGraph."""
    if hasattr(sample, "patches"):
        return forward(sample, params).item()
    return forward_single(sample, params).item()
