"""Smooth-L1 training, plateau LR schedule, stratified k-fold CV and ablation sweeps."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import gnn
from .errors import DegenerateDataset, DivergenceError
from .rng import numpy_rng

GRADES = (0, 1, 2)
METRIC_COLUMNS = ("run_id", "kind", "grid_point", "fold", "epoch", "train_loss", "val_acc", "lr")
SUMMARY_COLUMNS = ("SUMMARY", "run_id", "kind", "grid_point", "mean_acc", "std_acc")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-5
    epochs: int = 200
    folds: int = 3
    seed: int = 0
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-7
    huber_delta: float = 1.0
    grade_targets: tuple = (0.0, 1.0, 2.0)

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau patience must be >= 1")
        if not self.lr0 > self.min_lr:
            raise ValueError("lr0 must exceed min_lr")
        if self.epochs < 1 or self.folds < 2:
            raise ValueError("need epochs >= 1 and folds >= 2")
        if self.huber_delta <= 0:
            raise ValueError("huber delta must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    lr: float


@dataclass
class FoldReport:
    fold_id: int
    epochs: list = field(default_factory=list)
    final_accuracy: float = 0.0
    params: object = None

    def __eq__(self, other):
        if not isinstance(other, FoldReport):
            return NotImplemented
        return (self.fold_id == other.fold_id and self.epochs == other.epochs
                and self.final_accuracy == other.final_accuracy)


def smooth_l1(pred, target, delta=1.0):
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = abs(pred - target)
    return 0.5 * r * r / delta if r < delta else r - 0.5 * delta


def classify(pred):
    """Nearest grade; halves round up, result clamped to 0..2."""
    return int(min(2, max(0, math.floor(pred + 0.5))))


def make_folds(labels, k=3, seed=0, groups=None):
    """Stratified k-fold split. Returns ``[(train_ids, val_ids), ...]``.

    Samples of each class are shuffled, then dealt to folds round-robin; the
    deal continues across classes, so fold totals also differ by at most one.
    With ``groups`` every group lands in a single fold (stratified by the
    group's majority label).
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < k:
        raise DegenerateDataset(f"{n} samples cannot fill {k} folds")
    for g in np.unique(labels):
        if np.count_nonzero(labels == g) < k:
            raise DegenerateDataset(f"class {g} has fewer than {k} samples")
    rng = numpy_rng(seed, "folds")
    if groups is None:
        units = [[i] for i in range(n)]
        unit_label = labels
    else:
        groups = np.asarray(groups)
        names = list(dict.fromkeys(groups.tolist()))
        units = [list(np.flatnonzero(groups == name)) for name in names]
        unit_label = np.array([np.bincount(labels[u]).argmax() for u in units])
    assign = np.empty(len(units), dtype=np.int64)
    slot = 0
    for g in np.unique(unit_label):
        members = np.flatnonzero(unit_label == g)
        members = members[rng.permutation(len(members))]
        for u in members:
            assign[u] = slot % k
            slot += 1
    folds = []
    for f in range(k):
        val = sorted(i for u in np.flatnonzero(assign == f) for i in units[u])
        train = sorted(i for u in np.flatnonzero(assign != f) for i in units[u])
        folds.append((train, val))
    return folds


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without a strict improvement."""

    def __init__(self, lr, factor=0.5, patience=10, min_lr=1e-7):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, accuracy):
        if accuracy > self.best:
            self.best = accuracy
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def plateau_step(scheduler, accuracy):
    return scheduler.step(accuracy)


def input_stats(samples):
    """Per-feature mean/std over every node of ``samples`` (std floored at 1e-8)."""
    rows = []
    for s in samples:
        graphs = s.patches if hasattr(s, "patches") else [s]
        rows.extend(g.features for g in graphs if g.n)
    feats = np.concatenate(rows)
    std = feats.std(axis=0)
    return feats.mean(axis=0), np.where(std > 1e-8, std, 1.0)


def sample_label(s):
    return int(s.label)


def accuracy(samples, params):
    if not samples:
        return 0.0
    hits = sum(classify(gnn.predict(s, params)) == sample_label(s) for s in samples)
    return hits / len(samples)


def sgd_step(sample, params, config):
    """One plain gradient-descent update on one sample; returns the loss."""
    target = config.grade_targets[sample_label(sample)]
    with ad.Tape() as tape:
        if hasattr(sample, "patches"):
            pred = gnn.forward(sample, params)
        else:
            pred = gnn.forward_single(sample, params)
        loss = ad.huber(ad.sub(pred, ad.constant(target)), config.huber_delta)
    trainable = params.trainable()
    ad.backward(loss, tape, wrt=trainable)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value}")
    return value, trainable


def train_fold(samples, train_ids, val_ids, hp, config, model_seed, fold_id=0, lr_override=None):
    """Train a fresh model on ``train_ids`` and track accuracy on ``val_ids``."""
    train = [samples[i] for i in train_ids]
    val = [samples[i] for i in val_ids]
    f = (train[0].patches[0] if hasattr(train[0], "patches") else train[0]).features.shape[1]
    mean, std = input_stats(train)
    params = gnn.init_params(f, hp, model_seed, mean, std)
    sched = PlateauScheduler(config.lr0 if lr_override is None else lr_override,
                             config.plateau_factor, config.plateau_patience, config.min_lr)
    report = FoldReport(fold_id)
    for epoch in range(1, config.epochs + 1):
        order = numpy_rng(model_seed, "shuffle", epoch).permutation(len(train))
        lr = sched.lr
        losses = []
        for i in order:
            value, trainable = sgd_step(train[i], params, config)
            losses.append(value)
            for t in trainable:
                t.value -= lr * t.grad
            for t in trainable:
                if not np.isfinite(t.value).all():
                    raise DivergenceError(f"parameter {t.name} became non-finite at epoch {epoch}")
        acc = accuracy(val, params)
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)), acc, lr))
        sched.step(acc)
    report.final_accuracy = report.epochs[-1].val_accuracy
    report.params = params
    return report


def evaluate_cv(reports):
    """Mean and population std (in percent) of the fold-final accuracies."""
    finals = np.array([r.final_accuracy if isinstance(r, FoldReport) else float(r) for r in reports]) * 100.0
    if len(finals) != 3:
        raise ValueError(f"expected 3 fold results, got {len(finals)}")
    return float(finals.mean()), float(finals.std())


def _fold_task(args):
    samples, train_ids, val_ids, hp, config, seed, fold_id = args
    return train_fold(samples, train_ids, val_ids, hp, config, seed, fold_id)


def cross_validate(samples, hp, config, jobs=1, groups=None):
    """Stratified CV; returns one FoldReport per fold, in fold order."""
    labels = [sample_label(s) for s in samples]
    folds = make_folds(labels, config.folds, config.seed, groups)
    tasks = [(samples, tr, va, hp, config, _model_seed(config.seed, k), k)
             for k, (tr, va) in enumerate(folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_fold_task, tasks))
    return [_fold_task(t) for t in tasks]


def _model_seed(seed, fold):
    return int(numpy_rng(seed, "model-seed", fold).integers(2**62))


# ---------------------------------------------------------------------------
# metrics CSV

def fold_rows(run_id, kind, grid_point, report):
    return [(run_id, kind, grid_point, report.fold_id, rec.epoch, repr(rec.train_loss),
             repr(rec.val_accuracy), repr(rec.lr)) for rec in report.epochs]


def summary_row(run_id, kind, grid_point, mean, std):
    return ("SUMMARY", run_id, kind, grid_point, repr(mean), repr(std))


def write_metrics(path_or_buf, rows):
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow(row)
    finally:
        if own:
            fh.close()


def read_summaries(path):
    """``{(kind, grid_point): (mean, std)}`` from a metrics CSV."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row and row[0] == "SUMMARY":
                out[(row[2], row[3])] = (float(row[4]), float(row[5]))
    return out


def metrics_text(rows):
    buf = io.StringIO()
    write_metrics(buf, rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# ablation sweeps

ABLATION_KINDS = ("patching", "feature_dim", "graph_size")


@dataclass(frozen=True)
class GridPoint:
    """One sweep cell: graph mode, node budget and feature width."""
    patched: bool
    M: int
    dim: int

    @property
    def name(self):
        return f"{'patched' if self.patched else 'single'}-M{self.M}-dim{self.dim}"


def ablation_grid(kind, values, aug, dim=16, patched=True):
    """Expand a kind plus its values into GridPoints.

    ``patching`` takes ``(mode, M)`` pairs with mode in {"single", "patched"},
    ``feature_dim`` takes dims and ``graph_size`` takes node budgets.
    """
    values = list(values)
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")
    if not values:
        raise ValueError("ablation grid is empty")
    if kind == "patching":
        out = []
        for mode, m in values:
            if mode not in ("single", "patched"):
                raise ValueError(f"patching mode must be single or patched, got {mode!r}")
            out.append(GridPoint(mode == "patched", int(m), dim))
        return out
    if kind == "feature_dim":
        return [GridPoint(patched, aug.M, int(v)) for v in values]
    return [GridPoint(patched, int(v), dim) for v in values]


def _ablation_task(args):
    samples, tr, va, hp, config, seed, fold_id = args
    try:
        return train_fold(samples, tr, va, hp, config, seed, fold_id), None
    except Exception as exc:  # recorded as a failed row, the sweep carries on
        return None, f"{type(exc).__name__}: {exc}"


def run_ablation(kind, grid, feature_sets, aug, hp, config, run_id="ablation", jobs=1,
                 cache=None, data_seed=None, log=None):
    """Full k-fold CV at every grid point.

    Returns metric rows: one per (grid point, fold) holding that fold's last
    epoch, then one SUMMARY row per grid point. A fold that raises gives a
    ``FAILED`` row and a ``nan`` summary for its grid point.
    """
    from dataclasses import replace
    from .pipeline import build_samples

    data_seed = config.seed if data_seed is None else data_seed
    labels = [int(fs.label) for fs in feature_sets]
    folds = make_folds(labels, config.folds, config.seed)
    tasks, owners = [], []
    for gp in grid:
        samples = build_samples(feature_sets, replace(aug, M=gp.M), gp.patched, gp.dim, data_seed, cache)
        for k, (tr, va) in enumerate(folds):
            tasks.append((samples, tr, va, hp, config, _model_seed(config.seed, k), k))
            owners.append(gp)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ablation_task, tasks))
    else:
        results = [_ablation_task(t) for t in tasks]

    rows, summaries = [], []
    for gp in grid:
        finals, failed = [], False
        for task, owner, (report, err) in zip(tasks, owners, results):
            if owner is not gp:
                continue
            fold_id = task[-1]
            if report is None:
                failed = True
                rows.append((run_id, kind, gp.name, fold_id, "FAILED", "", "", err))
                if log:
                    log(f"{gp.name} fold {fold_id} failed: {err}")
                continue
            rec = report.epochs[-1]
            rows.append((run_id, kind, gp.name, fold_id, rec.epoch, repr(rec.train_loss),
                         repr(rec.val_accuracy), repr(rec.lr)))
            finals.append(report.final_accuracy)
        if failed or len(finals) != 3:
            mean, std = (float("nan"), float("nan")) if failed else _mean_std(finals)
        else:
            mean, std = evaluate_cv(finals)
        summaries.append(summary_row(run_id, kind, gp.name, mean, std))
    return rows + summaries


def _mean_std(finals):
    a = np.asarray(finals) * 100.0
    return float(a.mean()), float(a.std())
