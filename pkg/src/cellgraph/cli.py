"""``cellgraph`` command line: synth, extract-features, build-graph, train, evaluate, ablate, inspect.

Exit codes: 0 ok, 1 other pipeline error, 2 usage, 3 format, 4 training divergence.
Logs go to stderr; data goes only to the files named on the command line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gnn, trainer
from .config import load_config
from .errors import CellGraphError, DimMismatch, DivergenceError, FormatError
from .featureio import (SynthSpec, features_from_mask, generate_synthetic_tissue, load_features,
                        read_mask, save_features, write_pgm, write_ppm)
from .graphbuilder import AugmentParams, GraphFile, augment, load_graph, save_graph, split_patches
from .pipeline import GraphCache, build_samples, describe_spec
from .rng import derive_seed

log = logging.getLogger("cellgraph")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_FORMAT, EXIT_DIVERGED = 0, 1, 2, 3, 4
LABELS_FILE = "labels.csv"


class UsageError(Exception):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    command: list
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def add_input(self, path):
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for p in files:
            self.inputs[str(p)] = sha256_file(p)

    def add_artifact(self, path):
        self.artifacts[str(path)] = None

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def finalize(self, path):
        missing = [p for p in self.artifacts if not Path(p).exists()]
        if missing:
            raise CellGraphError(f"manifest references missing artifacts: {missing}")
        self.artifacts = {p: sha256_file(p) for p in sorted(self.artifacts)}
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _run_id(command, payload):
    h = hashlib.sha256(command.encode())
    h.update(json.dumps(payload, sort_keys=True, default=str).encode())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------------------
# dataset directory

def dataset_entries(root):
    """``[(name, label, patient)]`` from ``root/labels.csv``."""
    path = Path(root) / LABELS_FILE
    if not path.exists():
        raise UsageError(f"{root} is not a dataset directory (no {LABELS_FILE})")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [(r["name"], int(r["label"]), r.get("patient") or r["name"]) for r in rows]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad labels table: {exc}", path) from None


def load_dataset(root, dim=None):
    entries = dataset_entries(root)
    sets = []
    for name, label, _ in entries:
        fs = load_features(Path(root) / "features" / f"{name}.csv")
        if fs.label is None:
            fs.label = label
        if dim is not None and dim != fs.dim:
            if dim > fs.dim:
                raise DimMismatch(f"{name}: stored dim {fs.dim} is narrower than requested {dim}")
            fs = fs.truncate(dim)
        sets.append(fs)
    return entries, sets


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args, manifest):
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(parents=True, exist_ok=True)
    spec = replace(SynthSpec(), width=args.width, height=args.height)
    rows = []
    with manifest.stage("synth"):
        for i in range(args.samples):
            name = f"img_{i:04d}"
            grade = None if args.random_grades else i % 3
            mask, grade = generate_synthetic_tissue(spec, derive_seed(args.seed, "dataset", i), grade)
            fs = features_from_mask(mask, args.dim, grade)
            for path, writer, data in ((out / "masks" / f"{name}.pgm", write_pgm, mask.labels),
                                       (out / "masks" / f"{name}.ppm", write_ppm, mask.rgb)):
                writer(path, data)
                manifest.add_artifact(path)
            save_features(fs, out / "features" / f"{name}.csv")
            manifest.add_artifact(out / "features" / f"{name}.csv")
            rows.append((name, grade, name))
            log.info("%s grade %d cells %d", name, grade, len(fs))
    with open(out / LABELS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("name", "label", "patient"))
        w.writerows(rows)
    (out / "spec.txt").write_text(describe_spec(spec) + f"seed={args.seed}\n")
    manifest.add_artifact(out / LABELS_FILE)
    manifest.add_artifact(out / "spec.txt")
    return out / "manifest.json"


def cmd_extract(args, manifest):
    manifest.add_input(args.mask)
    if args.image:
        manifest.add_input(args.image)
    with manifest.stage("extract"):
        mask = read_mask(args.mask, args.image)
        fs = features_from_mask(mask, args.dim, args.label)
        save_features(fs, args.out)
    log.info("%d cells -> %s", len(fs), args.out)
    manifest.add_artifact(args.out)
    return f"{args.out}.manifest.json"


def _aug_from_args(args):
    return AugmentParams(alpha=args.alpha, beta=args.beta, d=args.grid_d, M=args.nodes)


def _build_one(job):
    src, dst, aug, patched, seed, fmt = job
    fs = load_features(src)
    graph = augment(fs, aug, seed)
    save_graph(GraphFile(graph, fs.image_dims, aug, patched), dst, fmt)
    return str(dst), graph.n


def cmd_build_graph(args, manifest):
    aug = _aug_from_args(args)
    src = Path(args.input)
    manifest.add_input(src)
    if src.is_dir():
        feat_dir = src / "features" if (src / "features").is_dir() else src
        files = sorted(feat_dir.glob("*.csv"))
        if not files:
            raise UsageError(f"no feature CSVs in {feat_dir}")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        jobs = [(f, out / f"{f.stem}.cgph", aug, args.patched, derive_seed(args.seed, "selection", i), args.format)
                for i, f in enumerate(files)]
        manifest_path = out / "manifest.json"
    else:
        jobs = [(src, Path(args.out), aug, args.patched, derive_seed(args.seed, "selection", 0), args.format)]
        manifest_path = f"{args.out}.manifest.json"
    with manifest.stage("build-graph"):
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                done = list(pool.map(_build_one, jobs))
        else:
            done = [_build_one(j) for j in jobs]
    for path, n in done:
        log.info("%s: %d nodes", path, n)
        manifest.add_artifact(path)
    return manifest_path


def _groups(entries, config):
    return [p for _, _, p in entries] if config.group_by_patient else None


def cmd_train(args, manifest, config):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.add_input(Path(args.data) / LABELS_FILE)
    manifest.add_input(Path(args.data) / "features")
    with manifest.stage("load"):
        entries, sets = load_dataset(args.data, config.dim)
    cache = GraphCache(args.cache or Path(args.data) / ".graph-cache")
    with manifest.stage("build-graph"):
        samples = build_samples(sets, config.aug, config.patched, None, config.train.seed, cache)
    log.info("graphs: %d built, %d from cache", cache.misses, cache.hits)
    with manifest.stage("train"):
        reports = trainer.cross_validate(samples, config.hp, config.train, config.jobs, _groups(entries, config))
    rows = []
    for r in reports:
        rows.extend(trainer.fold_rows(manifest.run_id, "train", "base", r))
        ckpt = out / f"fold{r.fold_id}.ckpt"
        r.params.save(ckpt, {"augment": asdict(config.aug), "patched": config.patched,
                             "dim": config.dim, "fold": r.fold_id, "run_id": manifest.run_id,
                             "seed": config.train.seed})
        manifest.add_artifact(ckpt)
        log.info("fold %d final val accuracy %.4f", r.fold_id, r.final_accuracy)
    if len(reports) == 3:
        mean, std = trainer.evaluate_cv(reports)
        rows.append(trainer.summary_row(manifest.run_id, "train", "base", mean, std))
        log.info("cv accuracy %.2f +- %.2f", mean, std)
    trainer.write_metrics(out / "metrics.csv", rows)
    (out / "config.cfg").write_text(config.to_text())
    manifest.add_artifact(out / "metrics.csv")
    manifest.add_artifact(out / "config.cfg")
    return out / "manifest.json"


def _eval_samples(args, params, meta):
    src = Path(args.data)
    if (src / LABELS_FILE).exists():
        aug = AugmentParams(**meta.get("augment", {}))
        _, sets = load_dataset(src, meta.get("dim", params.feature_dim))
        cache = GraphCache(args.cache or src / ".graph-cache")
        names = [n for n, _, _ in dataset_entries(src)]
        seed = meta.get("seed", 0) if args.seed is None else args.seed
        return names, build_samples(sets, aug, meta.get("patched", True), None, seed, cache)
    files = sorted(src.glob("*.cgph")) if src.is_dir() else [src]
    names, samples = [], []
    for f in files:
        gf = load_graph(f)
        if gf.graph.label is None:
            raise FormatError("graph has no label; cannot score it", f)
        names.append(f.stem)
        samples.append(split_patches(gf.graph, gf.image_dims) if gf.patched else gf.graph)
    return names, samples


def cmd_evaluate(args, manifest):
    from .autodiff import load_checkpoint

    manifest.add_input(args.checkpoint)
    params = gnn.ModelParams.load(args.checkpoint)
    _, meta = load_checkpoint(args.checkpoint)
    with manifest.stage("evaluate"):
        names, samples = _eval_samples(args, params, meta)
        lines, hits = [], 0
        for name, s in zip(names, samples):
            pred = gnn.predict(s, params)
            grade = trainer.classify(pred)
            hits += grade == int(s.label)
            lines.append(f"{name}\tpred={pred!r}\tgrade={grade}\tlabel={int(s.label)}")
    acc = hits / len(samples) if samples else 0.0
    text = "\n".join(lines + [f"accuracy\t{acc!r}\t({hits}/{len(samples)})"]) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        manifest.add_artifact(args.out)
        return f"{args.out}.manifest.json"
    sys.stdout.write(text)
    return None


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_ablate(args, manifest, config):
    kind = args.kind.replace("-", "_")
    if kind == "patching":
        modes = [m.strip() for m in args.modes.split(",")]
        values = [(m, n) for m in modes for n in (args.nodes or [config.aug.M])]
    elif kind == "feature_dim":
        values = args.dims
    else:
        values = args.nodes or [config.aug.M]
    grid = trainer.ablation_grid(kind, values, config.aug, config.dim, config.patched)
    manifest.add_input(Path(args.data) / "features")
    with manifest.stage("load"):
        _, sets = load_dataset(args.data, max(gp.dim for gp in grid))
    cache = GraphCache(args.cache or Path(args.data) / ".graph-cache")
    with manifest.stage("ablate"):
        rows = trainer.run_ablation(kind, grid, sets, config.aug, config.hp, config.train, manifest.run_id,
                                    config.jobs, cache, log=log.warning)
    trainer.write_metrics(args.out, rows)
    manifest.add_artifact(args.out)
    for r in rows:
        if r[0] == "SUMMARY":
            log.info("%s: %s +- %s", r[3], r[4], r[5])
    return f"{args.out}.manifest.json"


def degree_stats(adjacency):
    """Off-diagonal degree statistics: unweighted count and weighted sum per node."""
    A = np.asarray(adjacency)
    off = A - np.diag(np.diag(A))
    count = (off > 0).sum(axis=1)
    weight = off.sum(axis=1)
    return {"degree_min": int(count.min()), "degree_max": int(count.max()),
            "degree_mean": float(count.mean()), "weighted_degree_min": float(weight.min()),
            "weighted_degree_max": float(weight.max()), "weighted_degree_mean": float(weight.mean())}


def cmd_inspect(args):
    gf = load_graph(args.graph)
    g = gf.graph
    lines = [f"file: {args.graph}", f"nodes: {g.n}", f"feature_dim: {g.f}",
             f"image: {gf.image_dims[0]}x{gf.image_dims[1]}",
             f"label: {'none' if g.label is None else g.label}", f"patched: {gf.patched}",
             f"alpha={gf.params.alpha!r} beta={gf.params.beta!r} d={gf.params.d} M={gf.params.M}"]
    if g.n:
        for k, v in degree_stats(g.adjacency).items():
            lines.append(f"{k}: {v}")
        # the diagonal is 2*alpha*D_k, so it recovers each node's box density
        diag = np.diag(g.adjacency)
        density = diag / (2.0 * gf.params.alpha) if gf.params.alpha > 0 else diag
        counts, edges = np.histogram(density, bins=args.bins)
        lines.append("density histogram:")
        for c, lo, hi in zip(counts, edges, edges[1:]):
            lines.append(f"  [{lo:.4g}, {hi:.4g}) {c} {'#' * int(c)}")
        if gf.patched:
            sizes = [p.n for p in split_patches(g, gf.image_dims).patches]
            lines.append(f"patch sizes (TL TR BL BR): {' '.join(map(str, sizes))}")
    sys.stdout.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# argument parsing

def _add_config_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config's seed)")
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate (lr0)")
    p.add_argument("--group-by-patient", action="store_true", default=None)
    p.add_argument("--cache", help="graph cache directory (default DATA/.graph-cache)")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    common.add_argument("--run-id", help="run identifier (default: hash of command and inputs)")
    parser = argparse.ArgumentParser(prog="cellgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset directory")
    p.add_argument("--samples", type=int, default=45)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=16, choices=(8, 12, 16))
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--random-grades", action="store_true", help="draw grades instead of cycling 0,1,2")
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("extract-features", help="label mask (+ colour image) -> feature CSV")
    p.add_argument("--mask", required=True, help="16-bit PGM label image")
    p.add_argument("--image", help="PPM colour image")
    p.add_argument("--dim", type=int, default=16, choices=(8, 12, 16))
    p.add_argument("--label", type=int, choices=(0, 1, 2))
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("build-graph", help="feature CSV (or directory) -> CGPH graph file(s)")
    p.add_argument("input")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--grid-d", type=int, default=32)
    p.add_argument("--nodes", type=int, default=200, help="node budget M")
    p.add_argument("--patched", action="store_true")
    p.add_argument("--format", choices=("binary", "text"), default="binary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train", help="cross-validated training on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--out", required=True, help="run directory")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset or graph directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory, CGPH directory or CGPH file")
    p.add_argument("--seed", type=int, help="selection seed when building graphs (default: the training seed)")
    p.add_argument("--cache")
    p.add_argument("-o", "--out", help="report file (default stdout)")

    p = sub.add_parser("ablate", help="sweep patching, feature dims or graph sizes")
    p.add_argument("kind", choices=("patching", "feature-dim", "graph-size",
                                    "feature_dim", "graph_size"))
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--out", required=True, help="sweep CSV")
    p.add_argument("--dims", type=_int_list, default=[8, 12, 16])
    p.add_argument("--nodes", type=_int_list, help="node budgets, e.g. 100,200,400")
    p.add_argument("--modes", default="single,patched")
    _add_config_flags(p)

    p = sub.add_parser("inspect", help="summarise a CGPH file")
    p.add_argument("graph")
    p.add_argument("--bins", type=int, default=8)
    return parser


def resolve_config(args):
    overrides = list(args.set)
    for flag, key in (("seed", "seed"), ("jobs", "jobs"), ("epochs", "epochs"), ("lr", "lr0"),
                      ("group_by_patient", "group_by_patient")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    try:
        return load_config(args.config, overrides)
    except FormatError as exc:
        if exc.path == "--set":
            raise UsageError(str(exc)) from None
        raise


def _dispatch(args, argv):
    if args.command == "inspect":
        cmd_inspect(args)
        return
    config = resolve_config(args) if args.command in ("train", "ablate") else None
    payload = {"args": {k: v for k, v in vars(args).items() if k not in ("verbose", "quiet", "run_id")}}
    if config is not None:
        payload["config"] = config.flat()
    # output locations do not change results, so they stay out of the run id
    keyed = {k: v for k, v in payload["args"].items() if k not in ("out", "cache", "jobs")}
    keyed = {"args": keyed, "config": {k: v for k, v in payload.get("config", {}).items() if k != "jobs"}}
    manifest = RunManifest(args.run_id or _run_id(args.command, keyed), ["cellgraph", *argv], payload)
    handlers = {"synth": cmd_synth, "extract-features": cmd_extract, "build-graph": cmd_build_graph,
                "evaluate": cmd_evaluate}
    if args.command in handlers:
        path = handlers[args.command](args, manifest)
    elif args.command == "train":
        path = cmd_train(args, manifest, config)
    else:
        path = cmd_ablate(args, manifest, config)
    if path is not None:
        manifest.finalize(path)
        log.info("manifest: %s", path)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(message)s", force=True)
    try:
        _dispatch(args, argv)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        log.error("no such file: %s", exc.filename)
        return EXIT_USAGE
    except (FormatError, DimMismatch) as exc:
        log.error("format error: %s", exc)
        return EXIT_FORMAT
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except CellGraphError as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
