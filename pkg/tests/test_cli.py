import csv
import json
from pathlib import Path

import numpy as np
import pytest

from cellgraph import cli
from cellgraph.featureio import save_features
from cellgraph.graphbuilder import load_graph

from conftest import random_feature_set

SMALL_MODEL = ["--set", "e=6", "--set", "pool_sizes=4,2,1", "--set", "M=40", "--set", "d=8",
               "--epochs", "2", "--lr", "1e-2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "synth"
    assert cli.main(["synth", "--samples", "9", "--width", "256", "--height", "256", "--seed", "3",
                     "-o", root, "-q"]) == 0
    return root


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestSynth:
    def test_layout(self, dataset):
        rows = read_rows(dataset / "labels.csv")
        assert rows[0] == ["name", "label", "patient"]
        assert [int(r[1]) for r in rows[1:]] == [0, 1, 2] * 3
        for name, _, _ in rows[1:]:
            assert (dataset / "masks" / f"{name}.pgm").exists()
            assert (dataset / "features" / f"{name}.csv").exists()

    def test_manifest_hashes(self, dataset):
        man = json.loads((dataset / "manifest.json").read_text())
        assert man["artifacts"]
        for path, digest in man["artifacts"].items():
            assert Path(path).exists() and cli.sha256_file(path) == digest

    def test_rerun_is_byte_identical(self, dataset, tmp_path):
        assert cli.main(["synth", "--samples", "9", "--width", "256", "--height", "256", "--seed", "3",
                         "-o", tmp_path / "again", "-q"]) == 0
        for f in sorted((dataset / "masks").iterdir()):
            assert (tmp_path / "again" / "masks" / f.name).read_bytes() == f.read_bytes()


class TestBuildGraph:
    def test_budget(self, tmp_path):
        fs = random_feature_set(np.random.default_rng(0), 500, dims=(512, 512), label=1)
        save_features(fs, tmp_path / "f.csv")
        assert cli.main(["build-graph", tmp_path / "f.csv", "-o", tmp_path / "g.cgph", "--nodes", "200",
                         "-q"]) == 0
        gf = load_graph(tmp_path / "g.cgph")
        assert gf.graph.n == 200 and gf.graph.label == 1
        assert (tmp_path / "g.cgph.manifest.json").exists()

    def test_directory_and_jobs_agree(self, dataset, tmp_path):
        base = ["build-graph", dataset, "--nodes", "30", "--grid-d", "8", "--patched", "-q"]
        assert cli.main(base + ["-o", tmp_path / "a"]) == 0
        assert cli.main(base + ["-o", tmp_path / "b", "--jobs", "2"]) == 0
        a = sorted((tmp_path / "a").glob("*.cgph"))
        assert len(a) == 9
        for f in a:
            assert (tmp_path / "b" / f.name).read_bytes() == f.read_bytes()

    def test_bad_graph_file_exit_code(self, tmp_path, capsys):
        (tmp_path / "x.cgph").write_bytes(b"CGPH\x09\x00garbage")
        assert cli.main(["inspect", tmp_path / "x.cgph"]) == cli.EXIT_FORMAT


class TestInspect:
    def test_degree_stats_brute_force(self, rng):
        A = rng.uniform(0, 1, (7, 7)) * (rng.random((7, 7)) < 0.5)
        A = A + A.T
        stats = cli.degree_stats(A)
        counts = [sum(1 for j in range(7) if j != i and A[i, j] > 0) for i in range(7)]
        sums = [sum(A[i, j] for j in range(7) if j != i) for i in range(7)]
        assert stats["degree_min"] == min(counts) and stats["degree_max"] == max(counts)
        assert stats["degree_mean"] == pytest.approx(np.mean(counts))
        assert stats["weighted_degree_max"] == pytest.approx(max(sums))
        assert stats["weighted_degree_mean"] == pytest.approx(np.mean(sums))

    def test_output(self, dataset, tmp_path, capsys):
        name = read_rows(dataset / "labels.csv")[3][0]
        assert cli.main(["build-graph", dataset / "features" / f"{name}.csv", "-o", tmp_path / "g.cgph",
                         "--nodes", "25", "--patched", "--format", "text", "-q"]) == 0
        capsys.readouterr()
        assert cli.main(["inspect", tmp_path / "g.cgph"]) == 0
        out = capsys.readouterr().out
        assert "nodes: 25" in out and "patch sizes" in out and "density histogram" in out


@pytest.fixture(scope="module")
def runs(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    for name in ("r1", "r2"):
        assert cli.main(["train", "--data", dataset, "-o", root / name, "--cache", root / f"cache-{name}",
                         "-q", *SMALL_MODEL]) == 0
    return root


class TestTrainEvaluate:
    def test_outputs(self, runs):
        for f in ("metrics.csv", "config.cfg", "manifest.json", "fold0.ckpt", "fold1.ckpt", "fold2.ckpt"):
            assert (runs / "r1" / f).exists()
        rows = read_rows(runs / "r1" / "metrics.csv")
        assert len(rows) == 1 + 3 * 2 + 1 and rows[-1][0] == "SUMMARY"

    def test_reruns_bit_identical(self, runs):
        assert (runs / "r1" / "metrics.csv").read_bytes() == (runs / "r2" / "metrics.csv").read_bytes()
        for k in range(3):
            assert (runs / "r1" / f"fold{k}.ckpt").read_bytes() == (runs / "r2" / f"fold{k}.ckpt").read_bytes()

    def test_manifest_artifacts_exist(self, runs):
        man = json.loads((runs / "r1" / "manifest.json").read_text())
        assert set(man["timings"]) >= {"load", "build-graph", "train"}
        for path, digest in man["artifacts"].items():
            assert cli.sha256_file(path) == digest

    def test_config_written_reloads(self, runs):
        from cellgraph.config import load_config
        cfg = load_config(runs / "r1" / "config.cfg")
        assert cfg.hp.e == 6 and cfg.aug.M == 40 and cfg.train.epochs == 2

    def test_evaluate_dataset(self, runs, dataset, capsys):
        capsys.readouterr()
        assert cli.main(["evaluate", "--checkpoint", runs / "r1" / "fold0.ckpt", "--data", dataset,
                         "--cache", runs / "cache-r1", "-q"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 10 and lines[-1].startswith("accuracy\t")

    def test_evaluate_graph_dir_matches(self, runs, dataset, tmp_path, capsys):
        assert cli.main(["build-graph", dataset, "-o", tmp_path / "g", "--nodes", "40", "--grid-d", "8",
                         "--patched", "-q"]) == 0
        capsys.readouterr()
        assert cli.main(["evaluate", "--checkpoint", runs / "r1" / "fold0.ckpt", "--data", tmp_path / "g",
                         "-o", tmp_path / "report.txt", "-q"]) == 0
        from_graphs = (tmp_path / "report.txt").read_text()
        assert cli.main(["evaluate", "--checkpoint", runs / "r1" / "fold0.ckpt", "--data", dataset,
                         "--cache", runs / "cache-r1", "-q"]) == 0
        from_dataset = capsys.readouterr().out
        # same selection seeds and augment params, so the graphs and predictions coincide
        assert from_graphs.count("pred=") == 9
        assert from_graphs == from_dataset

    def test_divergence_exit_code(self, dataset, tmp_path):
        args = ["train", "--data", dataset, "-o", tmp_path / "r", "-q", *SMALL_MODEL, "--lr", "1e300"]
        with np.errstate(all="ignore"):
            assert cli.main(args) == cli.EXIT_DIVERGED


class TestAblate:
    def test_feature_dim_rows(self, dataset, tmp_path):
        assert cli.main(["ablate", "feature-dim", "--data", dataset, "-o", tmp_path / "a.csv", "-q",
                         *SMALL_MODEL, "--epochs", "1"]) == 0
        rows = read_rows(tmp_path / "a.csv")
        summaries = [r for r in rows if r[0] == "SUMMARY"]
        assert [r[3] for r in summaries] == ["patched-M40-dim8", "patched-M40-dim12", "patched-M40-dim16"]
        assert len(rows) == 1 + 9 + 3


class TestExitCodes:
    def test_missing_required(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train"])
        assert exc.value.code == cli.EXIT_USAGE

    def test_bad_set(self, dataset, tmp_path):
        assert cli.main(["train", "--data", dataset, "-o", tmp_path / "r", "--set", "nope=1", "-q"]) == 2

    def test_bad_config_file_is_format_error(self, dataset, tmp_path):
        (tmp_path / "c.cfg").write_text("M = lots\n")
        assert cli.main(["train", "--data", dataset, "-o", tmp_path / "r", "--config", tmp_path / "c.cfg",
                         "-q"]) == cli.EXIT_FORMAT

    def test_not_a_dataset(self, tmp_path):
        assert cli.main(["train", "--data", tmp_path, "-o", tmp_path / "r", "-q"]) == cli.EXIT_USAGE

    def test_missing_file(self, tmp_path):
        assert cli.main(["inspect", tmp_path / "none.cgph", "-q"]) == cli.EXIT_USAGE
