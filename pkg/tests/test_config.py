import pytest

from cellgraph.config import RunConfig, apply, load_config, parse_assignments
from cellgraph.errors import FormatError


class TestParse:
    def test_comments_and_blanks(self):
        lines = ["# header", "", "M = 400  # budget", "  alpha=0.25"]
        assert parse_assignments(lines) == [("M", "400", 3), ("alpha", "0.25", 4)]

    def test_missing_equals_names_line(self):
        with pytest.raises(FormatError) as exc:
            parse_assignments(["M = 4", "epochs 10"], "run.cfg")
        assert exc.value.line == 2


class TestApply:
    def test_each_section(self):
        cfg = apply(RunConfig(), parse_assignments(["M=400", "e=16", "pool_sizes = 16,4,1", "lr0=1e-2",
                                                    "patched=false", "dim=8"]))
        assert cfg.aug.M == 400 and cfg.hp.e == 16 and cfg.hp.pool_sizes == (16, 4, 1)
        assert cfg.train.lr0 == 1e-2 and cfg.patched is False and cfg.dim == 8

    def test_later_wins(self):
        cfg = apply(RunConfig(), parse_assignments(["epochs=10", "epochs=20"]))
        assert cfg.train.epochs == 20

    @pytest.mark.parametrize("line", ["depth = 3", "M = many", "patched = maybe", "p = 1.5"])
    def test_errors(self, line):
        with pytest.raises(FormatError):
            apply(RunConfig(), parse_assignments([line]))

    def test_text_round_trip(self, tmp_path):
        cfg = load_config(overrides=["M=123", "beta=0.1", "renorm=literal", "norm=patch", "seed=7"])
        (tmp_path / "c.cfg").write_text(cfg.to_text())
        assert load_config(tmp_path / "c.cfg") == cfg

    def test_file_then_overrides(self, tmp_path):
        (tmp_path / "c.cfg").write_text("M = 100\nepochs = 5\n")
        cfg = load_config(tmp_path / "c.cfg", ["epochs=9"])
        assert (cfg.aug.M, cfg.train.epochs) == (100, 9)

    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.hp.norm == "none" and cfg.hp.renorm == "weighted" and cfg.hp.p == 0.4
        assert cfg.hp.pool_sizes == (64, 16, 1) and cfg.aug.M == 200
