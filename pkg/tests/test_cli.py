import csv
import json
from collections import Counter

import numpy as np
import pytest

from cadnet.cli import ABLATION_COLUMNS, ABLATION_ROWS, ConfigError, load_run_config, main
from cadnet.data import read_png, write_png

TRAIN_INI = """\
[data]
dir = {data}

[train]
image_size = 16x8
channels = 4,4,8,8
p = 2
k = 2
epochs = 2
steps_per_epoch = 1
seed = 3

[eval]
rates = 2,8
trials = 1
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("synth", "--ids", 4, "--per-id", 3, "--size", "16x8", "--seed", 1, "--out", out, "--force") == 0
    return out


@pytest.fixture(scope="module")
def config(data, tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.ini"
    path.write_text(TRAIN_INI.format(data=data))
    return path


@pytest.fixture(scope="module")
def ckpt(config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--config", config, "--out", out, "--force") == 0
    return out / "model.cadnet"


def index_rows(root):
    return [line.split("\t") for line in (root / "index.tsv").read_text().splitlines()]


class TestSynth:
    def test_counts(self, data):
        splits = Counter(row[4] for row in index_rows(data))
        assert splits == {"train": 12, "query": 12, "gallery": 12}

    def test_same_seed_same_bytes(self, data, tmp_path):
        assert run("synth", "--ids", 4, "--per-id", 3, "--size", "16x8", "--seed", 1, "--out", tmp_path) == 0
        assert (tmp_path / "index.tsv").read_bytes() == (data / "index.tsv").read_bytes()
        png = sorted((data / "images").iterdir())[0].name
        assert (tmp_path / "images" / png).read_bytes() == (data / "images" / png).read_bytes()

    def test_one_identity_rejected(self, tmp_path, capsys):
        assert run("synth", "--ids", 1, "--per-id", 3, "--out", tmp_path / "d") == 1
        assert "at least 2" in capsys.readouterr().err

    def test_non_empty_out_needs_force(self, data, capsys):
        assert run("synth", "--ids", 2, "--per-id", 2, "--out", data) == 1
        assert "--force" in capsys.readouterr().err


class TestConfig:
    def test_parses(self, config, data):
        rc = load_run_config(config)
        assert rc.train.image_size == (16, 8) and rc.train.channels == (4, 4, 8, 8)
        assert rc.eval_rates == (2, 8) and rc.eval_trials == 1
        assert rc.data_dir == data

    def test_relative_paths(self, tmp_path):
        (tmp_path / "run.ini").write_text("[data]\ndir = d\n[output]\ndir = o\n")
        rc = load_run_config(tmp_path / "run.ini")
        assert rc.data_dir == tmp_path / "d" and rc.out_dir == tmp_path / "o"

    @pytest.mark.parametrize(
        "body, key",
        [
            ("[data]\ndir = d\n[train]\nlamda_rec = 1\n", "train.lamda_rec"),
            ("[data]\ndir = d\n[eval]\nrate = 8\n", "eval.rate"),
            ("[data]\ndir = d\n[misc]\nx = 1\n", "[misc]"),
            ("[data]\ndir = d\n[train]\nmargin = wide\n", "train.margin"),
            ("[data]\ndir = d\n[train]\nmargin = -1\n", "margin"),
            ("[train]\nepochs = 3\n", "data.dir"),
        ],
    )
    def test_errors_name_the_key(self, tmp_path, body, key):
        (tmp_path / "bad.ini").write_text(body)
        with pytest.raises(ConfigError, match=key.replace("[", r"\[").replace("]", r"\]").replace(".", r"\.")):
            load_run_config(tmp_path / "bad.ini")

    def test_unknown_key_exit_code(self, tmp_path, capsys):
        (tmp_path / "bad.ini").write_text("[data]\ndir = d\n[train]\nepoch = 3\n")
        assert run("train", "--config", tmp_path / "bad.ini", "--out", tmp_path / "o") == 1
        assert "train.epoch" in capsys.readouterr().err


class TestTrainAndEval:
    def test_outputs(self, ckpt):
        rows = list(csv.DictReader((ckpt.parent / "telemetry.csv").open()))
        assert [r["epoch"] for r in rows] == ["1", "2"]

    def test_deterministic(self, config, ckpt, tmp_path):
        assert run("train", "--config", config, "--out", tmp_path) == 0
        assert (tmp_path / "telemetry.csv").read_bytes() == (ckpt.parent / "telemetry.csv").read_bytes()
        assert (tmp_path / "model.cadnet").read_bytes() == ckpt.read_bytes()

    def test_resume(self, config, ckpt, tmp_path):
        ini = tmp_path / "more.ini"
        ini.write_text(config.read_text().replace("epochs = 2", "epochs = 3"))
        assert run("train", "--config", ini, "--out", tmp_path / "o", "--resume", ckpt) == 0
        rows = list(csv.DictReader((tmp_path / "o" / "telemetry.csv").open()))
        assert [r["epoch"] for r in rows] == ["3"]

    def test_eval_unseen_rate(self, ckpt, data, tmp_path, capsys):
        out = tmp_path / "eval.json"
        assert run("eval", "--ckpt", ckpt, "--data", data, "--rates", "8", "--trials", 2, "--out", out) == 0
        report = json.loads(out.read_text())
        assert list(report["per_rate"]) == ["8"]
        assert "r=8" in capsys.readouterr().out.split("(unseen)")[0]

    def test_eval_bad_trials(self, ckpt, data):
        assert run("eval", "--ckpt", ckpt, "--data", data, "--trials", 0) == 2

    def test_eval_missing_checkpoint(self, data, tmp_path, capsys):
        assert run("eval", "--ckpt", tmp_path / "none.cadnet", "--data", data) == 1
        assert "error:" in capsys.readouterr().err


class TestRecoverAndExport:
    def test_recover(self, ckpt, tmp_path):
        src = tmp_path / "in.png"
        write_png(src, np.random.default_rng(0).uniform(size=(16, 8, 3)))
        assert run("recover", "--ckpt", ckpt, "--in", src, "--out", tmp_path / "out.png") == 0
        out = read_png(tmp_path / "out.png")
        assert out.shape == (16, 8, 3) and 0.0 <= out.min() and out.max() <= 1.0

    def test_recover_wrong_size(self, ckpt, tmp_path, capsys):
        src = tmp_path / "in.png"
        write_png(src, np.zeros((32, 16, 3)))
        assert run("recover", "--ckpt", ckpt, "--in", src, "--out", tmp_path / "out.png") == 1
        assert "model expects" in capsys.readouterr().err

    @pytest.mark.parametrize("split, rows", [("all", 36), ("test", 24), ("train", 12)])
    def test_export(self, ckpt, data, tmp_path, split, rows):
        out = tmp_path / "emb.csv"
        assert run("export", "--ckpt", ckpt, "--data", data, "--out", out, "--split", split) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == rows + 1
        header = lines[0].split(",")
        assert sum(h.startswith("w_") for h in header) == 8 and sum(h.startswith("u_") for h in header) == 16


def test_ablate(config, tmp_path, capsys):
    assert run("ablate", "--config", config, "--out", tmp_path) == 0
    with (tmp_path / "ablation.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == ABLATION_COLUMNS
    assert [r[0] for r in rows[1:]] == list(ABLATION_ROWS)
    for variant in ABLATION_ROWS:
        assert (tmp_path / f"{variant}.cadnet").is_file()
        assert (tmp_path / f"telemetry_{variant}.csv").is_file()
    printed = capsys.readouterr().out.splitlines()
    assert len(printed) == 1 + len(ABLATION_ROWS)
