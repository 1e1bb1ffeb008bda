import csv
import json

import numpy as np
import pytest

from conftest import tiny_config
from exgrg import cli, config, trainer


@pytest.fixture
def data_dir(tmp_path):
    d = tmp_path / "data"
    assert cli.main(["gen-sbm", "--out", str(d), "--blocks", "2", "--nodes-per-block", "15",
                     "--p-in", "0.4", "--p-out", "0.05", "--feature-dim", "5", "--seed", "3"]) == 0
    return d


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(config.dump_config(tiny_config(iterations=3)))
    return p


@pytest.fixture
def pretrained(tmp_path, data_dir, cfg_file):
    out = tmp_path / "run"
    assert cli.main(["pretrain", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(out)]) == 0
    return out


def test_gen_sbm_files(data_dir):
    assert {p.name for p in data_dir.iterdir()} == {"edges.txt", "features.csv", "labels.txt", "manifest.json"}


def test_pretrain_outputs(pretrained, data_dir):
    rows = list(csv.reader((pretrained / "metrics.csv").open()))
    assert rows[0][:7] == ["iteration", "L_V", "L_C", "L_Iprime", "L_O", "L_R", "total"]
    assert len(rows) == 4
    ck = trainer.load_checkpoint(pretrained / "checkpoint.bin")
    assert ck.iteration == 3
    man = json.loads((pretrained / "manifest.json").read_text())
    assert man["command"] == "pretrain" and man["seed"] == 0
    assert len(man["inputs"]) == 4 and all(len(v) == 64 for v in man["inputs"].values())


def test_pretrain_overrides(tmp_path, data_dir, cfg_file):
    out = tmp_path / "o"
    assert cli.main(["pretrain", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(out),
                     "--iterations", "1", "--seed", "5"]) == 0
    assert trainer.load_checkpoint(out / "checkpoint.bin").config.seed == 5


def test_probe(pretrained, data_dir, tmp_path, capsys):
    out = tmp_path / "probe"
    assert cli.main(["probe", "--checkpoint", str(pretrained / "checkpoint.bin"), "--data", str(data_dir),
                     "--out", str(out), "--trials", "2"]) == 0
    rows = list(csv.reader((out / "probe.csv").open()))
    assert [r[0] for r in rows] == ["trial", "0", "1", "mean", "std"]
    assert "accuracy" in capsys.readouterr().out


def test_metrics(pretrained, data_dir, tmp_path):
    out = tmp_path / "m"
    assert cli.main(["metrics", "--checkpoint", str(pretrained / "checkpoint.bin"), "--data", str(data_dir),
                     "--out", str(out)]) == 0
    rows = dict(list(csv.reader((out / "metrics.csv").open()))[1:])
    assert set(rows) == {"corr H", "std H", "nstd H", "rank H", "corr Z", "std Z", "rank Z"}
    assert 1 <= int(rows["rank H"]) <= 6


@pytest.mark.parametrize("kind", ["lappe", "rwse", "signnet"])
def test_pse(data_dir, tmp_path, kind):
    out = tmp_path / kind
    assert cli.main(["pse", "--data", str(data_dir), "--out", str(out), "--kind", kind, "--freq", "3", "--kernel", "4"]) == 0
    m = np.loadtxt(out / f"pse_{kind}.csv", delimiter=",")
    assert m.shape[0] == 30


@pytest.mark.parametrize("kind", ["aug", "knn", "cluster", "aggregate"])
def test_relgraph(data_dir, tmp_path, cfg_file, kind):
    out = tmp_path / kind
    assert cli.main(["relgraph", "--data", str(data_dir), "--out", str(out), "--kind", kind,
                     "--config", str(cfg_file), "--k", "2"]) == 0
    lines = (out / f"relgraph_{kind}.txt").read_text().splitlines()
    _, name, n, nnz = lines[0].split()
    assert name == kind and int(n) == 16 and int(nnz) == len(lines) - 1


def test_config_error_exit(tmp_path, data_dir):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.nope = 1\n")
    assert cli.main(["pretrain", "--config", str(bad), "--data", str(data_dir), "--out", str(tmp_path / "x")]) == 1


def test_data_error_exit(tmp_path, cfg_file):
    assert cli.main(["pretrain", "--config", str(cfg_file), "--data", str(tmp_path / "none"), "--out", str(tmp_path / "x")]) == 2


def test_bad_checkpoint_exit(tmp_path, data_dir):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"nothing")
    assert cli.main(["metrics", "--checkpoint", str(junk), "--data", str(data_dir), "--out", str(tmp_path / "x")]) == 2


def test_insufficient_spectrum_is_data_error(tmp_path, data_dir):
    assert cli.main(["pse", "--data", str(data_dir), "--out", str(tmp_path / "x"), "--kind", "lappe", "--freq", "500"]) == 2


def test_numeric_exit(tmp_path, data_dir, cfg_file, monkeypatch):
    def boom(*a, **k):
        raise trainer.NumericAbort("iteration 0: non-finite loss")

    monkeypatch.setattr(trainer, "pretrain", boom)
    assert cli.main(["pretrain", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(tmp_path / "x")]) == 3
    assert (tmp_path / "x" / "manifest.json").exists()
