import os

import numpy as np
import pytest

from aptrack import cli
from aptrack.evalkit import write_predictions
from aptrack.head import BBox
from aptrack.synthgen import read_dataset

TINY = ["patch=4", "template_size=8", "search_size=16", "dim=8", "layers=2", "heads=2",
        "n_tokens=3", "ami_layers=1,2", "head_hidden=6", "batch=2"]


def sets(extra=()):
    out = []
    for kv in [*TINY, *extra]:
        out += ["--set", kv]
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, ckpt = root / "data", root / "ckpt"
    assert cli.main(["synth", "--out", str(data), "--n", "2", "--frames", "6", "--size", "64", "--seed", "3"]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(ckpt), "--steps", "3", *sets()]) == 0
    return root


def test_synth_layout(workspace):
    seqs = sorted(os.listdir(workspace / "data"))
    assert seqs == ["seq000", "seq001"]
    assert len(os.listdir(workspace / "data" / "seq000" / "rgb")) == 6


def test_train_artifacts(workspace):
    names = set(os.listdir(workspace / "ckpt"))
    assert {"weights.aptt", "manifest.txt", "config.txt", "loss.txt", "loss.png"} <= names
    assert len((workspace / "ckpt" / "loss.txt").read_text().splitlines()) == 3


def test_track_eval_and_jobs(workspace):
    base = [ "--data", str(workspace / "data"), "--ckpt", str(workspace / "ckpt")]
    a, b = workspace / "pa", workspace / "pb"
    assert cli.main(["track", *base, "--out", str(a)]) == 0
    assert cli.main(["track", *base, "--out", str(b), "--jobs", "2"]) == 0
    for name in ("seq000.txt", "seq001.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rep = workspace / "rep"
    assert cli.main(["eval", "--data", str(workspace / "data"), "--pred", str(a), "--out", str(rep)]) == 0
    assert {"report.txt", "precision.csv", "success.csv", "curves.png"} <= set(os.listdir(rep))
    assert len((rep / "success.csv").read_text().splitlines()) == 21


def test_eval_perfect_predictions(workspace):
    pred = workspace / "perfect"
    pred.mkdir()
    for name in ("seq000", "seq001"):
        ds = read_dataset(workspace / "data" / name)
        write_predictions(pred / f"{name}.txt", [BBox(*g, score=1.0) for g in ds.gt])
    out = workspace / "perfect_rep"
    assert cli.main(["eval", "--data", str(workspace / "data"), "--pred", str(pred), "--out", str(out)]) == 0
    lines = dict(l.split(": ") for l in (out / "report.txt").read_text().splitlines())
    for key in ("precision@20", "success_auc", "mpr@20", "msr_auc", "pr", "re", "f_score"):
        assert float(lines[key]) == 1.0


def test_dump_attention(workspace):
    dump = workspace / "attn.txt"
    assert cli.main(["track", "--data", str(workspace / "data"), "--ckpt", str(workspace / "ckpt"),
                     "--out", str(workspace / "pc"), "--dump-attn", str(dump)]) == 0
    heads = [l for l in dump.read_text().splitlines() if l.startswith("#")]
    # 2 sequences x 5 tracked frames x 2 AMI layers x (A, B_w)
    assert len(heads) == 40
    assert "matrix=A shape=" in heads[0]


def test_gradcheck_exit_codes(monkeypatch, capsys):
    assert cli.main(["gradcheck", "--max-entries", "2", *sets()]) == 0
    assert "max_rel_error" in capsys.readouterr().out
    monkeypatch.setattr(cli, "check_gradients", lambda *a, **k: 1e-3)
    assert cli.main(["gradcheck", *sets()]) == 1


def test_ablate_token_sweep(workspace):
    out = workspace / "abl"
    d = str(workspace / "data")
    assert cli.main(["ablate", "--train", d, "--test", d, "--out", str(out), "--seeds", "1",
                     "--steps", "1", *sets()]) == 0
    rows = [l.split(",") for l in (out / "ablation.csv").read_text().splitlines()[1:]]
    names = [r[0] for r in rows]
    assert names == ["rgb_only", "no_ami", "gmp_only", "lt_only", "full", "full", "full"]
    sweep = {int(r[1]) for r in rows if r[0] in ("gmp_only", "full")}
    assert sweep == {0, 16, 32, 64}
    assert (out / "ablation.png").exists()


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as e:
        cli.main(["fly"])
    assert e.value.code != 0


def test_unknown_config_key(workspace, capsys):
    code = cli.main(["train", "--data", str(workspace / "data"), "--out", str(workspace / "x"),
                     "--set", "nonsense=1"])
    assert code != 0
    assert "unknown config key" in capsys.readouterr().err


def test_missing_data_names_module(tmp_path, capsys):
    assert cli.main(["eval", "--data", str(tmp_path), "--pred", str(tmp_path), "--out", str(tmp_path)]) != 0
    assert "error in cli" in capsys.readouterr().err


def test_bad_prediction_length(workspace, capsys):
    pred = workspace / "short"
    pred.mkdir()
    for name in ("seq000", "seq001"):
        write_predictions(pred / f"{name}.txt", [BBox(10.0, 10.0, 4.0, 4.0, 0.5)])
    assert cli.main(["eval", "--data", str(workspace / "data"), "--pred", str(pred),
                     "--out", str(workspace / "o")]) != 0
    assert "predictions for 6 frames" in capsys.readouterr().err


def test_module_named_in_errors(tmp_path, capsys):
    (tmp_path / "s" / "rgb").mkdir(parents=True)
    (tmp_path / "s" / "groundtruth.txt").write_text("1,1,4,4\n")
    assert cli.main(["eval", "--data", str(tmp_path / "s"), "--pred", str(tmp_path), "--out", str(tmp_path)]) != 0
    assert "error in synthgen" in capsys.readouterr().err


def test_same_seed_same_checkpoint(workspace, tmp_path):
    again = tmp_path / "ckpt"
    assert cli.main(["train", "--data", str(workspace / "data"), "--out", str(again), "--steps", "3", *sets()]) == 0
    for name in ("weights.aptt", "loss.txt", "loss.png"):
        assert (again / name).read_bytes() == (workspace / "ckpt" / name).read_bytes()
    assert np.isfinite(float((again / "loss.txt").read_text().split(",")[1].split()[0]))
