import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from imo.checkpoint import save_checkpoint
from imo.cli import _model_meta, main
from imo.config import RunConfig
from imo.core.arrayio import load_array, save_array
from imo.model import IMOModel


def _one_error_line(capsys, code):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) >= 1
    assert err[-1].startswith(f"error code={code} kind=")
    return err[-1]


@pytest.fixture
def small_ckpt(tmp_path):
    cfg = RunConfig()
    model = IMOModel(cfg.model(), cfg.ablation(), rng=np.random.default_rng(0))
    path = tmp_path / "m.imoc"
    save_checkpoint(model.params, path, meta=_model_meta(cfg))
    return path


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    assert "lr = 0.01" in out and "max_steps = 2000" in out and "IMO_THREADS" in out


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 64
    _one_error_line(capsys, 64)


def test_missing_checkpoint_exit_2(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.imoc"), "--data", str(tmp_path)]) == 2
    assert "kind=MissingCheckpoint" in _one_error_line(capsys, 2)


def test_malformed_config_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    for text in ("lr 0.1\n", "learning_rate = 0.1\n", "batch_size = many\n", "momentum = 1.5\n"):
        bad.write_text(text)
        assert main(["train", "--config", str(bad)]) == 3
        _one_error_line(capsys, 3)
    assert main(["train", "--config", str(tmp_path / "absent.txt")]) == 3
    _one_error_line(capsys, 3)


def test_bad_array_magic_exit_4(tmp_path, small_ckpt, capsys):
    case = tmp_path / "case"
    case.mkdir()
    save_array(case / "oct.imoa", np.zeros((1, 16, 32, 32), dtype=np.float32))
    (case / "fundus.imoa").write_bytes(b"NOPE" + b"\0" * 64)
    assert main(["segment", "--ckpt", str(small_ckpt), "--input", str(case), "--out", str(tmp_path / "o")]) == 4
    assert "kind=MagicError" in _one_error_line(capsys, 4)
    bad_ckpt = tmp_path / "bad.imoc"
    bad_ckpt.write_bytes(b"XXXX" + small_ckpt.read_bytes()[4:])
    assert main(["eval", "--ckpt", str(bad_ckpt), "--data", str(tmp_path)]) == 4


def test_segment_writes_mask(tmp_path, small_ckpt, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--n", "1", "--out", str(data), "--seed", "3"]) == 0
    case = data / sorted(os.listdir(data))[0]
    out = tmp_path / "seg"
    capsys.readouterr()
    assert main(["segment", "--ckpt", str(small_ckpt), "--input", str(case), "--out", str(out)]) == 0
    mask = load_array(out / "mask.imoa")
    assert mask.shape == (64, 64) and set(np.unique(mask)) <= {0.0, 1.0, 2.0}
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("mask=") and lines[1].startswith("grade=")
    assert sorted(os.listdir(out)) == ["mask.imoa"]


def test_train_twice_identical_checkpoints(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(f"n = 3\nmax_steps = 3\ndata = {tmp_path / 'data'}\n")
    assert main(["gen-data", "--config", str(cfg)]) == 0
    blobs = []
    for run in ("a", "b"):
        ck = tmp_path / run / "m.imoc"
        assert main(["train", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / run), "--ckpt", str(ck)]) == 0
        blobs.append(ck.read_bytes())
    assert blobs[0] == blobs[1]
    assert main(["train", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "c"),
                 "--ckpt", str(tmp_path / "c" / "m.imoc")]) == 0
    assert (tmp_path / "c" / "m.imoc").read_bytes() != blobs[0]


def test_ablate_writes_tables(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text(f"n = 4\nmax_steps = 1\ndata = {tmp_path / 'data'}\nout = {tmp_path / 'out'}\n")
    assert main(["gen-data", "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert main(["ablate", "--config", str(cfg)]) == 0
    rows = list(csv.reader(open(tmp_path / "out" / "ablation.csv")))
    assert rows[0] == ["method", "dice_disc", "dice_cup", "mdice", "precision"] and len(rows) == 7
    assert capsys.readouterr().out == (tmp_path / "out" / "ablation.txt").read_text()


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.endswith("PASS") for line in lines)
    worst = max(float(line.split("worst_rel_err=")[1].split()[0]) for line in lines)
    assert worst < 1e-5


def test_threads_env_is_honoured():
    code = "import numba, imo.core.kernels; print(numba.get_num_threads())"
    env = dict(os.environ, IMO_THREADS="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "1"


def test_eval_on_overfit_checkpoint(overfit_run, capsys):
    capsys.readouterr()
    assert main(["eval", "--config", str(overfit_run["config"]), "--seed", "0"]) == 0
    out = capsys.readouterr().out
    fields = dict(line.split("=", 1) for line in out.splitlines())
    assert float(fields["mdice"]) >= 0.85
    assert float(fields["accuracy"]) == 1.0
    assert (overfit_run["root"] / "out" / "metrics.txt").read_text() == out


def test_overfit_loss_decreases(overfit_run):
    rows = list(csv.DictReader(open(overfit_run["history"])))
    assert len(rows) == 2000 and rows[0]["step"] == "0"
    assert float(rows[-1]["total"]) < 0.25 * float(rows[0]["total"])
