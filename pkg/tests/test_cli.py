"""End-to-end command-line checks over real files."""

import os

import numpy as np
import pytest

from gpd import checkpoint
from gpd.cli import main
from gpd.model import build_student
from gpd.tensor import Tensor


@pytest.fixture
def student_ckpt(tmp_path):
    m = build_student("convnet-tiny", (1, 8, 8), 4, seed=0)
    path = str(tmp_path / "student.ckpt")
    checkpoint.save(m, path)
    return path


def fast_config(tmp_path, **overrides):
    values = {
        "arch": "convnet-tiny",
        "epochs": "2",
        "batch_size": "32",
        "lr": "0.02",
        "decay_epochs": "",
        "data.classes": "4",
        "data.train_samples": "96",
        "data.eval_samples": "32",
        "data.shape": "1x8x8",
        "out.dir": str(tmp_path / "run"),
        "out.plot": "false",
    }
    values.update(overrides)
    path = str(tmp_path / "run.cfg")
    with open(path, "w") as f:
        f.writelines(f"{k} = {v}\n" for k, v in values.items())
    return path


def test_expand_then_extract_round_trips(tmp_path, student_ckpt, capsys):
    teacher = str(tmp_path / "teacher.ckpt")
    extracted = str(tmp_path / "back.ckpt")
    assert main(["expand", "--in", student_ckpt, "--out", teacher,
                 "--ratio", "2", "--branches", "6", "--epsilon", "0"]) == 0
    out = capsys.readouterr().out
    assert "max output deviation" in out
    assert main(["extract", "--in", teacher, "--out", extracted]) == 0

    original = checkpoint.load(student_ckpt)
    back = checkpoint.load(extracted)
    for (_, a), (_, b) in zip(original.parameters(), back.parameters()):
        assert np.max(np.abs(a.data - b.data)) < 1e-12


def test_expand_reports_preservation_on_bn_free_model(tmp_path, capsys):
    m = build_student("convnet-nobn", (1, 8, 8), 4, seed=1)
    src = str(tmp_path / "nobn.ckpt")
    checkpoint.save(m, src)
    rc = main(["expand", "--in", src, "--out", str(tmp_path / "t.ckpt"),
               "--ratio", "2", "--branches", "2", "--epsilon", "0",
               "--mode", "paper"])
    assert rc == 0
    dev = float(capsys.readouterr().out.split("deviation")[1].split()[0])
    assert dev < 1e-9


def test_expand_rejects_paper_mode_on_bn_model(student_ckpt, tmp_path, capsys):
    rc = main(["expand", "--in", student_ckpt, "--out", str(tmp_path / "t.ckpt"),
               "--mode", "paper"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_missing_checkpoint_is_exit_1(tmp_path, capsys):
    rc = main(["extract", "--in", str(tmp_path / "nope.ckpt"),
               "--out", str(tmp_path / "o.ckpt")])
    assert rc == 1


def test_train_eval_plot_pipeline(tmp_path, capsys):
    cfg = fast_config(tmp_path)
    assert main(["train", "--config", cfg]) == 0
    run_dir = str(tmp_path / "run")
    assert os.path.exists(os.path.join(run_dir, "records.csv"))
    final_ckpt = os.path.join(run_dir, "teacher_final.ckpt")
    assert os.path.exists(final_ckpt)

    assert main(["eval", "--ckpt", final_ckpt, "--config", cfg, "--view", "teacher"]) == 0
    assert "accuracy" in capsys.readouterr().out

    svg = str(tmp_path / "acc.svg")
    assert main(["plot", "--records", os.path.join(run_dir, "records.csv"),
                 "--out", svg]) == 0
    assert "plotted 3 epoch points" in capsys.readouterr().out
    assert open(svg).read(200).lstrip().startswith("<?xml")


def test_plot_three_row_csv_has_three_points(tmp_path, capsys):
    csv = tmp_path / "r.csv"
    csv.write_text(
        "epoch,iter,ce_s,kd_ss,ce_t,kd_sd,kd_ds,total,acc_s,acc_t,gap,ms\n"
        "0,0,0.0,0.0,0.0,0.0,0.0,0.0,0.25,0.25,0.0,1\n"
        "1,10,1.0,0.0,1.0,0.1,0.0,2.1,0.5,0.6,0.1,1\n"
        "2,20,0.8,0.0,0.8,0.1,0.0,1.7,0.7,0.75,0.05,1\n"
    )
    out = str(tmp_path / "r.svg")
    assert main(["plot", "--records", str(csv), "--out", out]) == 0
    assert "plotted 3 epoch points" in capsys.readouterr().out


def test_gpd_seed_env_overrides_config(tmp_path, monkeypatch):
    cfg = fast_config(tmp_path, **{"out.dir": str(tmp_path / "a")})
    monkeypatch.setenv("GPD_SEED", "3")
    assert main(["train", "--config", cfg]) == 0
    monkeypatch.delenv("GPD_SEED")
    cfg_b = fast_config(tmp_path, seed="3", **{"out.dir": str(tmp_path / "b")})
    assert main(["train", "--config", cfg_b]) == 0
    a = (tmp_path / "a" / "teacher_final.ckpt").read_bytes()
    b = (tmp_path / "b" / "teacher_final.ckpt").read_bytes()
    assert a == b


def test_verify_subcommands_pass(capsys):
    assert main(["verify", "cbr", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "checks passed" in out
    assert "seed 1" in out


def test_config_print_defaults_round_trips(capsys):
    from gpd.config import defaults, parse_config

    assert main(["config", "print-defaults"]) == 0
    printed = capsys.readouterr().out
    assert parse_config(printed) == defaults()
