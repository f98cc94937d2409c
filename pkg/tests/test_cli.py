import json
import subprocess
import sys

import pytest

from aegis.cli import main
from aegis.config import PretrainConfig, TrainingConfig, load_ini, to_ini
from aegis.models import ToyVLMConfig


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = TrainingConfig(
        model=ToyVLMConfig(num_layers=2, d_model=16, num_heads=2),
        steps=10, warmup=2, eval_every=5, ewc_samples=4,
        pretrain=PretrainConfig(max_steps=10, min_steps=0, eval_every=5, batch_size=8,
                                anchor_batches=2, anchor_batch_size=4),
    )
    (d / "tiny.ini").write_text(to_ini(cfg))
    ini = str(d / "tiny.ini")
    assert main(["pretrain", "--config", ini, "--out", str(d / "pre.ckpt")]) == 0
    assert main(["anchor", "build", "--config", ini, "--model", str(d / "pre.ckpt"),
                 "--out", str(d / "anchor.bin")]) == 0
    for cond in ("naive", "aegis"):
        argv = ["train", "--config", ini, "--condition", cond, "--checkpoint", str(d / "pre.ckpt"),
                "--run-dir", str(d / cond)]
        if cond == "aegis":
            argv += ["--anchor", str(d / "anchor.bin")]
        assert main(argv) == 0
    return d, ini


def test_train_writes_run_directory(work):
    d, _ = work
    for cond in ("naive", "aegis"):
        s = json.loads((d / cond / "summary.json").read_text())
        assert s["condition"] == cond and s["steps"] == 10
        assert (d / cond / "final.ckpt").exists() and (d / cond / "config.ini").exists()
    assert (d / "aegis" / "projection.csv").exists()
    assert not (d / "naive" / "projection.csv").exists()


def test_set_overrides_and_saved_config(work, tmp_path):
    d, ini = work
    assert main(["train", "--config", ini, "--set", "steps=5", "--set", "eval_every=5",
                 "--set", "pretrain.seed=0", "--condition", "ewc", "--checkpoint", str(d / "pre.ckpt"),
                 "--run-dir", str(tmp_path / "ewc")]) == 0
    saved = load_ini(tmp_path / "ewc" / "config.ini")
    assert saved.steps == 5 and saved.condition == "ewc" and saved.model.d_model == 16


def test_compare_and_summarize(work, capsys):
    d, _ = work
    assert main(["compare", str(d / "naive"), str(d / "aegis"), "--out", str(d / "cmp.csv")]) == 0
    out = capsys.readouterr().out
    assert "naive" in out and "aegis" in out
    assert (d / "cmp.csv").read_text().startswith("step,naive:holdout_ce")
    assert main(["diag", "summarize", str(d / "aegis" / "metrics.csv"), "--out", str(d / "s.csv")]) == 0
    assert "throttle" in capsys.readouterr().out


def test_diag_commands(work, capsys):
    d, ini = work
    assert main(["diag", "spectrum", "--config", ini, "--checkpoint", str(d / "pre.ckpt"), "--k", "3",
                 "--batch", "4", "--expert-steps", "2", "--out", str(d / "spectrum.csv")]) == 0
    assert len((d / "spectrum.csv").read_text().splitlines()) == 3
    assert main(["diag", "conflict", "--config", ini, "--checkpoint", str(d / "pre.ckpt"),
                 "--anchor", str(d / "anchor.bin"), "--param", "llm.layers.1.mlp.down_proj.weight",
                 "--expert-steps", "2", "--out", str(d / "conf.csv")]) == 0
    assert main(["diag", "drift", "--config", ini, "--base", str(d / "pre.ckpt"),
                 "--naive", str(d / "naive" / "final.ckpt"), "--aegis", str(d / "aegis" / "final.ckpt"),
                 "--samples", "20", "--out", str(d / "drift.csv")]) == 0
    out = capsys.readouterr().out
    assert "kappa_3" in out and "negative fraction" in out and "drift-axis" in out


def test_errors_return_two(work, tmp_path, capsys):
    d, ini = work
    assert main(["compare", str(tmp_path / "nope")]) == 2
    assert "does not exist" in capsys.readouterr().err
    with pytest.raises(SystemExit, match="--anchor is required"):
        main(["train", "--config", ini, "--condition", "aegis", "--checkpoint", str(d / "pre.ckpt")])
    with pytest.raises(SystemExit):
        main(["train", "--condition", "bogus", "--checkpoint", "x"])
    with pytest.raises(SystemExit, match="section.key=value"):
        main(["train", "--set", "steps", "--condition", "naive", "--checkpoint", "x"])


def test_suite_subcommand(work, tmp_path):
    d, ini = work
    assert main(["suite", "--config", ini, "--root", str(tmp_path), "--checkpoint", str(d / "pre.ckpt"),
                 "--conditions", "naive", "stopgrad", "--seeds", "0", "1"]) == 0
    for name in ("naive-s0", "naive-s1", "stopgrad-s0", "stopgrad-s1"):
        assert (tmp_path / name / "summary.json").exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "aegis.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "diag" in r.stdout
