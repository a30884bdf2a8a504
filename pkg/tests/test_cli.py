import json

import pytest
import yaml

from gate_bilevel.cli import main

from test_harness import TINY


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def test_train_and_rerun_bitwise(tmp_path, conf, capsys):
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert set(json.loads(capsys.readouterr().out.splitlines()[-1])) == {"p", "q"}


def test_seed_override_and_fixed_lambda(tmp_path, conf):
    assert main(["train", "--config", str(conf), "--seed", "4", "--fixed-lambda", "0.3", "--out", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["seed"] == 4 and s["mode"] == "fixed"
    assert {l[2] for l in s["lambda_final"]} == {0.3}


def test_resume(tmp_path, conf):
    out = tmp_path / "r"
    assert main(["train", "--config", str(conf), "--out", str(out), "--stop-after", "2"]) == 0
    assert main(["train", "--config", str(conf), "--out", str(out), "--resume", str(out / "ckpt_2.bin")]) == 0
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "f")]) == 0
    assert (out / "metrics.csv").read_bytes() == (tmp_path / "f" / "metrics.csv").read_bytes()


def test_other_verbs(tmp_path, conf):
    run = tmp_path / "run"
    assert main(["train", "--config", str(conf), "--out", str(run)]) == 0
    assert main(["lambda-report", str(run), "--threshold", "0.1"]) == 0
    assert (run / "lambda_report.json").exists()
    assert main(["curves", str(run), "--out", str(tmp_path / "c")]) == 0
    assert main(["synth", "--config", str(conf), "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "p.csv").exists()
    TINY_GRID = {**TINY, "grid": {"values": [0.5]}}
    (tmp_path / "g.yaml").write_text(yaml.safe_dump(TINY_GRID))
    assert main(["grid", "--config", str(tmp_path / "g.yaml"), "--out", str(tmp_path / "g")]) == 0
    assert main(["compare", "--config", str(conf), "--seeds", "0", "--out", str(tmp_path / "cmp")]) == 0
    assert (tmp_path / "cmp" / "report.json").exists()


def test_exit_codes(tmp_path, conf, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {epochz: 3}\ndata: {preset: three_task}\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "train.epochz" in capsys.readouterr().err
    div = tmp_path / "div.yaml"
    div.write_text(yaml.safe_dump({**TINY, "train": {**TINY["train"], "divergence_limit": 1e-9}}))
    assert main(["train", "--config", str(div), "--out", str(tmp_path / "d")]) == 3
    assert (tmp_path / "d" / "metrics.csv").exists()
    assert main(["train", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "m")]) == 4
    assert main(["lambda-report", str(tmp_path / "nowhere")]) == 4
    corrupt = tmp_path / "c.bin"
    corrupt.write_bytes(b"GATECKPT" + b"\0" * 10)
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "y"), "--resume", str(corrupt)]) == 4
