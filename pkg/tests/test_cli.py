import json
import os
import subprocess
import sys

import pytest

from bipose import cli, model as M

CONFIG = """
[network]
stem_channels = 4
width = 4
planes = 2

[data]
train_size = 24
val_size = 8

[train]
epochs = 2
milestones = 1
batch_size = 8
sigma = 1.0
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(CONFIG)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_train_teacher_distill_eval(tmp_path, cfg, capsys):
    teacher = tmp_path / "teacher.bihr"
    log = tmp_path / "teacher.jsonl"
    assert run("train-teacher", "--config", cfg, "--out", teacher, "--log", log, "--seed", 3) == 0
    assert teacher.exists()
    assert len(log.read_text().splitlines()) == 2
    assert "pck@0.5 = " in capsys.readouterr().out

    student = tmp_path / "student.bihr"
    assert run("distill", "--config", cfg, "--teacher", teacher, "--out", student,
               "--alpha-mix", 0.5, "--loss", "awing") == 0
    net, state = M.load_checkpoint(student)
    assert net.config.binarize and state["alpha_mix"] == 0.5
    capsys.readouterr()

    preds = tmp_path / "pred.jsonl"
    assert run("eval", student, "--config", cfg, "--predictions", preds) == 0
    out = capsys.readouterr().out
    fields = dict(line.split(" = ") for line in out.strip().splitlines())
    assert float(fields["ops"]) == float(fields["flops"]) + float(fields["bops"]) / 64
    assert fields["protocol"] == cli.AP_PROTOCOL
    assert len(preds.read_text().splitlines()) == 8 * 5

    # report is stable for a fixed checkpoint
    run("eval", student, "--config", cfg)
    assert capsys.readouterr().out == out


def test_seeded_logs_identical(tmp_path, cfg):
    for name in ("a", "b"):
        assert run("train-teacher", "--config", cfg, "--out", tmp_path / f"{name}.bihr",
                   "--log", tmp_path / f"{name}.jsonl", "--seed", 11) == 0
    strip = lambda p: [{k: v for k, v in json.loads(l).items()} for l in p.read_text().splitlines()]
    assert strip(tmp_path / "a.jsonl") == strip(tmp_path / "b.jsonl")


def test_supervised_baseline_needs_no_teacher(tmp_path, cfg):
    assert run("distill", "--config", cfg, "--out", tmp_path / "s.bihr", "--alpha-mix", 1.0, "--loss", "mse") == 0


def test_exit_codes(tmp_path, cfg):
    out = tmp_path / "x.bihr"
    assert run("train-teacher", "--config", tmp_path / "missing.ini", "--out", out) == cli.EXIT_CONFIG
    assert not out.exists()
    bad = tmp_path / "bad.ini"
    bad.write_text("[network]\nwidth = 6\n")
    assert run("train-teacher", "--config", bad, "--out", out) == cli.EXIT_CONFIG
    assert run("distill", "--config", cfg, "--out", out, "--alpha-mix", 0.5) == cli.EXIT_USAGE
    corrupt = tmp_path / "c.bihr"
    corrupt.write_bytes(b"BIHR\x01\x00garbage")
    assert run("eval", corrupt) == cli.EXIT_FORMAT
    corrupt.write_bytes(b"NOPE" + b"\x00" * 20)
    assert run("eval", corrupt) == cli.EXIT_FORMAT
    with pytest.raises(SystemExit) as e:
        run("frobnicate")
    assert e.value.code == cli.EXIT_USAGE
    assert list(p.name for p in tmp_path.iterdir() if p.name.startswith(".tmp")) == []


def test_incompatible_teacher(tmp_path, cfg):
    t = M.build(M.desk_config(stem_channels=4, width=4, planes=2, binarize=False, joints=3))
    M.save(t, tmp_path / "t.bihr")
    assert run("distill", "--config", cfg, "--teacher", tmp_path / "t.bihr", "--out", tmp_path / "s.bihr",
               "--alpha-mix", 0.5) == cli.EXIT_CONFIG
    assert not (tmp_path / "s.bihr").exists()


def test_bench_and_export(tmp_path, capsys):
    csv_path = tmp_path / "b.csv"
    assert run("bench", "--shape", "8x4x3x6x6", "--repeats", 1, "--out", csv_path) == 0
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("c_in,")
    capsys.readouterr()
    net = M.build(M.desk_config(stem_channels=4, width=4, planes=2))
    M.save(net, tmp_path / "ckpt.bihr", {"epoch": 1})
    assert run("export", tmp_path / "ckpt.bihr", "--out", tmp_path / "m.bihr") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["binary_params"] > 0
    assert M.load_checkpoint(tmp_path / "m.bihr")[1] is None


def test_init_config_parses(tmp_path):
    assert run("init-config", "--out", tmp_path / "d.ini") == 0
    from bipose import config as C

    assert C.load(tmp_path / "d.ini").network == M.NetworkConfig()


def test_ablate_small(tmp_path, cfg, capsys):
    assert run("ablate", "--config", cfg, "--seeds", 0, "--cells", "awing", "awing+kd") == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0] == "cell,seed,pck@0.5,pck@0.1,AP"
    assert len(out) == 1 + 2 + 2


def test_module_entry_point(tmp_path):
    env = dict(os.environ)
    r = subprocess.run([sys.executable, "-m", "bipose.cli", "--help"], capture_output=True, text=True, env=env)
    assert r.returncode == 0 and "train-teacher" in r.stdout
