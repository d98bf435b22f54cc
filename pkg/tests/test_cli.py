import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mobilebert_kit import archive
from mobilebert_kit.cli import main
from mobilebert_kit.config import ModelConfig
from mobilebert_kit.training import TrainConfig

TEACHER = ModelConfig(32, 16, 3, 8, 16, 24, 2, 32, 1, "inverted_bottleneck", "conv3_factorized", "layer_norm", "gelu")
STUDENT = ModelConfig(32, 16, 3, 8, 16, 8, 2, 16, 2, "bottleneck", "conv3_factorized", "no_norm", "relu")
TRAIN = TrainConfig(batch_size=4, seq_len=12, teacher_steps=4, kt_steps=6, pd_steps=2, corpus_docs=30)


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    TEACHER.save(d / "teacher.json")
    STUDENT.save(d / "student.json")
    TRAIN.save(d / "train.json")
    assert main(["train-teacher", "--config", str(d / "teacher.json"), "--train-config", str(d / "train.json"),
                 "--out", str(d / "teacher")]) == 0
    return d


def test_params_preset(capsys):
    assert main(["params", "--preset", "mobilebert"]) == 0
    out = capsys.readouterr().out
    assert "backbone" in out and "(25.4M)" in out
    assert main(["params", "--preset", "table2_c"]) == 0
    assert "backbone 294,156,032" in capsys.readouterr().out


def test_params_bad_config_exits_2(tmp_path, capsys):
    doc = ModelConfig.from_dict(json.loads(TEACHER.to_json())).to_dict() | {"h_intra": 6, "num_heads": 4}
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    assert main(["params", "--config", str(tmp_path / "bad.json")]) == 2
    assert "h_intra" in capsys.readouterr().err


def test_train_teacher_outputs(files):
    out = files / "teacher"
    assert {p.name for p in out.iterdir()} >= {"teacher.tbk", "history.csv", "manifest.json", "corpus.txt"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train-teacher" and len(manifest["input_hash"]) == 64


def _transfer(files, out, *extra):
    return main(["transfer", "--teacher", str(files / "teacher" / "teacher.tbk"), "--student-config",
                 str(files / "student.json"), "--train-config", str(files / "train.json"),
                 "--corpus", str(files / "teacher" / "corpus.txt"), "--out", str(out), *extra])


def test_pkt_transfer_logs_stages(files, capsys):
    assert _transfer(files, files / "pkt", "--strategy", "pkt", "--layers", "3", "--kt-steps", "6") == 0
    out = capsys.readouterr().out
    for l in (1, 2, 3):
        assert f"stage pkt_layer_{l}: 2 steps" in out
    assert "stage pd: 2 steps" in out
    stages = [r["stage"] for r in csv.DictReader(open(files / "pkt" / "history.csv"))]
    assert stages == ["pkt_layer_1"] * 2 + ["pkt_layer_2"] * 2 + ["pkt_layer_3"] * 2 + ["pd"] * 2


def test_identical_seeds_identical_outputs(files):
    for name in ("a", "b"):
        assert _transfer(files, files / name, "--strategy", "jkt", "--seed", "4") == 0
    assert (files / "a" / "history.csv").read_bytes() == (files / "b" / "history.csv").read_bytes()
    ma, mb = (json.loads((files / n / "manifest.json").read_text()) for n in ("a", "b"))
    assert ma["input_hash"] == mb["input_hash"]


def test_bad_strategy_exits_2(files, capsys):
    with pytest.raises(SystemExit) as exc:
        _transfer(files, files / "x", "--strategy", "foo")
    assert exc.value.code == 2
    assert "akt" in capsys.readouterr().err


def test_missing_teacher_exits_2(files, capsys):
    rc = main(["transfer", "--teacher", str(files / "nope.tbk"), "--student-config", str(files / "student.json"),
               "--out", str(files / "y")])
    assert rc == 2 and "not found" in capsys.readouterr().err


def test_numeric_blowup_exits_3(files, capsys):
    TRAIN.replace(lr=1e12).save(files / "hot.json")
    rc = main(["transfer", "--teacher", str(files / "teacher" / "teacher.tbk"), "--student-config",
               str(files / "student.json"), "--train-config", str(files / "hot.json"), "--strategy", "akt",
               "--out", str(files / "hot")])
    assert rc == 3
    assert "stage 'akt' at step" in capsys.readouterr().err


def test_distill_then_quantize_then_dump(files, capsys):
    assert _transfer(files, files / "kt", "--strategy", "jkt") == 0
    rc = main(["distill", "--teacher", str(files / "teacher" / "teacher.tbk"), "--student",
               str(files / "kt" / "student.tbk"), "--train-config", str(files / "train.json"), "--out",
               str(files / "pd")])
    assert rc == 0
    ckpt_bytes = (files / "pd" / "student.tbk").read_bytes()
    capsys.readouterr()
    assert main(["quantize", "--checkpoint", str(files / "pd" / "student.tbk"), "--out", str(files / "q")]) == 0
    # per-channel scales weigh heavily at this width; the desk-size ratio is checked elsewhere
    ratio = float(capsys.readouterr().out.split()[2])
    assert 1.5 < ratio < 4.5
    assert (files / "pd" / "student.tbk").read_bytes() == ckpt_bytes
    assert main(["dump-attention", "--checkpoint", str(files / "pd" / "student.tbk"), "--seq-len", "6",
                 "--out", str(files / "att")]) == 0
    entries = archive.load(files / "att" / "attention.tbk")
    maps = [entries[f"layers.{i}.attention"] for i in range(3)]
    assert all(m.shape == (2, 6, 6) for m in maps)
    assert all(np.allclose(m.sum(-1), 1.0, atol=1e-12) for m in maps)


def test_bench_writes_four_rows(tmp_path):
    assert main(["bench", "--preset", "desk_student", "--seq-len", "16", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert len(rows) == 4 and len({r["flops"] for r in rows}) == 1


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mobilebert_kit.cli", "params", "--preset", "bert_base"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "backbone" in proc.stdout
