import csv
import json
import os
import struct
import subprocess
import sys

import pytest

from gtaseg.harness.cli import METRICS_HEADER, main

TINY = """\
method: {method}
epochs: 1
warmup_epochs: 1
n_labeled: 4
n_unlabeled: 16
n_heldout: 4
batch_l: 2
batch_u: 8
image_size: 12
hidden: [4, 4]
"""


def _config(tmp_path, method="gta", extra=""):
    path = tmp_path / f"{method}.yaml"
    path.write_text(TINY.format(method=method) + extra)
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_gta_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(_config(tmp_path)), "--out", str(out)]) == 0
    rows = _rows(out / "metrics.csv")
    assert rows[0] == METRICS_HEADER
    assert {r[1] for r in rows[1:]} == {"gta", "student", "teacher"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0] and manifest["config"]["method"] == "gta"
    assert set(manifest["artifacts"]["checkpoints"]) == {"gta", "student", "teacher"}
    for rel in [manifest["artifacts"]["metrics"], *manifest["artifacts"]["checkpoints"].values()]:
        assert (out / rel).exists()


def test_run_suponly_has_zero_unsupervised_loss(tmp_path):
    out = tmp_path / "sup"
    assert main(["run", "--config", str(_config(tmp_path, "suponly")), "--out", str(out)]) == 0
    rows = _rows(out / "metrics.csv")[1:]
    assert rows and all(float(r[METRICS_HEADER.index("loss_u")]) == 0.0 for r in rows)
    assert {r[1] for r in rows} == {"student"}


def test_run_is_deterministic(tmp_path):
    cfg = _config(tmp_path, "mean_teacher")
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "3"])
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "3"])
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()


def test_run_multiple_seeds(tmp_path):
    out = tmp_path / "multi"
    assert main(["run", "--config", str(_config(tmp_path, "suponly")), "--out", str(out), "--seeds", "0,1"]) == 0
    assert (out / "seed_0/metrics.csv").exists() and (out / "seed_1/student.gtas").exists()
    assert json.loads((out / "manifest.json").read_text())["seeds"] == [0, 1]


def test_missing_method_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("epochs: 1\n")
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
    assert "method" in capsys.readouterr().err


def test_unknown_key_exit_2_names_line(tmp_path, capsys):
    path = _config(tmp_path, extra="lr_inti: 0.1\n")
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
    assert "line 11" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_exits_3_with_iteration(tmp_path, capsys):
    path = _config(tmp_path, "suponly", extra="lr_init: 1.0e+30\n")
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "x")]) == 3
    assert "iteration" in capsys.readouterr().err


def test_missing_config_exits_4(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "x")]) == 4


def test_gen_data_and_eval(tmp_path, capsys):
    cfg = _config(tmp_path, "suponly")
    data = tmp_path / "data.gtad"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "student.gtas"), "--data", str(data)]) == 0
    report = json.loads(capsys.readouterr().out)
    rows = _rows(out / "metrics.csv")
    assert report["miou"] == pytest.approx(float(rows[-1][2]))


def test_corrupt_files_exit_4(tmp_path):
    cfg = _config(tmp_path, "suponly")
    out = tmp_path / "run"
    main(["run", "--config", str(cfg), "--out", str(out)])
    ckpt = out / "student.gtas"
    raw = bytearray(ckpt.read_bytes())
    bad_magic = tmp_path / "magic.gtas"
    bad_magic.write_bytes(b"NOPE" + raw[4:])
    assert main(["eval", "--checkpoint", str(bad_magic), "--config", str(cfg)]) == 4
    raw[4:6] = struct.pack("<H", 9)
    bad_version = tmp_path / "version.gtas"
    bad_version.write_bytes(bytes(raw))
    assert main(["eval", "--checkpoint", str(bad_version), "--config", str(cfg)]) == 4
    data = tmp_path / "d.gtad"
    main(["gen-data", "--config", str(cfg), "--out", str(data)])
    data.write_bytes(data.read_bytes()[:100])
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data)]) == 4


def test_ablate_writes_summary(tmp_path):
    out = tmp_path / "abl"
    code = main(["ablate", "--config", str(_config(tmp_path)), "--axes", "ema-scope", "--out", str(out),
                 "--seeds", "0,1"])
    assert code == 0
    rows = _rows(out / "summary.csv")
    assert [r[0] for r in rows[1:]] == ["EMA(all)", "EMA(extractor)"]
    assert rows[1][2] == "0 1"
    assert (out / "EMA_all/seed_1/metrics.csv").exists()


def test_ablate_parallel_matches_sequential(tmp_path):
    cfg = str(_config(tmp_path))
    main(["ablate", "--config", cfg, "--axes", "alpha=0.9,0.99", "--out", str(tmp_path / "s"), "--seeds", "0"])
    main(["ablate", "--config", cfg, "--axes", "alpha=0.9,0.99", "--out", str(tmp_path / "p"), "--seeds", "0",
          "--workers", "2"])
    assert (tmp_path / "s/summary.csv").read_bytes() == (tmp_path / "p/summary.csv").read_bytes()


def test_ablate_incompatible_axis_exits_2(tmp_path):
    code = main(["ablate", "--config", str(_config(tmp_path, "suponly")), "--axes", "ema_scope=all",
                 "--out", str(tmp_path / "x")])
    assert code == 2


def test_console_entry_point(tmp_path):
    env = {**os.environ, "GTASEG_LOG_LEVEL": "WARNING"}
    proc = subprocess.run([sys.executable, "-m", "gtaseg.harness.cli", "--version"], capture_output=True, text=True,
                          env=env)
    assert proc.returncode == 0 and "gtaseg" in proc.stdout
