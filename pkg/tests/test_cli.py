import hashlib
import json
import time

import pytest

from stable_teacher.cli import ConfigError, build_config, dump_config, main, parse_kv_lines

SMOKE = """\
# tiny smoke configuration
train.epochs=1
train.batch_size=4
train.clip_len=4
train.lr=0.001
train.detector_channels=4,8,8
train.eor_depth=3
train.eor_channels=4,8,8
train.ramp_epochs=0
synth.train_per_class=4
synth.val_per_class=1
synth.test_per_class=1
synth.height=24
synth.width=24
synth.shapes=rectangle,disc
split.percent=50
"""


@pytest.fixture
def smoke_config(tmp_path):
    p = tmp_path / "smoke.cfg"
    p.write_text(SMOKE)
    return p


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_parse_and_coerce():
    cfg = build_config(parse_kv_lines(SMOKE.splitlines()))
    assert cfg.detector_channels == [4, 8, 8]
    assert cfg.synth.shapes == ("rectangle", "disc")
    assert cfg.percent_labeled == 50.0 and cfg.lr == 1e-3
    assert build_config(parse_kv_lines(dump_config(cfg).splitlines())) == cfg


@pytest.mark.parametrize("line", ["train.nope=1", "bogus=1", "train.epochs=ten", "split.percent=0",
                                  "train.mode=other", "train.eor_volumetric=maybe"])
def test_bad_config_keys(line):
    with pytest.raises(ConfigError):
        build_config(parse_kv_lines([line]))


def test_default_config_echo():
    text = dump_config(build_config({}))
    assert "train.beta=0.99\n" in text and "train.lambda_max=0.1\n" in text
    assert "train.mode=full\n" in text


def test_gen_data_is_reproducible(tmp_path, smoke_config):
    assert main(["gen-data", "--config", str(smoke_config), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", str(smoke_config), "--out", str(tmp_path / "b")]) == 0
    for name in ("dataset.json", "split.json"):
        assert _digest(tmp_path / "a" / name) == _digest(tmp_path / "b" / name)
    split = json.loads((tmp_path / "a" / "split.json").read_text())
    assert len(split["labeled"]) == 8 and len(split["unlabeled"]) == 8


def test_gen_data_zero_percent_is_config_error(tmp_path, smoke_config, capsys):
    code = main(["gen-data", "--config", str(smoke_config), "--set", "split.percent=0",
                 "--out", str(tmp_path / "x")])
    assert code == 2
    assert "split.percent" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 2


def test_train_evaluate_report(tmp_path, smoke_config, monkeypatch):
    monkeypatch.setenv("STABLE_TEACHER_CACHE", str(tmp_path / "cache"))
    run = tmp_path / "runs" / "sup"
    assert main(["train", "--config", str(smoke_config), "--mode", "supervised", "--out", str(run)]) == 0
    assert any((tmp_path / "cache").iterdir())
    for name in ("config.json", "losses.csv", "metrics.json", "checkpoint_final.npz", "report.json",
                 "report.csv", "run_config.txt"):
        assert (run / name).exists(), name
    header, *rows = (run / "losses.csv").read_text().splitlines()
    cols = header.split(",")
    for row in rows:
        vals = dict(zip(cols, row.split(",")))
        assert all(float(vals[k]) == 0.0 for k in ("base_cls_cons", "base_loc_cons", "eor_cons",
                                                    "dop_u", "dop_eor"))

    ck = str(run / "checkpoint_final.npz")
    assert main(["evaluate", "--checkpoint", ck, "--split", "test", "--out", str(tmp_path / "r1.json"),
                 "--detections", str(tmp_path / "d.jsonl")]) == 0
    assert main(["evaluate", "--checkpoint", ck, "--split", "test", "--out", str(tmp_path / "r2.json")]) == 0
    assert _digest(tmp_path / "r1.json") == _digest(tmp_path / "r2.json")
    rep = json.loads((tmp_path / "r1.json").read_text())
    assert {"0.2", "0.5"} <= set(rep["v-mAP"])
    assert (tmp_path / "d.jsonl").read_text().count("\n") == 4  # 4 classes x 1 test clip

    out = tmp_path / "report"
    assert main(["report", "--runs", str(run), "--out", str(out)]) == 0
    assert (out / f"loss_{run.name}.png").exists()
    assert "supervised" in (out / "ablation.md").read_text()
    assert (out / "runs.csv").read_text().count("\n") == 2


def test_all_modes_smoke_and_ablation_table(tmp_path, smoke_config):
    runs = []
    start = time.time()
    for mode in ("supervised", "mean-teacher", "+eor", "+dop", "full"):
        run = tmp_path / mode.replace("+", "plus-")
        assert main(["train", "--config", str(smoke_config), "--mode", mode, "--out", str(run)]) == 0
        runs.append(str(run))
    assert time.time() - start < 300
    assert main(["report", "--runs", *runs, "--out", str(tmp_path / "rep")]) == 0
    table = (tmp_path / "rep" / "ablation.md").read_text().splitlines()
    assert [line.split("|")[1].strip() for line in table[2:]] == [
        "supervised", "mean-teacher", "+eor", "+dop", "full"]
    for name in ("map_vs_percent.png", "per_class.png"):
        assert (tmp_path / "rep" / name).exists()


def test_report_missing_run_dir(tmp_path, capsys):
    assert main(["report", "--runs", str(tmp_path / "gone"), "--out", str(tmp_path / "o")]) == 2
    assert "gone" in capsys.readouterr().err


def test_evaluate_bad_checkpoint(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"junk")
    assert main(["evaluate", "--checkpoint", str(bad), "--out", str(tmp_path / "r.json")]) == 1


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "stable_teacher", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
