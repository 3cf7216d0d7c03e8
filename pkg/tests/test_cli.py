import hashlib
import json
import subprocess
import sys

import pytest

from vilocal.cli import main
from vilocal.config import save_config

from conftest import needs_transcoder, tiny_run_config

pytestmark = needs_transcoder


def snapshot(root, skip_report=True):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and not (skip_report and "report" in p.parts)}


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_run_config(max_steps=3)
    cfg.eval.stride = 2
    save_config(cfg, root / "tiny.toml")
    return root


@pytest.fixture(scope="module")
def runs(workspace):
    """gen-data, stage 1, stage 2 and eval run directories built once."""
    cfg = str(workspace / "tiny.toml")
    data, s1, s2, ev = (workspace / n for n in ("data", "s1", "s2", "eval"))
    assert main(["gen-data", "--config", cfg, "--out", str(data), "--seed", "7"]) == 0
    assert main(["train", "--config", cfg, "--out", str(s1), "--stage", "1", "--manifest", str(data)]) == 0
    assert main(["train", "--config", cfg, "--out", str(s2), "--stage", "2", "--manifest", str(data),
                 "--checkpoint", str(s1 / "last.ckpt")]) == 0
    assert main(["eval", "--config", cfg, "--out", str(ev), "--manifest", str(data),
                 "--checkpoint", str(s2 / "last.ckpt")]) == 0
    return {"cfg": cfg, "data": data, "s1": s1, "s2": s2, "eval": ev}


def test_gen_data_is_deterministic(runs, workspace):
    other = workspace / "data_again"
    assert main(["gen-data", "--config", runs["cfg"], "--out", str(other), "--seed", "7"]) == 0
    assert (other / "checksum.txt").read_text() == (runs["data"] / "checksum.txt").read_text()


def test_seed_changes_dataset(runs, workspace):
    other = workspace / "data_seed8"
    assert main(["gen-data", "--config", runs["cfg"], "--out", str(other), "--seed", "8"]) == 0
    assert (other / "checksum.txt").read_text() != (runs["data"] / "checksum.txt").read_text()


@pytest.mark.parametrize("name", ["data", "s1", "s2", "eval"])
def test_run_directory_contents(runs, name):
    run = runs[name]
    for required in ("config.toml", "log.jsonl", "files.json"):
        assert (run / required).is_file()
    listed = json.loads((run / "files.json").read_text())["files"]
    on_disk = snapshot(run, skip_report=False)
    del on_disk["files.json"]
    assert listed == on_disk


def test_resolved_config_records_cli_values(runs):
    import tomli

    cfg = tomli.loads((runs["s2"] / "config.toml").read_text())
    assert cfg["train"]["stage"] == 2
    assert cfg["train"]["stage1_checkpoint"].endswith("last.ckpt")


def test_stage2_without_checkpoint_fails(runs, workspace, capsys):
    code = main(["train", "--config", runs["cfg"], "--out", str(workspace / "bad"), "--stage", "2",
                 "--manifest", str(runs["data"])])
    assert code != 0
    err = last_error(capsys)
    assert err["exit_code"] == code == 4 and "stage-1 checkpoint" in err["message"]
    assert not (workspace / "bad").exists()


def test_refuses_non_empty_out_without_force(runs, capsys):
    code = main(["gen-data", "--config", runs["cfg"], "--out", str(runs["s1"])])
    assert code == 4 and "--force" in last_error(capsys)["message"]


def test_force_replaces_run(runs, workspace):
    out = workspace / "forced"
    out.mkdir()
    (out / "stale.txt").write_text("x")
    assert main(["gen-data", "--config", runs["cfg"], "--out", str(out), "--force"]) == 0
    assert not (out / "stale.txt").exists()


def test_unknown_flag_is_usage_error(capsys):
    assert main(["eval", "--bogus"]) == 2
    assert last_error(capsys)["error"] == "usage"


def test_module_entry_point_exit_code():
    proc = subprocess.run([sys.executable, "-m", "vilocal", "train", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip().splitlines()[-1])["exit_code"] == 2


def test_default_threshold_equals_flag(runs, workspace):
    out = workspace / "eval_t05"
    assert main(["eval", "--config", runs["cfg"], "--out", str(out), "--manifest", str(runs["data"]),
                 "--checkpoint", str(runs["s2"] / "last.ckpt"), "--threshold", "0.5"]) == 0
    assert (out / "frames.csv").read_bytes() == (runs["eval"] / "frames.csv").read_bytes()
    assert (out / "summary.csv").read_bytes() == (runs["eval"] / "summary.csv").read_bytes()


def test_eval_rejects_stage1_checkpoint(runs, workspace, capsys):
    code = main(["eval", "--config", runs["cfg"], "--out", str(workspace / "e1"), "--manifest", str(runs["data"]),
                 "--checkpoint", str(runs["s1"] / "last.ckpt")])
    assert code == 4


def test_corrupt_checkpoint_is_integrity_error(runs, workspace, capsys):
    bad = workspace / "corrupt.ckpt"
    bad.write_bytes(b"junk")
    code = main(["eval", "--config", runs["cfg"], "--out", str(workspace / "e2"), "--manifest", str(runs["data"]),
                 "--checkpoint", str(bad)])
    assert code == 5 and last_error(capsys)["error"] == "integrity"


def test_missing_transcoder_is_environment_error(runs, workspace, monkeypatch, capsys):
    monkeypatch.setenv("VILOCAL_FFMPEG", str(workspace / "no-ffmpeg"))
    code = main(["robustness", "--config", runs["cfg"], "--out", str(workspace / "rb_missing"),
                 "--manifest", str(runs["data"]), "--checkpoint", str(runs["s2"] / "last.ckpt")])
    assert code == 3 and last_error(capsys)["error"] == "environment"


def test_robustness_outputs(runs, workspace):
    out = workspace / "rb"
    assert main(["robustness", "--config", runs["cfg"], "--out", str(out), "--manifest", str(runs["data"]),
                 "--checkpoint", str(runs["s2"] / "last.ckpt"), "--codecs", "x264,ffv1", "--qualities", "18,28"]) == 0
    for name in ("sweep.csv", "sweep_long.csv", "recompression.csv", "recompression_long.csv",
                 "report/sweep.svg", "report/recompression.svg"):
        assert (out / name).is_file(), name
    assert not (out / "work").exists()


def test_bad_codec_rejected(runs, workspace):
    assert main(["robustness", "--config", runs["cfg"], "--out", str(workspace / "rb_bad"),
                 "--manifest", str(runs["data"]), "--checkpoint", str(runs["s2"] / "last.ckpt"),
                 "--codecs", "vp9"]) == 4


@pytest.mark.parametrize("name", ["s1", "s2", "eval"])
def test_report_is_side_effect_free_and_repeatable(runs, name):
    run = runs[name]
    before = snapshot(run)
    first = snapshot(run / "report")
    assert main(["report", str(run)]) == 0
    assert snapshot(run) == before
    assert snapshot(run / "report") == first
    recorded = json.loads((run / "files.json").read_text())["files"]
    for rel, digest in first.items():
        assert recorded[f"report/{rel}"] == digest


def test_report_contents(runs):
    assert (runs["s1"] / "report" / "loss_curves.svg").is_file()
    assert (runs["s1"] / "report" / "losses.csv").is_file()
    assert (runs["eval"] / "report" / "video_scores.svg").is_file()
    assert (runs["eval"] / "report" / "summary.csv").read_bytes() == (runs["eval"] / "summary.csv").read_bytes()


def test_report_missing_run(workspace, capsys):
    assert main(["report", str(workspace / "nothing")]) == 4
