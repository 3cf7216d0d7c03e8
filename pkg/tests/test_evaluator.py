import csv
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vilocal.evaluator as evaluator
from vilocal.clipset import MaskSequence, VideoClip
from vilocal.errors import TranscodeError, ValidationError
from vilocal.evaluator import (
    MetricsReport,
    RobustnessTable,
    confusion,
    empty_predictor,
    evaluate_dataset,
    evaluate_entries,
    f1,
    full_predictor,
    iou,
    oracle_predictor,
    recompression_matrix,
    robustness_sweep,
)
from vilocal.trainer import train_stage1, train_stage2

from conftest import tiny_run_config


@pytest.fixture(scope="module")
def stage2_ckpt(tiny_dataset):
    s1 = train_stage1(tiny_run_config(max_steps=2), tiny_dataset)
    return train_stage2(tiny_run_config(stage=2, max_steps=4), s1.checkpoint, tiny_dataset).checkpoint


# ---------------------------------------------------------------- metrics

def test_identity_scores_one():
    m = np.zeros((4, 4), np.uint8)
    m[1:3, 1:3] = 1
    assert iou(m, m) == 1.0 and f1(m, m) == 1.0


def test_set_arithmetic_example():
    gt = np.zeros((4, 4), np.uint8)
    gt[0, :2] = 1
    pred = np.zeros((4, 4), np.uint8)
    pred[0, :4] = 1
    assert confusion(pred, gt)[:3] == (2, 2, 0)
    assert iou(pred, gt) == 0.5
    assert f1(pred, gt) == pytest.approx(4 / 6)


def test_degenerate_rules():
    z, o = np.zeros((3, 3)), np.ones((3, 3))
    assert iou(z, z) == 1.0 and f1(z, z) == 1.0
    assert iou(o, z) == 0.0 and f1(o, z) == 0.0
    assert iou(z, o) == 0.0 and f1(z, o) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValidationError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        f1(np.zeros((2, 2)), np.zeros((3, 2)))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), p=st.floats(0, 1), q=st.floats(0, 1))
def test_identities_in_rationals(seed, p, q):
    r = np.random.default_rng(seed)
    pred = (r.random((5, 5)) < p).astype(np.uint8)
    gt = (r.random((5, 5)) < q).astype(np.uint8)
    tp, fp, fn, _ = confusion(pred, gt)
    if tp + fp + fn == 0:
        return
    i = Fraction(tp, tp + fp + fn)
    f = Fraction(2 * tp, 2 * tp + fp + fn)
    assert f == 2 * i / (1 + i)
    assert i == 1 - Fraction(fp + fn, tp + fp + fn)
    assert 0 <= i <= f <= 1
    assert iou(pred, gt) == pytest.approx(float(i), abs=1e-12)
    assert f1(pred, gt) == pytest.approx(float(f), abs=1e-12)
    assert abs(f1(pred, gt) - 2 * iou(pred, gt) / (1 + iou(pred, gt))) < 1e-9


# ---------------------------------------------------------------- dataset evaluation

def test_oracle_predictions_score_one(tiny_dataset):
    report = evaluate_dataset(None, tiny_dataset, "test", predictor=oracle_predictor)
    assert report.mean_iou == 1.0 and report.mean_f1 == 1.0


def test_empty_predictions_score_zero(tiny_dataset):
    report = evaluate_dataset(None, tiny_dataset, "test", predictor=empty_predictor)
    assert report.counts()[1] == 0
    assert report.mean_iou == 0.0 and report.mean_f1 == 0.0


def test_full_prediction_iou_is_area_ratio(tiny_dataset):
    report = evaluate_dataset(None, tiny_dataset, "test", predictor=full_predictor)
    for fs in report.frames:
        assert fs.iou == pytest.approx((fs.tp + fs.fn) / (fs.tp + fs.fp + fs.fn + fs.tn))


def test_aggregation_matches_recomputation_from_csv(tiny_dataset, stage2_ckpt, tmp_path):
    report = evaluate_dataset(stage2_ckpt, tiny_dataset, "test", stride=2)
    frames_csv, summary_csv = report.write_csv(tmp_path)
    per_video = {}
    with frames_csv.open(newline="") as fh:
        for row in csv.DictReader(fh):
            tp, fp, fn = int(row["tp"]), int(row["fp"]), int(row["fn"])
            denom = tp + fp + fn
            score = 1.0 if denom == 0 else (0.0 if tp == 0 else tp / denom)
            f1s = 1.0 if denom == 0 else 2 * tp / (2 * tp + fp + fn)
            per_video.setdefault(row["clip_path"], []).append((score, f1s))
    want_iou = np.mean([np.mean([s for s, _ in v]) for v in per_video.values()])
    want_f1 = np.mean([np.mean([f for _, f in v]) for v in per_video.values()])
    with summary_csv.open(newline="") as fh:
        summary = {row["metric"]: row["value"] for row in csv.DictReader(fh)}
    assert float(summary["mean_iou"]) == pytest.approx(want_iou, abs=1e-12)
    assert float(summary["mean_f1"]) == pytest.approx(want_f1, abs=1e-12)
    assert int(summary["videos"]) == len(per_video) == 3
    back = MetricsReport.read_frames_csv(frames_csv)
    assert back.mean_iou == pytest.approx(report.mean_iou, abs=1e-12)


def test_evaluation_is_pure(tiny_dataset, stage2_ckpt, tmp_path):
    a = evaluate_dataset(stage2_ckpt, tiny_dataset, "test")
    b = evaluate_dataset(stage2_ckpt, tiny_dataset, "test")
    pa, _ = a.write_csv(tmp_path / "a")
    pb, _ = b.write_csv(tmp_path / "b")
    assert pa.read_bytes() == pb.read_bytes()


def test_default_threshold_equals_explicit(tiny_dataset, stage2_ckpt):
    a = evaluate_dataset(stage2_ckpt, tiny_dataset, "test")
    b = evaluate_dataset(stage2_ckpt, tiny_dataset, "test", threshold=0.5)
    assert a.summary() == b.summary()


def test_short_clip_is_skipped_and_counted(monkeypatch, tiny_dataset):
    entries = tiny_dataset.split("test")
    short = entries[0]

    def fake_load(self, target_resolution=None):
        if self.clip_path == short.clip_path:
            return VideoClip(np.zeros((3, 8, 8, 3), np.uint8)), MaskSequence(np.zeros((3, 8, 8), np.uint8))
        return original(self, target_resolution)

    original = type(short).load
    monkeypatch.setattr(type(short), "load", fake_load)
    report = evaluate_entries(oracle_predictor, entries)
    assert len(report.skipped) == 1 and report.summary()["skipped_clips"] == 1
    assert len(report.per_video()) == len(entries) - 1


# ---------------------------------------------------------------- robustness harness

def test_ffv1_cells_equal_baseline(tiny_dataset, stage2_ckpt, tmp_path):
    table = robustness_sweep(stage2_ckpt, tiny_dataset, ["ffv1"], [13, 28], tmp_path)
    for q in (13, 28):
        assert abs(table.cells[("ffv1", q)]["iou"] - table.baseline["iou"]) <= 1e-9
        assert abs(table.cells[("ffv1", q)]["f1"] - table.baseline["f1"]) <= 1e-9


def test_sweep_grid_is_complete(tiny_dataset, tmp_path):
    table = robustness_sweep(None, tiny_dataset, ["x264", "x265"], [13, 18, 23, 28], tmp_path,
                             predictor=oracle_predictor)
    assert table.complete() and len(table.cells) == 8 and not table.failed()
    assert all(c["iou"] == 1.0 for c in table.cells.values())


def test_failed_transcode_marks_cell(monkeypatch, tiny_dataset, tmp_path):
    real = evaluator.compress_clip

    def flaky(src, codec, quality, dst=None):
        if codec == "x265":
            raise TranscodeError("boom", log="simulated")
        return real(src, codec, quality, dst)

    monkeypatch.setattr(evaluator, "compress_clip", flaky)
    table = robustness_sweep(None, tiny_dataset, ["x264", "x265"], [23], tmp_path, predictor=oracle_predictor)
    assert table.cells[("x265", 23)]["status"] == "failed"
    assert table.cells[("x264", 23)]["status"] == "ok"
    assert table.complete()
    path = table.write_csv(tmp_path / "sweep.csv")
    assert "failed" in path.read_text()


def test_recompression_grid(tiny_dataset, stage2_ckpt, tmp_path):
    codecs = ["x264", "x265", "ffv1", "mpeg4"]
    table = recompression_matrix(stage2_ckpt, tiny_dataset, codecs, tmp_path)
    assert table.complete() and len(table.cells) == 16 and not table.failed()
    assert abs(table.cells[("ffv1", "ffv1")]["iou"] - table.baseline["iou"]) <= 1e-9
    path = table.write_csv(tmp_path / "recompression.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["second\\first"] + codecs
    assert [r[0] for r in rows[1:5]] == codecs
    back = RobustnessTable.read_long_csv(tmp_path / "recompression_long.csv", "recompression")
    assert back.cells.keys() == table.cells.keys()
    for k, v in table.cells.items():
        assert back.cells[k]["iou"] == v["iou"] or (math.isnan(v["iou"]) and math.isnan(back.cells[k]["iou"]))
