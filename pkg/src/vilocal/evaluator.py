"""Pixel IoU / F1 scoring, dataset evaluation and codec robustness sweeps."""

from __future__ import annotations

import csv
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint
from .clipset.manifest import DatasetManifest, ManifestEntry
from .clipset.media import compress_clip, compression_tag
from .clipset.types import MIDDLE, UNIT_LENGTH
from .clipset.units import assemble_units
from .decoder import DEFAULT_THRESHOLD, binarize
from .errors import ClipIOError, TranscodeError, ValidationError
from .trainer import InputTransform, decoder_from_checkpoint, encoder_from_checkpoint
from .hp3d import Hp3dKernel

log = logging.getLogger(__name__)

FRAME_FIELDS = ("clip_path", "source_id", "inpaint_method", "compression_tag", "frame_index",
                "tp", "fp", "fn", "tn", "iou", "f1")


def confusion(pred, gt) -> tuple[int, int, int, int]:
    p, g = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValidationError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn, p.size - tp - fp - fn


def iou_from_counts(tp: int, fp: int, fn: int) -> float:
    """|P & G| / |P | G|; 1 when both masks are empty."""
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """2TP / (2TP + FP + FN); 1 when both masks are empty."""
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def iou(pred, gt) -> float:
    tp, fp, fn, _ = confusion(pred, gt)
    return iou_from_counts(tp, fp, fn)


def f1(pred, gt) -> float:
    tp, fp, fn, _ = confusion(pred, gt)
    return f1_from_counts(tp, fp, fn)


@dataclass
class FrameScore:
    clip_path: str
    source_id: str
    inpaint_method: str
    compression_tag: str
    frame_index: int
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def iou(self) -> float:
        return iou_from_counts(self.tp, self.fp, self.fn)

    @property
    def f1(self) -> float:
        return f1_from_counts(self.tp, self.fp, self.fn)

    def row(self) -> dict:
        d = {k: getattr(self, k) for k in FRAME_FIELDS}
        d["iou"], d["f1"] = f"{self.iou:.10f}", f"{self.f1:.10f}"
        return d


@dataclass
class MetricsReport:
    frames: list = field(default_factory=list)
    threshold: float = DEFAULT_THRESHOLD
    skipped: list = field(default_factory=list)
    tags: dict = field(default_factory=dict)

    def per_video(self) -> dict:
        """Mean frame IoU / F1 per clip, keyed by clip path (manifest order)."""
        out = {}
        for fs in self.frames:
            out.setdefault(fs.clip_path, []).append(fs)
        return {k: {"iou": float(np.mean([f.iou for f in v])), "f1": float(np.mean([f.f1 for f in v])),
                    "frames": len(v), "source_id": v[0].source_id, "inpaint_method": v[0].inpaint_method,
                    "compression_tag": v[0].compression_tag}
                for k, v in out.items()}

    @property
    def mean_iou(self) -> float:
        """Headline score: mean over videos of the per-video frame mean."""
        vids = self.per_video()
        return float(np.mean([v["iou"] for v in vids.values()])) if vids else math.nan

    @property
    def mean_f1(self) -> float:
        vids = self.per_video()
        return float(np.mean([v["f1"] for v in vids.values()])) if vids else math.nan

    @property
    def frame_mean_iou(self) -> float:
        return float(np.mean([f.iou for f in self.frames])) if self.frames else math.nan

    @property
    def frame_mean_f1(self) -> float:
        return float(np.mean([f.f1 for f in self.frames])) if self.frames else math.nan

    def counts(self) -> tuple[int, int, int]:
        return (sum(f.tp for f in self.frames), sum(f.fp for f in self.frames), sum(f.fn for f in self.frames))

    def summary(self) -> dict:
        tp, fp, fn = self.counts()
        return {"threshold": self.threshold, "videos": len(self.per_video()), "frames": len(self.frames),
                "skipped_clips": len(self.skipped), "mean_iou": self.mean_iou, "mean_f1": self.mean_f1,
                "frame_mean_iou": self.frame_mean_iou, "frame_mean_f1": self.frame_mean_f1,
                "tp": tp, "fp": fp, "fn": fn, **{f"tag_{k}": v for k, v in self.tags.items()}}

    def write_csv(self, out_dir, prefix: str = "") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        frames_path = out_dir / f"{prefix}frames.csv"
        with frames_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, FRAME_FIELDS)
            w.writeheader()
            for fs in self.frames:
                w.writerow(fs.row())
        summary_path = out_dir / f"{prefix}summary.csv"
        with summary_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in self.summary().items():
                w.writerow([k, v])
        return frames_path, summary_path

    @classmethod
    def read_frames_csv(cls, path, threshold: float = DEFAULT_THRESHOLD) -> "MetricsReport":
        frames = []
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                frames.append(FrameScore(row["clip_path"], row["source_id"], row["inpaint_method"],
                                         row["compression_tag"], int(row["frame_index"]),
                                         int(row["tp"]), int(row["fp"]), int(row["fn"]), int(row["tn"])))
        return cls(frames, threshold)

    @classmethod
    def read_run(cls, run_dir) -> "MetricsReport":
        """Rebuild a report from the ``frames.csv`` and ``summary.csv`` an evaluation wrote."""
        run_dir = Path(run_dir)
        report = cls.read_frames_csv(run_dir / "frames.csv")
        summary_path = run_dir / "summary.csv"
        if summary_path.is_file():
            with summary_path.open(newline="", encoding="utf-8") as fh:
                summary = {row["metric"]: row["value"] for row in csv.DictReader(fh)}
            report.threshold = float(summary.get("threshold", DEFAULT_THRESHOLD))
            # only the count of skipped clips survives the round trip
            report.skipped = [None] * int(summary.get("skipped_clips", 0))
            for k, v in summary.items():
                if k.startswith("tag_"):
                    report.tags[k[4:]] = int(v) if v.lstrip("-").isdigit() else v
        return report


class Predictor:
    """Probability maps for 5-frame units from a stage-2 checkpoint."""

    def __init__(self, ckpt: Checkpoint, batch_size: int = 2):
        self.encoder = encoder_from_checkpoint(ckpt).eval()
        self.decoder = decoder_from_checkpoint(ckpt).eval()
        train = ckpt.config["train"]
        kernel = Hp3dKernel.from_file(train["hp3d_kernel"]) if train.get("hp3d_kernel") else None
        self.transform = InputTransform(bool(train["use_hp3d"]), kernel, float(train.get("residual_gain", 1.0)))
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, frames: np.ndarray) -> np.ndarray:
        """``N x 5 x H x W x 3`` uint8 -> ``N x H x W`` probabilities."""
        out = []
        for i in range(0, len(frames), self.batch_size):
            x = torch.from_numpy(np.ascontiguousarray(frames[i : i + self.batch_size]))
            out.append(torch.sigmoid(self.decoder(self.encoder(self.transform(x)))).numpy())
        return np.concatenate(out) if out else np.zeros((0,) + frames.shape[2:4], np.float32)


PredictFn = Callable[[np.ndarray, list], np.ndarray]


def evaluate_entries(predict: PredictFn, entries: list[ManifestEntry], threshold: float = DEFAULT_THRESHOLD,
                     stride: int = 5, target_resolution=None) -> MetricsReport:
    """Score the middle frame of every unit of every entry.

    ``predict(frames, units)`` returns probability maps for a stack of units;
    the unit list is passed so test doubles can read ground truth.
    """
    report = MetricsReport(threshold=threshold)
    for e in entries:
        try:
            clip, masks = e.load(target_resolution)
        except ClipIOError as exc:
            log.warning("skipping %s: %s", e.clip_path, exc)
            report.skipped.append({"clip_path": e.clip_path, "reason": str(exc)})
            continue
        if clip.num_frames < UNIT_LENGTH:
            log.warning("skipping %s: only %d frames", e.clip_path, clip.num_frames)
            report.skipped.append({"clip_path": e.clip_path, "reason": f"{clip.num_frames} frames"})
            continue
        units = assemble_units(clip, masks, stride, e.inpaint_method, e.compression_tag)
        probs = predict(np.stack([u.frames for u in units]), units)
        for u, p in zip(units, probs):
            tp, fp, fn, tn = confusion(binarize(p, threshold), u.middle_mask)
            report.frames.append(FrameScore(e.clip_path, e.source_id, e.inpaint_method, e.compression_tag,
                                            u.provenance.start_frame + MIDDLE, tp, fp, fn, tn))
    return report


def evaluate_dataset(ckpt, manifest: DatasetManifest, split: str = "test", threshold: float = DEFAULT_THRESHOLD,
                     stride: int = 5, target_resolution=None, predictor: PredictFn | None = None) -> MetricsReport:
    if predictor is None:
        ckpt = load_checkpoint(ckpt) if isinstance(ckpt, (str, Path)) else ckpt
        model = Predictor(ckpt)
        predictor = lambda frames, units: model(frames)  # noqa: E731
    entries = manifest.split(split)
    report = evaluate_entries(predictor, entries, threshold, stride, target_resolution)
    report.tags = {"split": split, "stride": stride}
    return report


def oracle_predictor(frames, units) -> np.ndarray:
    """Perfect predictions read from the units' ground truth."""
    return np.stack([u.middle_mask.astype(np.float32) for u in units])


def empty_predictor(frames, units) -> np.ndarray:
    return np.zeros((len(units),) + units[0].middle_mask.shape, np.float32)


def full_predictor(frames, units) -> np.ndarray:
    return np.ones((len(units),) + units[0].middle_mask.shape, np.float32)


# ---------------------------------------------------------------- robustness

BASELINE = "uncompressed"


@dataclass
class RobustnessTable:
    """``cells[(row, col)] = {"iou", "f1", "status"}``.

    For a codec sweep rows are codecs and columns qualities; for
    recompression rows are the second codec and columns the first.
    """

    kind: str
    rows: list
    cols: list
    cells: dict = field(default_factory=dict)
    baseline: dict | None = None

    def complete(self) -> bool:
        return all((r, c) in self.cells for r in self.rows for c in self.cols)

    def failed(self) -> list:
        return [k for k, v in self.cells.items() if v["status"] != "ok"]

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        corner = "codec\\quality" if self.kind == "sweep" else "second\\first"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([corner] + [str(c) for c in self.cols])
            for r in self.rows:
                row = [r]
                for c in self.cols:
                    cell = self.cells.get((r, c))
                    if cell is None or cell["status"] != "ok":
                        row.append("failed" if cell else "")
                    else:
                        row.append(f"{cell['iou']:.3f}/{cell['f1']:.3f}")
                w.writerow(row)
            if self.baseline is not None:
                w.writerow([BASELINE, f"{self.baseline['iou']:.3f}/{self.baseline['f1']:.3f}"])
        long_path = path.with_name(path.stem + "_long.csv")
        with long_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "iou", "f1", "status"])
            for r in self.rows:
                for c in self.cols:
                    cell = self.cells.get((r, c), {"iou": math.nan, "f1": math.nan, "status": "missing"})
                    w.writerow([r, c, repr(cell["iou"]), repr(cell["f1"]), cell["status"]])
            if self.baseline is not None:
                w.writerow([BASELINE, "", repr(self.baseline["iou"]), repr(self.baseline["f1"]), "ok"])
        return path

    @classmethod
    def read_long_csv(cls, path, kind: str) -> "RobustnessTable":
        rows, cols, cells, baseline = [], [], {}, None
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                if rec["row"] == BASELINE:
                    baseline = {"iou": float(rec["iou"]), "f1": float(rec["f1"])}
                    continue
                col = int(rec["col"]) if kind == "sweep" else rec["col"]
                if rec["row"] not in rows:
                    rows.append(rec["row"])
                if col not in cols:
                    cols.append(col)
                cells[(rec["row"], col)] = {"iou": float(rec["iou"]), "f1": float(rec["f1"]), "status": rec["status"]}
        return cls(kind, rows, cols, cells, baseline)


def _compressed_entries(entries, workdir: Path, chain: list[tuple[str, int | None]]):
    """Entries whose clips went through the codec chain, in order."""
    out = []
    for e in entries:
        src = Path(e.clip_path)
        for n, (codec, q) in enumerate(chain):
            tag = compression_tag(codec, q)
            dst = workdir / f"{src.stem}__{n}_{tag}.mkv"
            src = compress_clip(src, codec, q, dst)
        tag = "+".join(compression_tag(c, q) for c, q in chain)
        out.append(ManifestEntry(str(src), e.mask_path, e.split, e.inpaint_method, tag, e.source_id))
    return out


def _score(report: MetricsReport) -> dict:
    return {"iou": report.mean_iou, "f1": report.mean_f1, "status": "ok"}


def _predict_fn(ckpt, predictor):
    if predictor is not None:
        return predictor
    ckpt = load_checkpoint(ckpt) if isinstance(ckpt, (str, Path)) else ckpt
    model = Predictor(ckpt)
    return lambda frames, units: model(frames)


def robustness_sweep(ckpt, manifest: DatasetManifest, codecs, qualities, workdir, split: str = "test",
                     threshold: float = DEFAULT_THRESHOLD, stride: int = 5, predictor: PredictFn | None = None,
                     keep_files: bool = False) -> RobustnessTable:
    """Mean IoU/F1 after compressing the split's clips with every (codec, quality)."""
    predict = _predict_fn(ckpt, predictor)
    entries = manifest.split(split)
    workdir = Path(workdir)
    table = RobustnessTable("sweep", list(codecs), [int(q) for q in qualities])
    table.baseline = _score(evaluate_entries(predict, entries, threshold, stride))
    for codec in table.rows:
        for q in table.cols:
            cell_dir = workdir / f"{codec}_{q}"
            try:
                compressed = _compressed_entries(entries, cell_dir, [(codec, q)])
                table.cells[(codec, q)] = _score(evaluate_entries(predict, compressed, threshold, stride))
            except (TranscodeError, ClipIOError) as exc:
                log.error("cell %s/%s failed: %s", codec, q, exc)
                table.cells[(codec, q)] = {"iou": math.nan, "f1": math.nan, "status": "failed"}
            finally:
                if not keep_files:
                    shutil.rmtree(cell_dir, ignore_errors=True)
    return table


def recompression_matrix(ckpt, manifest: DatasetManifest, codecs, workdir, quality: int = 23, split: str = "test",
                         threshold: float = DEFAULT_THRESHOLD, stride: int = 5,
                         predictor: PredictFn | None = None, keep_files: bool = False) -> RobustnessTable:
    """Grid over (second codec, first codec): each clip is compressed twice, first then second."""
    predict = _predict_fn(ckpt, predictor)
    entries = manifest.split(split)
    workdir = Path(workdir)
    codecs = list(codecs)
    table = RobustnessTable("recompression", codecs, codecs)
    table.baseline = _score(evaluate_entries(predict, entries, threshold, stride))
    for second in codecs:
        for first in codecs:
            cell_dir = workdir / f"{first}_then_{second}"
            try:
                compressed = _compressed_entries(entries, cell_dir, [(first, quality), (second, quality)])
                table.cells[(second, first)] = _score(evaluate_entries(predict, compressed, threshold, stride))
            except (TranscodeError, ClipIOError) as exc:
                log.error("cell %s->%s failed: %s", first, second, exc)
                table.cells[(second, first)] = {"iou": math.nan, "f1": math.nan, "status": "failed"}
            finally:
                if not keep_files:
                    shutil.rmtree(cell_dir, ignore_errors=True)
    return table
