"""Command line entry point: ``vilocal <subcommand> ...``.

Exit codes
    0  success
    1  runtime failure (I/O, transcode, divergence)
    2  usage error (bad or unknown flags)
    3  environment error (no transcoder found)
    4  configuration or validation error
    5  integrity error (checkpoint corrupt or version mismatch)

On failure a single JSON line ``{"error": kind, "exit_code": n, "message": ...}``
is written to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
import warnings
from pathlib import Path

from . import __version__
from .clipset.manifest import DatasetManifest, dataset_checksum, generate_dataset
from .clipset.media import CODECS, find_transcoder
from .config import RunConfig, load_config, save_config
from .errors import ConfigError, VilocalError

log = logging.getLogger("vilocal")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
REPORT_DIR = "report"
FILES_NAME = "files.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ run dirs

class RunDir:
    """Output directory of one invocation: config copy, event log, file manifest."""

    def __init__(self, path, force: bool = False):
        self.path = Path(path)
        if self.path.exists() and any(self.path.iterdir()):
            if not force:
                raise ConfigError(f"output directory {self.path} is not empty (use --force to overwrite)")
            shutil.rmtree(self.path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.log_path = self.path / "log.jsonl"

    def event(self, **record):
        record.setdefault("kind", "event")
        with self.log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def save_config(self, cfg: RunConfig):
        save_config(cfg, self.path / "config.toml")

    def finish(self, command: str) -> Path:
        return write_file_manifest(self.path, command)


def write_file_manifest(root: Path, command: str) -> Path:
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != FILES_NAME:
            files[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    out = root / FILES_NAME
    out.write_text(json.dumps({"command": command, "version": __version__, "files": files},
                              indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


# ------------------------------------------------------------------ commands

def _config(args) -> RunConfig:
    return load_config(args.config, args.overrides)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.data.synthetic.seed = args.seed
    cfg.validate()
    run = RunDir(args.out, args.force)
    run.save_config(cfg)
    t0 = time.perf_counter()
    manifest = generate_dataset(cfg.data, run.path)
    checksum = dataset_checksum(run.path)
    run.event(stage="gen-data", clips=len(manifest.entries), checksum=checksum,
              seconds=round(time.perf_counter() - t0, 2))
    (run.path / "checksum.txt").write_text(checksum + "\n", encoding="utf-8")
    run.finish("gen-data")
    print(json.dumps({"out": str(run.path), "clips": len(manifest.entries), "checksum": checksum}))
    return EXIT_OK


def _manifest(args, cfg: RunConfig) -> DatasetManifest:
    path = args.manifest or cfg.train.manifest
    if not path:
        raise ConfigError("no dataset given (use --manifest or train.manifest)")
    return DatasetManifest.read(path).validate()


def cmd_train(args) -> int:
    from .trainer import train_stage1, train_stage2

    cfg = _config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.stage is not None:
        cfg.train.stage = args.stage
    if args.checkpoint:
        cfg.train.stage1_checkpoint = str(args.checkpoint)
    if args.manifest:
        cfg.train.manifest = str(Path(args.manifest).resolve())
    cfg.validate()
    manifest = _manifest(args, cfg)
    if cfg.train.stage == 2 and cfg.train.use_contrastive and not cfg.train.stage1_checkpoint:
        raise ConfigError("stage 2 needs a stage-1 checkpoint (--checkpoint) when the contrastive stage is enabled")
    run = RunDir(args.out, args.force)
    run.save_config(cfg)
    t0 = time.perf_counter()
    if cfg.train.stage == 1:
        result = train_stage1(cfg, manifest, run.path)
    else:
        result = train_stage2(cfg, cfg.train.stage1_checkpoint or None, manifest, run.path)
    losses = result.losses
    run.event(stage=f"train-{cfg.train.stage}", steps=result.checkpoint.step,
              first_loss=losses[0] if losses else None, last_loss=losses[-1] if losses else None,
              encoder_checksum=result.checkpoint.encoder_checksum, seconds=round(time.perf_counter() - t0, 2))
    _render(run.path)
    run.finish("train")
    print(json.dumps({"out": str(run.path), "stage": cfg.train.stage, "steps": result.checkpoint.step,
                      "last_loss": losses[-1] if losses else None}))
    return EXIT_OK


def _eval_setup(args):
    from .checkpoint import load_checkpoint

    cfg = _config(args)
    if args.threshold is not None:
        cfg.eval.threshold = args.threshold
    if args.split:
        cfg.eval.split = args.split
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.decoder is None:
        raise ConfigError(f"{args.checkpoint} is a stage-{ckpt.stage} checkpoint without a decoder")
    manifest = _manifest(args, cfg)
    return cfg, ckpt, manifest


def cmd_eval(args) -> int:
    from .evaluator import evaluate_dataset

    cfg, ckpt, manifest = _eval_setup(args)
    run = RunDir(args.out, args.force)
    run.save_config(cfg)
    report = evaluate_dataset(ckpt, manifest, cfg.eval.split, cfg.eval.threshold, cfg.eval.stride,
                              cfg.train.target_resolution)
    report.write_csv(run.path)
    summary = report.summary()
    run.event(stage="eval", **{k: v for k, v in summary.items() if isinstance(v, (int, float, str))})
    _render(run.path)
    run.finish("eval")
    print(json.dumps({"out": str(run.path), "mean_iou": summary["mean_iou"], "mean_f1": summary["mean_f1"]}))
    return EXIT_OK


def cmd_robustness(args) -> int:
    from .evaluator import recompression_matrix, robustness_sweep

    find_transcoder()
    cfg, ckpt, manifest = _eval_setup(args)
    if args.codecs:
        cfg.eval.codecs = args.codecs
    if args.qualities:
        cfg.eval.qualities = args.qualities
    bad = [c for c in cfg.eval.codecs if c not in CODECS]
    if bad:
        raise ConfigError(f"unknown codecs {bad}; choose from {list(CODECS)}")
    run = RunDir(args.out, args.force)
    run.save_config(cfg)
    work = run.path / "work"
    ev = cfg.eval
    out = {"out": str(run.path)}
    if args.mode in ("sweep", "both"):
        table = robustness_sweep(ckpt, manifest, ev.codecs, ev.qualities, work, ev.split, ev.threshold, ev.stride)
        table.write_csv(run.path / "sweep.csv")
        out["sweep_failed"] = len(table.failed())
        run.event(stage="sweep", cells=len(table.cells), failed=len(table.failed()))
    if args.mode in ("recompression", "both"):
        table = recompression_matrix(ckpt, manifest, ev.codecs, work, ev.recompression_quality, ev.split,
                                     ev.threshold, ev.stride)
        table.write_csv(run.path / "recompression.csv")
        out["recompression_failed"] = len(table.failed())
        run.event(stage="recompression", cells=len(table.cells), failed=len(table.failed()))
    shutil.rmtree(work, ignore_errors=True)
    _render(run.path)
    run.finish("robustness")
    print(json.dumps(out))
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise ConfigError(f"run directory not found: {run}")
    produced = _render(run)
    print(json.dumps({"report": str(run / REPORT_DIR), "files": [p.name for p in produced]}))
    return EXIT_OK


def _render(run: Path) -> list[Path]:
    """Re-derive tables and figures from a run directory into ``run/report``.

    Reads only the files a run leaves behind and writes only under the
    report subdirectory, which is recreated from scratch each time.
    """
    from . import plotting
    from .evaluator import MetricsReport, RobustnessTable

    out = run / REPORT_DIR
    shutil.rmtree(out, ignore_errors=True)
    out.mkdir()
    produced = []
    log_path = run / "log.jsonl"
    if log_path.is_file():
        records = plotting.read_log(log_path)
        if any(r.get("kind") == "step" for r in records):
            produced.append(plotting.plot_loss_curves(records, out / "loss_curves.svg"))
            produced.append(_loss_csv(records, out / "losses.csv"))
    frames_csv = run / "frames.csv"
    if frames_csv.is_file():
        report = MetricsReport.read_run(run)
        produced.extend(report.write_csv(out))
        produced.append(plotting.plot_video_scores(report.per_video(), out / "video_scores.svg"))
    for name, kind, plot in (("sweep", "sweep", plotting.plot_sweep),
                             ("recompression", "recompression", plotting.plot_recompression)):
        long_csv = run / f"{name}_long.csv"
        if long_csv.is_file():
            table = RobustnessTable.read_long_csv(long_csv, kind)
            produced.append(table.write_csv(out / f"{name}.csv"))
            produced.append(plot(table, out / f"{name}.svg"))
    return produced


def _loss_csv(records, path: Path) -> Path:
    import csv

    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "step", "epoch", "loss"])
        for r in records:
            if r.get("kind") == "step":
                w.writerow([r["stage"], r["step"], r.get("epoch", ""), repr(r["loss"])])
    return path


# ------------------------------------------------------------------ parser

def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vilocal", description="Video inpainting localization pipeline.")
    parser.add_argument("--version", action="version", version=f"vilocal {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.lr_stage1=3e-4 (repeatable)")
        p.add_argument("--out", required=out_required, help="run directory to create")
        p.add_argument("--force", action="store_true", help="replace a non-empty run directory")

    p = sub.add_parser("gen-data", help="write a synthetic inpainting dataset")
    common(p)
    p.add_argument("--seed", type=int, help="generator seed (data.synthetic.seed)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run stage 1 (contrastive) or stage 2 (focal)")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--manifest", help="dataset directory or manifest.jsonl")
    p.add_argument("--checkpoint", help="stage-1 checkpoint for stage 2")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "score a stage-2 checkpoint on a split"),
                             ("robustness", cmd_robustness, "codec sweep and recompression grid")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--checkpoint", required=True, help="stage-2 checkpoint")
        p.add_argument("--manifest", help="dataset directory or manifest.jsonl")
        p.add_argument("--threshold", type=float, help="binarization threshold (default 0.5)")
        p.add_argument("--split", choices=("train", "val", "test"))
        p.set_defaults(func=func)
        if name == "robustness":
            p.add_argument("--codecs", type=_csv_list(str), help=f"comma list from {','.join(CODECS)}")
            p.add_argument("--qualities", type=_csv_list(int), help="comma list, e.g. 13,18,23,28")
            p.add_argument("--mode", choices=("sweep", "recompression", "both"), default="both")

    p = sub.add_parser("report", help="re-render tables and figures of a run into <run>/report")
    p.add_argument("run", help="run directory")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, code: int, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return args.func(args)
    except VilocalError as exc:
        return _fail(exc.kind, exc.exit_code, str(exc))
    except OSError as exc:
        return _fail("io", EXIT_RUNTIME, str(exc))


if __name__ == "__main__":
    sys.exit(main())
