"""Clip and mask storage plus transcoding through an external ffmpeg binary.

The binary is looked up in ``$VILOCAL_FFMPEG``, then ``ffmpeg`` on ``PATH``,
then the copy bundled with the ``imageio-ffmpeg`` package if installed.
All encodes are single threaded with bit-exact muxing so that identical
inputs yield identical files.
"""

from __future__ import annotations

import json
import math
import os
import re
import shutil
import subprocess
from pathlib import Path

import cv2
import numpy as np

from ..errors import ClipIOError, ConfigError, TranscodeError, TranscoderMissingError, ValidationError
from .types import MaskSequence, VideoClip, check_resolution

FFMPEG_ENV = "VILOCAL_FFMPEG"
CODECS = ("x264", "x265", "ffv1", "mpeg4")
FRAME_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

_STREAM_RE = re.compile(r"Stream #\S+.*?Video: .*?, (\d{2,5})x(\d{2,5})")
_FPS_RE = re.compile(r"([\d.]+) (?:fps|tbr)")


def find_transcoder() -> str:
    env = os.environ.get(FFMPEG_ENV)
    if env:
        if shutil.which(env) or Path(env).is_file():
            return env
        raise TranscoderMissingError(f"${FFMPEG_ENV}={env!r} is not an executable")
    found = shutil.which("ffmpeg")
    if found:
        return found
    try:
        import imageio_ffmpeg
    except ImportError:
        imageio_ffmpeg = None
    if imageio_ffmpeg is not None:
        try:
            return imageio_ffmpeg.get_ffmpeg_exe()
        except RuntimeError:
            pass
    raise TranscoderMissingError(f"no ffmpeg found (set ${FFMPEG_ENV} or put ffmpeg on PATH)")


def transcoder_available() -> bool:
    try:
        find_transcoder()
    except TranscoderMissingError:
        return False
    return True


def _run(args, stdin=None, what="ffmpeg"):
    try:
        proc = subprocess.run(args, input=stdin, capture_output=True)
    except OSError as exc:
        raise TranscoderMissingError(f"cannot execute {args[0]}: {exc}") from exc
    if proc.returncode != 0:
        log = proc.stderr.decode("utf-8", "replace")
        raise TranscodeError(f"{what} exited with status {proc.returncode}", log=log)
    return proc


def codec_args(codec: str, quality: int | None) -> tuple[list[str], str, dict]:
    """ffmpeg output arguments, provenance tag and mapping record for a codec."""
    if codec == "x264":
        q = int(quality)
        return ["-c:v", "libx264", "-preset", "medium", "-crf", str(q), "-pix_fmt", "yuv420p",
                "-x264-params", "threads=1:log-level=error"], f"x264-crf{q}", {"control": "crf", "value": q}
    if codec == "x265":
        q = int(quality)
        return ["-c:v", "libx265", "-preset", "medium", "-crf", str(q), "-pix_fmt", "yuv420p",
                "-x265-params", "pools=1:frame-threads=1:log-level=error"], f"x265-crf{q}", {"control": "crf", "value": q}
    if codec == "ffv1":
        return ["-c:v", "ffv1", "-level", "3", "-pix_fmt", "bgr0"], "ffv1", {"control": "lossless", "value": None}
    if codec == "mpeg4":
        qscale = mpeg4_qscale(int(quality))
        return ["-c:v", "mpeg4", "-q:v", str(qscale), "-pix_fmt", "yuv420p"], f"mpeg4-q{qscale}", {
            "control": "qscale", "value": qscale, "from_crf": int(quality)}
    raise ConfigError(f"unknown codec {codec!r}; expected one of {CODECS}")


def mpeg4_qscale(crf: int) -> int:
    """CRF-like quality -> MPEG-4 quantiser scale: round-half-up(crf / 2), clipped to [2, 31]."""
    return int(min(31, max(2, math.floor(crf / 2 + 0.5))))


def compression_tag(codec: str, quality: int | None) -> str:
    return codec_args(codec, quality)[1]


def _common_out_args(meta: dict) -> list[str]:
    return ["-threads", "1", "-map_metadata", "-1", "-fflags", "+bitexact", "-flags:v", "+bitexact",
            "-metadata", "comment=" + json.dumps(meta, sort_keys=True), "-an"]


def write_clip(clip: VideoClip, path, codec: str = "ffv1", quality: int | None = None) -> Path:
    """Encode ``clip`` to ``path`` (a matroska file); lossless by default."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t, h, w, _ = clip.frames.shape
    args, tag, mapping = codec_args(codec, quality)
    meta = {"codec": codec, "quality": quality, "tag": tag, "mapping": mapping}
    cmd = [find_transcoder(), "-y", "-hide_banner", "-loglevel", "error",
           "-f", "rawvideo", "-pix_fmt", "rgb24", "-s", f"{w}x{h}", "-r", _fps_str(clip.fps), "-i", "-",
           *args, *_common_out_args(meta), str(path)]
    _run(cmd, stdin=np.ascontiguousarray(clip.frames).tobytes(), what=f"ffmpeg encode of {path}")
    return path


def _fps_str(fps: float) -> str:
    return str(int(fps)) if float(fps).is_integer() else repr(float(fps))


def compress_clip(src, codec: str, quality: int | None, dst=None) -> Path:
    """Re-encode ``src`` with ``codec``; returns the output path.

    x264/x265 use ``-crf quality``; ffv1 ignores quality; mpeg4 maps it to a
    quantiser scale. The mapping is stored in the container comment and in a
    ``.json`` sidecar.
    """
    src = Path(src)
    args, tag, mapping = codec_args(codec, quality)
    dst = Path(dst) if dst is not None else src.with_name(f"{src.stem}__{tag}.mkv")
    dst.parent.mkdir(parents=True, exist_ok=True)
    meta = {"codec": codec, "quality": quality, "tag": tag, "mapping": mapping, "source": src.name}
    cmd = [find_transcoder(), "-y", "-hide_banner", "-loglevel", "error", "-i", str(src),
           *args, *_common_out_args(meta), str(dst)]
    _run(cmd, what=f"ffmpeg {codec} transcode of {src}")
    dst.with_suffix(dst.suffix + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")
    return dst


def probe(path) -> tuple[int, int, float]:
    """(height, width, fps) of the first video stream."""
    proc = subprocess.run([find_transcoder(), "-hide_banner", "-i", str(path)], capture_output=True)
    text = proc.stderr.decode("utf-8", "replace")
    for line in text.splitlines():
        m = _STREAM_RE.search(line)
        if m:
            fps = _FPS_RE.search(line)
            return int(m.group(2)), int(m.group(1)), float(fps.group(1)) if fps else 25.0
    raise ClipIOError(f"{path}: not a decodable video")


def read_video(path) -> tuple[np.ndarray, float]:
    path = Path(path)
    if not path.is_file():
        raise ClipIOError(f"{path}: no such file")
    h, w, fps = probe(path)
    cmd = [find_transcoder(), "-hide_banner", "-loglevel", "error", "-i", str(path),
           "-f", "rawvideo", "-pix_fmt", "rgb24", "-threads", "1", "-"]
    try:
        proc = _run(cmd, what=f"ffmpeg decode of {path}")
    except TranscodeError as exc:
        raise ClipIOError(f"{path}: decode failed: {exc.log.strip()[-300:]}") from exc
    raw = np.frombuffer(proc.stdout, np.uint8)
    if raw.size == 0 or raw.size % (h * w * 3):
        raise ClipIOError(f"{path}: decoded {raw.size} bytes, not a whole number of {w}x{h} frames")
    return raw.reshape(-1, h, w, 3).copy(), fps


def _frame_files(directory: Path) -> list[Path]:
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_EXTS)
    if not files:
        raise ClipIOError(f"{directory}: no frame images")
    return files


def read_frame_dir(directory) -> np.ndarray:
    frames = []
    for p in _frame_files(Path(directory)):
        img = cv2.imread(str(p), cv2.IMREAD_COLOR)
        if img is None:
            raise ClipIOError(f"{p}: unreadable image")
        frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
    return np.stack(frames)


def resize_frames(frames: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if frames.shape[1:3] == (h, w):
        return frames
    return np.stack([cv2.resize(f, (w, h), interpolation=cv2.INTER_LINEAR) for f in frames])


def resize_masks(masks: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if masks.shape[1:3] == (h, w):
        return (masks > 0).astype(np.uint8)
    out = [cv2.resize(m.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST) for m in masks]
    return (np.stack(out) > 0).astype(np.uint8)


def load_clip(path, target_resolution=None, source_id: str | None = None) -> VideoClip:
    """Decode a video file or a directory of frame images, optionally bilinear-resized."""
    path = Path(path)
    if target_resolution is not None:
        check_resolution(*target_resolution)
    if path.is_dir():
        frames, fps = read_frame_dir(path), 25.0
    elif path.exists():
        frames, fps = read_video(path)
    else:
        raise ClipIOError(f"{path}: no such file or directory")
    if target_resolution is not None:
        frames = resize_frames(frames, tuple(target_resolution))
    else:
        check_resolution(frames.shape[1], frames.shape[2])
    return VideoClip(frames, fps, source_id if source_id is not None else path.stem)


def save_masks(masks: MaskSequence, directory) -> Path:
    """One ``{0,255}`` single-channel PNG per frame."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks.masks):
        if not cv2.imwrite(str(directory / f"{i:05d}.png"), (m > 0).astype(np.uint8) * 255):
            raise ClipIOError(f"{directory}: failed writing mask {i}")
    return directory


def load_masks(directory, target_resolution=None) -> MaskSequence:
    directory = Path(directory)
    if not directory.is_dir():
        raise ClipIOError(f"{directory}: mask directory missing")
    out = []
    for p in _frame_files(directory):
        img = cv2.imread(str(p), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise ClipIOError(f"{p}: unreadable mask")
        out.append(img)
    masks = (np.stack(out) > 127).astype(np.uint8)
    if target_resolution is not None:
        check_resolution(*target_resolution)
        masks = resize_masks(masks, tuple(target_resolution))
    return MaskSequence(masks)


def save_frame_dir(clip: VideoClip, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(clip.frames):
        cv2.imwrite(str(directory / f"{i:05d}.png"), cv2.cvtColor(f, cv2.COLOR_RGB2BGR))
    return directory


def check_pair(clip: VideoClip, masks: MaskSequence, path="") -> None:
    if clip.frames.shape[:3] != masks.masks.shape:
        raise ValidationError(f"{path}: clip {clip.frames.shape[:3]} and masks {masks.masks.shape} differ")
