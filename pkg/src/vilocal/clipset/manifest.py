"""Dataset manifests (JSON lines) and synthetic dataset generation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ValidationError
from .inpaint import InpaintMethod, apply_toy_inpainting
from .media import compress_clip, load_clip, load_masks, save_masks, write_clip
from .synthetic import SyntheticConfig, generate_synthetic_clip
from .types import NO_COMPRESSION, MaskSequence, VideoClip

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.jsonl"


@dataclass
class ManifestEntry:
    clip_path: str
    mask_path: str
    split: str
    inpaint_method: str
    compression_tag: str = NO_COMPRESSION
    source_id: str = ""

    def resolve(self, root: Path) -> "ManifestEntry":
        def absolute(p):
            q = Path(p)
            return str(q if q.is_absolute() else (root / q))

        return ManifestEntry(absolute(self.clip_path), absolute(self.mask_path), self.split,
                             self.inpaint_method, self.compression_tag, self.source_id)

    def load(self, target_resolution=None) -> tuple[VideoClip, MaskSequence]:
        clip = load_clip(self.clip_path, target_resolution, source_id=self.source_id or None)
        masks = load_masks(self.mask_path, target_resolution)
        if masks.masks.shape != clip.frames.shape[:3]:
            raise ValidationError(
                f"{self.clip_path}: clip shape {clip.frames.shape[:3]} != mask shape {masks.masks.shape}")
        return clip, masks


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e.resolve(self.root) for e in self.entries if e.split == name]

    def validate(self, check_paths: bool = True) -> "DatasetManifest":
        owner = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValidationError(f"unknown split {e.split!r} for {e.clip_path}")
            sid = e.source_id or e.clip_path
            if owner.setdefault(sid, e.split) != e.split:
                raise ValidationError(f"source {sid!r} appears in splits {owner[sid]!r} and {e.split!r}")
            if check_paths:
                r = e.resolve(self.root)
                for p in (r.clip_path, r.mask_path):
                    if not Path(p).exists():
                        raise ValidationError(f"manifest path does not exist: {p}")
        return self

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.is_file():
            raise ConfigError(f"manifest not found: {path}")
        entries = []
        with path.open(encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    entries.append(ManifestEntry(**json.loads(line)))
                except (TypeError, json.JSONDecodeError) as exc:
                    raise ValidationError(f"{path}:{n}: bad manifest record ({exc})") from exc
        return cls(entries, path.parent.resolve())


@dataclass
class DatasetSpec:
    """How synthetic sources are split, inpainted and degraded."""

    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    split_fractions: dict = field(default_factory=lambda: {"train": 0.8, "val": 0.0, "test": 0.2})
    train_methods: list = field(default_factory=lambda: ["DIFFUSE", "TEMPORAL_COPY"])
    val_methods: list = field(default_factory=lambda: ["DIFFUSE", "TEMPORAL_COPY", "PATCH_COPY"])
    test_methods: list = field(default_factory=lambda: ["DIFFUSE", "TEMPORAL_COPY", "PATCH_COPY"])
    compress_every: int = 4  # every 4th training entry gets x264, quality 23
    compress_codec: str = "x264"
    compress_quality: int = 23

    def methods_for(self, split: str) -> list[str]:
        return [InpaintMethod.parse(m).value for m in getattr(self, f"{split}_methods")]

    def assign_splits(self) -> list[str]:
        """Split of each source index: contiguous blocks in train/val/test order."""
        n = self.synthetic.n_clips
        fr = self.split_fractions
        if set(fr) - set(SPLITS) or any(v < 0 for v in fr.values()) or not sum(fr.values()) > 0:
            raise ConfigError(f"bad split fractions {fr}")
        total = sum(fr.values())
        counts = {s: int(round(n * fr.get(s, 0.0) / total)) for s in SPLITS}
        counts["train"] = n - counts["val"] - counts["test"]
        if counts["train"] < 0:
            raise ConfigError(f"split fractions {fr} leave no room for training clips")
        return ["train"] * counts["train"] + ["val"] * counts["val"] + ["test"] * counts["test"]


def generate_dataset(spec: DatasetSpec, out_dir) -> DatasetManifest:
    """Write clips, masks and ``manifest.jsonl`` under ``out_dir``.

    Training entries whose running index is ``compress_every - 1`` modulo
    ``compress_every`` are stored x264-compressed instead of lossless.
    """
    spec.synthetic.validate()
    out_dir = Path(out_dir)
    clips_dir, masks_dir = out_dir / "clips", out_dir / "masks"
    entries = []
    train_index = 0
    for index, split in enumerate(spec.assign_splits()):
        clip, masks = generate_synthetic_clip(spec.synthetic, index)
        sid = clip.source_id
        mask_dir = save_masks(masks, masks_dir / sid)
        for method in spec.methods_for(split):
            forged = apply_toy_inpainting(clip, masks, method)
            stem = f"{sid}_{method.lower()}"
            path = write_clip(forged, clips_dir / f"{stem}.mkv")
            tag = NO_COMPRESSION
            if split == "train" and spec.compress_every and train_index % spec.compress_every == spec.compress_every - 1:
                lossless = path
                path = compress_clip(lossless, spec.compress_codec, spec.compress_quality,
                                     clips_dir / f"{stem}__{spec.compress_codec}.mkv")
                tag = json.loads(path.with_suffix(".mkv.json").read_text())["tag"]
                lossless.unlink()
            if split == "train":
                train_index += 1
            entries.append(ManifestEntry(
                str(path.relative_to(out_dir)), str(mask_dir.relative_to(out_dir)), split, method, tag, sid))
            log.info("wrote %s (%s, %s, %s)", path.name, split, method, tag)
    manifest = DatasetManifest(entries, out_dir.resolve())
    manifest.write(out_dir / MANIFEST_NAME)
    return manifest.validate()


def dataset_checksum(out_dir) -> str:
    """sha256 over the manifest and every file it references, in manifest order."""
    manifest = DatasetManifest.read(out_dir)
    h = hashlib.sha256()
    h.update((manifest.root / MANIFEST_NAME).read_bytes())
    seen = set()
    for e in manifest.entries:
        r = e.resolve(manifest.root)
        for p in (Path(r.clip_path), Path(r.mask_path)):
            if p in seen:
                continue
            seen.add(p)
            files = sorted(p.iterdir()) if p.is_dir() else [p]
            for f in files:
                h.update(f.relative_to(manifest.root).as_posix().encode())
                h.update(f.read_bytes())
    return h.hexdigest()


def units_for_entries(entries, stride: int, target_resolution=None):
    """Load every entry and window it into training units, in manifest order."""
    from .units import assemble_units

    units = []
    for e in entries:
        clip, masks = e.load(target_resolution)
        units.extend(assemble_units(clip, masks, stride, e.inpaint_method, e.compression_tag))
    return units


def mask_area_ratio(entries, target_resolution=None) -> float:
    ratios = [e.load(target_resolution)[1].masks.mean() for e in entries]
    return float(np.mean(ratios)) if ratios else 0.0
