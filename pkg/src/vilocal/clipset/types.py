from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ValidationError

UNIT_LENGTH = 5
MIDDLE = UNIT_LENGTH // 2
NO_COMPRESSION = "none"


def check_resolution(height: int, width: int) -> None:
    if height <= 0 or width <= 0 or height % 4 or width % 4:
        raise ConfigError(f"resolution {height}x{width} must be positive and divisible by 4")


@dataclass
class VideoClip:
    frames: np.ndarray  # T x H x W x 3, uint8
    fps: float = 25.0
    source_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValidationError(f"clip frames must be T x H x W x 3, got {f.shape}")
        if f.dtype != np.uint8:
            raise ValidationError(f"clip frames must be uint8, got {f.dtype}")
        check_resolution(f.shape[1], f.shape[2])
        self.frames = f

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class MaskSequence:
    masks: np.ndarray  # T x H x W, values in {0, 1}

    def __post_init__(self):
        m = np.asarray(self.masks)
        if m.ndim != 3:
            raise ValidationError(f"masks must be T x H x W, got {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValidationError("mask values must be 0 or 1")
        self.masks = m.astype(np.uint8)

    def check_pairs(self, clip: VideoClip) -> None:
        if self.masks.shape != clip.frames.shape[:3]:
            raise ValidationError(f"mask shape {self.masks.shape} does not match clip {clip.frames.shape[:3]}")


@dataclass(frozen=True)
class Provenance:
    source_id: str
    start_frame: int
    inpaint_method: str = "none"
    compression_tag: str = NO_COMPRESSION


@dataclass
class TrainingUnit:
    frames: np.ndarray  # 5 x H x W x 3 uint8
    middle_mask: np.ndarray  # H x W uint8
    provenance: Provenance = field(default_factory=lambda: Provenance("", 0))
