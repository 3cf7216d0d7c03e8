from __future__ import annotations

import logging
import warnings

from .types import MIDDLE, NO_COMPRESSION, UNIT_LENGTH, MaskSequence, Provenance, TrainingUnit, VideoClip

log = logging.getLogger(__name__)


def assemble_units(
    clip: VideoClip,
    masks: MaskSequence,
    stride: int = 1,
    inpaint_method: str = "none",
    compression_tag: str = NO_COMPRESSION,
) -> list[TrainingUnit]:
    """Windows ``[i, i+5)`` for ``i = 0, stride, ...`` paired with the mask of frame ``i+2``."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    masks.check_pairs(clip)
    t = clip.num_frames
    if t < UNIT_LENGTH:
        msg = f"clip {clip.source_id!r} has {t} frames, fewer than {UNIT_LENGTH}; no units"
        log.warning(msg)
        warnings.warn(msg, stacklevel=2)
        return []
    return [
        TrainingUnit(
            frames=clip.frames[i : i + UNIT_LENGTH],
            middle_mask=masks.masks[i + MIDDLE],
            provenance=Provenance(clip.source_id, i, inpaint_method, compression_tag),
        )
        for i in range(0, t - UNIT_LENGTH + 1, stride)
    ]
