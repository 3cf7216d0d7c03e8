"""Video material: synthetic generation, toy inpainting, storage, codecs, windowing."""

from .inpaint import InpaintMethod, apply_toy_inpainting, diffuse_fill
from .manifest import (
    DatasetManifest,
    DatasetSpec,
    ManifestEntry,
    dataset_checksum,
    generate_dataset,
    units_for_entries,
)
from .media import (
    CODECS,
    compress_clip,
    compression_tag,
    find_transcoder,
    load_clip,
    load_masks,
    mpeg4_qscale,
    save_masks,
    transcoder_available,
    write_clip,
)
from .synthetic import SyntheticConfig, generate_synthetic_clip
from .types import MIDDLE, UNIT_LENGTH, MaskSequence, Provenance, TrainingUnit, VideoClip
from .units import assemble_units
