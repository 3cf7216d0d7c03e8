"""Exception hierarchy shared by every pipeline stage.

Each class carries an ``exit_code`` so the command line front end can map
failures to stable process exit codes without a lookup table.
"""


class VilocalError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(VilocalError, ValueError):
    exit_code = 4
    kind = "config"


class ValidationError(VilocalError, ValueError):
    exit_code = 4
    kind = "validation"


class ClipIOError(VilocalError, OSError):
    exit_code = 1
    kind = "io"


class TranscoderMissingError(VilocalError, EnvironmentError):
    exit_code = 3
    kind = "environment"


class TranscodeError(VilocalError, RuntimeError):
    exit_code = 1
    kind = "transcode"

    def __init__(self, message, log=""):
        super().__init__(message)
        self.log = log


class IntegrityError(VilocalError):
    exit_code = 5
    kind = "integrity"


class TrainingDivergedError(VilocalError, FloatingPointError):
    exit_code = 1
    kind = "diverged"


class InpaintingFallbackWarning(UserWarning):
    """A toy inpainting method could not run as requested and fell back to DIFFUSE."""
