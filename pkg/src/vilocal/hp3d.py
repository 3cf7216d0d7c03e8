"""Fixed high-pass spatiotemporal filter producing the forensic noise residual.

The residual is a per-channel 3D convolution (time x height x width) of the
frames in [0, 1] with a zero-sum 3x3x3 kernel. Temporal borders replicate
the nearest frame; the one-pixel spatial border of the residual is zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError

ZERO_SUM_TOL = 1e-9


def laplacian_kernel() -> np.ndarray:
    """3x3x3 spatiotemporal Laplacian: centre 1, the 26 neighbours -1/26."""
    k = np.full((3, 3, 3), -1.0 / 26.0)
    k[1, 1, 1] = 1.0
    return k


@dataclass(frozen=True)
class Hp3dKernel:
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.float64)
        if c.shape != (3, 3, 3):
            raise ConfigError(f"HP3D kernel must be 3x3x3, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ConfigError("HP3D kernel has non-finite coefficients")
        if abs(c.sum()) > ZERO_SUM_TOL:
            raise ConfigError(f"HP3D kernel must sum to zero (sum={c.sum():.3e})")
        if c[1, 1, 1] <= 0:
            raise ConfigError("HP3D kernel centre coefficient must be positive")
        object.__setattr__(self, "coefficients", c)

    @classmethod
    def default(cls) -> "Hp3dKernel":
        return cls(laplacian_kernel())

    @classmethod
    def from_file(cls, path) -> "Hp3dKernel":
        """Read 27 whitespace/comma separated values, ordered (t, y, x)."""
        text = Path(path).read_text(encoding="utf-8")
        lines = [ln.split("#", 1)[0] for ln in text.splitlines()]
        tokens = " ".join(lines).replace(",", " ").split()
        try:
            values = [float(t) for t in tokens]
        except ValueError as exc:
            raise ConfigError(f"{path}: unparsable kernel value ({exc})") from exc
        if len(values) != 27:
            raise ConfigError(f"{path}: expected 27 kernel values, found {len(values)}")
        return cls(np.array(values).reshape(3, 3, 3))

    def to_file(self, path) -> None:
        rows = [" ".join(repr(float(v)) for v in plane.ravel()) for plane in self.coefficients]
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def _as_unit_float(frames) -> np.ndarray:
    arr = np.asarray(frames)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("HP3D input contains non-finite values")
    return arr


def hp3d_residual(unit_frames, kernel: Hp3dKernel | None = None) -> np.ndarray:
    """Noise residual of a ``T x H x W x C`` volume (T is 5 for a training unit).

    ``uint8`` input is scaled to [0, 1]; float input is taken as already
    normalised. Returns a float64 array of the same shape.
    """
    kernel = kernel or Hp3dKernel.default()
    x = _as_unit_float(unit_frames)
    if x.ndim != 4:
        raise ValidationError(f"expected T x H x W x C frames, got shape {x.shape}")
    vol = torch.from_numpy(np.ascontiguousarray(x.transpose(3, 0, 1, 2)))[None]
    out = Hp3dFilter(kernel).double()(vol)
    return out[0].numpy().transpose(1, 2, 3, 0)


class Hp3dFilter(nn.Module):
    """Frozen HP3D layer for ``B x C x T x H x W`` tensors.

    Temporal edges repeat the nearest frame. Spatially the filter only runs
    where the full 3x3 window fits and the one-pixel output border is set to
    zero. Because the kernel sums to zero the convolution is evaluated as
    ``sum_d k[d] * (x[p - d] - x[p])``, which makes the response to any
    constant volume exactly zero instead of zero up to rounding.
    """

    def __init__(self, kernel: Hp3dKernel | None = None):
        super().__init__()
        kernel = kernel or Hp3dKernel.default()
        self.register_buffer("weight", torch.tensor(kernel.coefficients, dtype=torch.float64), persistent=False)
        self.offsets = [d for d in np.ndindex(3, 3, 3) if d != (1, 1, 1)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValidationError("HP3D input contains non-finite values")
        b, c, t, h, w = x.shape
        if h < 3 or w < 3:
            return torch.zeros_like(x)
        v = torch.cat([x[:, :, :1], x, x[:, :, -1:]], dim=2)
        centre = v[:, :, 1 : t + 1, 1 : h - 1, 1 : w - 1]
        weight = self.weight.to(x.dtype)
        out = torch.zeros_like(centre)
        for kt, ky, kx in self.offsets:
            # kernel index k pairs with input offset -(k - 1): a true convolution
            shifted = v[:, :, 2 - kt : 2 - kt + t, 2 - ky : h - ky, 2 - kx : w - kx]
            out = out + weight[kt, ky, kx] * (shifted - centre)
        return F.pad(out, (1, 1, 1, 1, 0, 0))
