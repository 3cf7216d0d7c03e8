"""Toy inpainting methods that erase the masked regions of a clip.

Three analogues with deliberately different residual signatures:

* ``DIFFUSE`` - harmonic (converged neighbour-averaging) fill from the region
  boundary, which is smooth and noise free.
* ``TEMPORAL_COPY`` - co-located pixels from the nearest frame where the pixel
  is unmasked.
* ``PATCH_COPY`` - a same-size patch from elsewhere in the same frame.
"""

from __future__ import annotations

import enum
import logging
import warnings

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import splu

from ..errors import InpaintingFallbackWarning, ValidationError
from .types import MaskSequence, VideoClip

log = logging.getLogger(__name__)


class InpaintMethod(str, enum.Enum):
    DIFFUSE = "DIFFUSE"
    TEMPORAL_COPY = "TEMPORAL_COPY"
    PATCH_COPY = "PATCH_COPY"

    @classmethod
    def parse(cls, value) -> "InpaintMethod":
        try:
            return cls(str(getattr(value, "value", value)).upper())
        except ValueError:
            raise ValidationError(f"unknown inpainting method {value!r}") from None


def _fallback(message):
    log.warning(message)
    warnings.warn(message, InpaintingFallbackWarning, stacklevel=3)


def diffuse_fill(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill ``mask`` pixels of an ``H x W x C`` frame with the discrete harmonic
    interpolant of the surrounding pixels.

    Each masked pixel equals the mean of its in-frame 4-neighbours, which is
    the fixed point of iterative neighbour averaging; it is solved directly.
    A frame with no unmasked pixel is filled with mid grey.
    """
    mask = mask.astype(bool)
    out = frame.astype(np.float64)
    if not mask.any():
        return frame.copy()
    if mask.all():
        out[:] = 127.5
        return np.clip(np.rint(out), 0, 255).astype(frame.dtype)

    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    n = len(ys)
    index = -np.ones((h, w), np.int64)
    index[ys, xs] = np.arange(n)
    rows, cols, vals = [], [], []
    degree = np.zeros(n)
    rhs = np.zeros((n, out.shape[2]))
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        degree += inside
        k = np.flatnonzero(inside)
        nb = index[ny[k], nx[k]]
        unknown = nb >= 0
        rows.append(k[unknown])
        cols.append(nb[unknown])
        vals.append(-np.ones(unknown.sum()))
        known = k[~unknown]
        np.add.at(rhs, known, out[ny[known], nx[known]])
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(degree)
    A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    # components cut off from every known pixel would be singular; only possible when mask.all()
    sol = splu(A).solve(rhs)
    out[ys, xs] = sol
    return np.clip(np.rint(out), 0, 255).astype(frame.dtype)


def _temporal_copy(frames, masks):
    out = frames.copy()
    t = len(frames)
    unresolved = np.zeros_like(masks, dtype=bool)
    for i in range(t):
        todo = masks[i].astype(bool)
        if not todo.any():
            continue
        # nearest clean frame first, earlier frame wins ties
        for d in range(1, t):
            for j in (i - d, i + d):
                if 0 <= j < t and todo.any():
                    take = todo & (masks[j] == 0)
                    out[i][take] = frames[j][take]
                    todo &= ~take
            if not todo.any():
                break
        unresolved[i] = todo
    if unresolved.any():
        _fallback(f"TEMPORAL_COPY: {int(unresolved.sum())} pixels have no clean frame; falling back to DIFFUSE")
        for i in np.flatnonzero(unresolved.any(axis=(1, 2))):
            out[i] = diffuse_fill(out[i], unresolved[i])
    return out


def _source_offset(region, mask):
    """Shift moving ``region`` onto in-frame pixels that are all unmasked, or None.

    Shifts by one bounding-box width/height are tried first, then every
    other placement in order of distance.
    """
    h, w = mask.shape
    ys, xs = np.nonzero(region)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    bh, bw = y1 - y0, x1 - x0

    def fits(dy, dx):
        if y0 + dy < 0 or y1 + dy > h or x0 + dx < 0 or x1 + dx > w:
            return False
        return not mask[ys + dy, xs + dx].any()

    for dy, dx in ((0, bw), (0, -bw), (bh, 0), (-bh, 0), (bh, bw), (-bh, -bw), (bh, -bw), (-bh, bw)):
        if fits(dy, dx):
            return dy, dx
    dys, dxs = np.mgrid[-y0 : h - y1 + 1, -x0 : w - x1 + 1]
    order = np.argsort((dys**2 + dxs**2).ravel(), kind="stable")
    for k in order:
        dy, dx = int(dys.flat[k]), int(dxs.flat[k])
        if (dy or dx) and fits(dy, dx):
            return dy, dx
    return None


def _patch_copy(frames, masks):
    out = frames.copy()
    for i in range(len(frames)):
        m = masks[i].astype(bool)
        if not m.any():
            continue
        labels, n = ndimage.label(m)
        for lab in range(1, n + 1):
            region = labels == lab
            off = _source_offset(region, m)
            if off is None:
                _fallback(f"PATCH_COPY: no clean source patch in frame {i}; falling back to DIFFUSE")
                out[i] = diffuse_fill(out[i], region)
                continue
            dy, dx = off
            ys, xs = np.nonzero(region)
            out[i][ys, xs] = frames[i][ys + dy, xs + dx]
    return out


def apply_toy_inpainting(clip: VideoClip, masks: MaskSequence, method) -> VideoClip:
    """Replace the masked pixels of ``clip``; unmasked pixels are untouched."""
    masks.check_pairs(clip)
    method = InpaintMethod.parse(method)
    frames, m = clip.frames, masks.masks
    if not m.any():
        return VideoClip(frames.copy(), clip.fps, clip.source_id)
    if method is InpaintMethod.DIFFUSE:
        out = np.stack([diffuse_fill(f, mk) for f, mk in zip(frames, m)])
    elif method is InpaintMethod.TEMPORAL_COPY:
        out = _temporal_copy(frames, m)
    else:
        out = _patch_copy(frames, m)
    return VideoClip(out, clip.fps, clip.source_id)
