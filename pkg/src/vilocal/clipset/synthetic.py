"""Procedural video clips with moving objects and exact per-frame masks.

A clip is a panning view over a textured canvas with one or more moving
objects composited on top, followed by per-frame Gaussian sensor noise.
Everything is drawn from ``numpy.random.default_rng([seed, index])`` so a
clip is a pure function of the config and its index.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from ..errors import ConfigError
from .types import MaskSequence, VideoClip, check_resolution

OBJECT_KINDS = ("rectangle", "ellipse", "textured")


@dataclass
class SyntheticConfig:
    n_clips: int = 10
    frames_per_clip: int = 16
    resolution: tuple = (120, 216)
    object_kinds: tuple = OBJECT_KINDS
    objects_per_clip: tuple = (1, 1)  # inclusive range
    object_size: tuple = (0.25, 0.4)  # fraction of frame height
    speed: tuple = (2.5, 5.0)  # object pixels per frame
    jitter: float = 0.5
    pan_speed: tuple = (0.5, 1.5)  # camera pixels per frame; (0, 0) for a static camera
    noise_sigma: float = 3.0
    fps: float = 25.0
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        h, w = self.resolution
        check_resolution(h, w)
        if self.frames_per_clip < 5:
            raise ConfigError(f"frames_per_clip must be >= 5, got {self.frames_per_clip}")
        if self.n_clips < 0:
            raise ConfigError("n_clips must be >= 0")
        lo, hi = self.objects_per_clip
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad objects_per_clip range {self.objects_per_clip}")
        bad = set(self.object_kinds) - set(OBJECT_KINDS)
        if bad or not self.object_kinds:
            raise ConfigError(f"unknown object kinds {sorted(bad)}")
        if not 0 < self.object_size[0] <= self.object_size[1] < 1:
            raise ConfigError(f"bad object_size range {self.object_size}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        kw = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown synthetic config key {k!r}")
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


def _texture(rng, h, w, channels=3):
    """Multi-scale coloured noise texture in roughly [40, 215]."""
    out = np.zeros((h, w, channels))
    for sigma, weight in ((12.0, 1.0), (4.0, 0.6), (1.2, 0.45)):
        field_ = ndimage.gaussian_filter(rng.standard_normal((h, w, channels)), (sigma, sigma, 0), mode="wrap")
        field_ /= field_.std() + 1e-12
        out += weight * field_
    yy, xx = np.mgrid[0:h, 0:w]
    angle, freq = rng.uniform(0, np.pi), rng.uniform(0.05, 0.25)
    grating = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + rng.uniform(0, 2 * np.pi))
    out += 0.5 * grating[..., None] * rng.uniform(0.3, 1.0, channels)
    out /= out.std() + 1e-12
    base = rng.uniform(90, 165, channels)
    return np.clip(base + 28.0 * out, 0, 255)


def _object_shape(kind, oh, ow):
    if kind == "ellipse":
        yy, xx = np.mgrid[0:oh, 0:ow]
        cy, cx = (oh - 1) / 2, (ow - 1) / 2
        return ((yy - cy) / (oh / 2)) ** 2 + ((xx - cx) / (ow / 2)) ** 2 <= 1.0
    return np.ones((oh, ow), dtype=bool)


class _MovingObject:
    def __init__(self, rng, cfg: SyntheticConfig, h, w):
        self.kind = cfg.object_kinds[rng.integers(len(cfg.object_kinds))]
        self.oh = max(4, int(round(rng.uniform(*cfg.object_size) * h)))
        self.ow = max(4, int(round(self.oh * rng.uniform(0.7, 1.6))))
        self.ow = min(self.ow, w - 2)
        self.shape = _object_shape(self.kind, self.oh, self.ow)
        if self.kind == "textured":
            self.appearance = _texture(rng, self.oh, self.ow)
        else:
            color = rng.uniform(20, 235, 3)
            shade = ndimage.gaussian_filter(rng.standard_normal((self.oh, self.ow)), 2.0) * 10
            self.appearance = np.clip(color + shade[..., None], 0, 255)
        self.pos = np.array([rng.uniform(0, h - self.oh), rng.uniform(0, w - self.ow)])
        speed, angle = rng.uniform(*cfg.speed), rng.uniform(0, 2 * np.pi)
        self.vel = speed * np.array([np.sin(angle), np.cos(angle)])
        self.limits = np.array([h - self.oh, w - self.ow], dtype=float)

    def step(self, rng, jitter):
        self.pos = self.pos + self.vel + rng.normal(0, jitter, 2)
        for a in range(2):
            if self.pos[a] < 0:
                self.pos[a], self.vel[a] = -self.pos[a], abs(self.vel[a])
            elif self.pos[a] > self.limits[a]:
                self.pos[a], self.vel[a] = 2 * self.limits[a] - self.pos[a], -abs(self.vel[a])
            self.pos[a] = min(max(self.pos[a], 0.0), self.limits[a])

    def stamp(self, frame, mask):
        y, x = (int(round(v)) for v in self.pos)
        region = frame[y : y + self.oh, x : x + self.ow]
        region[self.shape] = self.appearance[self.shape]
        mask[y : y + self.oh, x : x + self.ow] |= self.shape


def generate_synthetic_clip(cfg: SyntheticConfig, index: int) -> tuple[VideoClip, MaskSequence]:
    """Clip ``index`` of the synthetic set; identical output for identical (cfg, index)."""
    cfg.validate()
    h, w = cfg.resolution
    t = cfg.frames_per_clip
    rng = np.random.default_rng([cfg.seed, index])

    pan_speed = rng.uniform(*cfg.pan_speed) if cfg.pan_speed[1] > 0 else 0.0
    pan_angle = rng.uniform(0, 2 * np.pi)
    pan = pan_speed * np.array([np.sin(pan_angle), np.cos(pan_angle)])
    margin = int(np.ceil(abs(pan).max() * (t - 1))) + 1
    canvas = _texture(rng, h + 2 * margin, w + 2 * margin)
    start = np.array([margin, margin]) - pan * (t - 1) / 2

    lo, hi = cfg.objects_per_clip
    objects = [_MovingObject(rng, cfg, h, w) for _ in range(rng.integers(lo, hi + 1))]

    frames = np.empty((t, h, w, 3), np.uint8)
    masks = np.zeros((t, h, w), np.uint8)
    for i in range(t):
        oy, ox = (int(round(v)) for v in start + pan * i)
        frame = canvas[oy : oy + h, ox : ox + w].copy()
        m = np.zeros((h, w), bool)
        for obj in objects:
            if i:
                obj.step(rng, cfg.jitter)
            obj.stamp(frame, m)
        frame += rng.normal(0, cfg.noise_sigma, frame.shape)
        frames[i] = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
        masks[i] = m
    return VideoClip(frames, cfg.fps, f"syn{cfg.seed}-{index:05d}"), MaskSequence(masks)
