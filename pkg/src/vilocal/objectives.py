"""Pixel-embedding contrastive loss and focal localisation loss.

The contrastive term follows the printed form: the mean of positive
exponentiated similarities divided by the sum over negatives only. Because
positives are absent from the denominator the value can go negative. The
``"infonce"`` variant adds the positive term to the denominator.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ValidationError

PROB_CLAMP = 1e-7
DENOMINATORS = ("printed", "infonce")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    samples_per_class: int = 256
    normalize_embeddings: bool = True
    anchor_classes: list = field(default_factory=lambda: [0, 1])
    denominator: str = "printed"

    def validate(self) -> "ContrastiveConfig":
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if not set(self.anchor_classes) <= {0, 1} or not self.anchor_classes:
            raise ConfigError(f"anchor_classes must be a non-empty subset of {{0, 1}}, got {self.anchor_classes}")
        if self.denominator not in DENOMINATORS:
            raise ConfigError(f"denominator must be one of {DENOMINATORS}")
        return self


@dataclass
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def validate(self) -> "FocalConfig":
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        return self


def downsample_mask(mask, factor: int = 4) -> np.ndarray:
    """Block-majority downsampling; a block with exactly half ones maps to 1."""
    m = np.asarray(mask)
    if m.ndim != 2 or m.shape[0] % factor or m.shape[1] % factor:
        raise ValidationError(f"mask shape {m.shape} not divisible by {factor}")
    h, w = m.shape[0] // factor, m.shape[1] // factor
    counts = (m > 0).reshape(h, factor, w, factor).sum(axis=(1, 3))
    return (2 * counts >= factor * factor).astype(np.uint8)


@dataclass
class PixelSampleBatch:
    """Sampled pixel pool for one embedding map.

    ``embeddings[i]`` carries ``labels[i]``; every pool member is an anchor.
    ``positives[i]`` / ``negatives[i]`` index into the pool.
    """

    embeddings: torch.Tensor
    labels: np.ndarray
    pixel_index: np.ndarray
    positives: list
    negatives: list
    skip: bool = False

    @property
    def num_anchors(self) -> int:
        return 0 if self.skip else len(self.labels)

    @classmethod
    def empty(cls, dim: int, dtype=torch.float32) -> "PixelSampleBatch":
        return cls(torch.zeros(0, dim, dtype=dtype), np.zeros(0, np.int64), np.zeros(0, np.int64), [], [], skip=True)


def sample_pixel_embeddings(emb, ds_mask, cfg: ContrastiveConfig, seed) -> PixelSampleBatch:
    """Draw up to ``samples_per_class`` pixels per anchor class without replacement.

    ``emb`` is ``h x w x C`` (tensor or array, gradients preserved); ``seed``
    is anything ``numpy.random.default_rng`` accepts.
    """
    cfg.validate()
    emb = torch.as_tensor(emb)
    m = np.asarray(ds_mask)
    if emb.ndim != 3 or tuple(emb.shape[:2]) != m.shape:
        raise ValidationError(f"embeddings {tuple(emb.shape)} not aligned with mask {m.shape}")
    flat_labels = (m.reshape(-1) > 0).astype(np.int64)
    by_class = {c: np.flatnonzero(flat_labels == c) for c in (0, 1)}
    if any(len(v) == 0 for v in by_class.values()):
        return PixelSampleBatch.empty(emb.shape[-1], emb.dtype)

    rng = np.random.default_rng(seed)
    chosen = []
    for c in sorted(set(cfg.anchor_classes)):
        pool = by_class[c]
        k = min(cfg.samples_per_class, len(pool))
        chosen.append(np.sort(rng.choice(pool, size=k, replace=False)))
    # negatives must exist even when only one class is anchored
    for c in (0, 1):
        if c not in cfg.anchor_classes:
            pool = by_class[c]
            k = min(cfg.samples_per_class, len(pool))
            chosen.append(np.sort(rng.choice(pool, size=k, replace=False)))
    idx = np.concatenate(chosen)
    labels = flat_labels[idx]

    vecs = emb.reshape(-1, emb.shape[-1])[torch.from_numpy(idx)]
    if cfg.normalize_embeddings:
        vecs = torch.nn.functional.normalize(vecs, dim=1)

    anchor_set = set(cfg.anchor_classes)
    positives, negatives = [], []
    for i, lab in enumerate(labels):
        if lab in anchor_set:
            same = np.flatnonzero(labels == lab)
            positives.append(same[same != i])
            negatives.append(np.flatnonzero(labels != lab))
        else:
            positives.append(np.zeros(0, np.int64))
            negatives.append(np.zeros(0, np.int64))
    return PixelSampleBatch(vecs, labels, idx, positives, negatives)


def anchor_losses(batch: PixelSampleBatch, temperature: float, denominator: str = "printed") -> torch.Tensor:
    """Per-anchor contrastive losses; anchors without positives or negatives are dropped."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if denominator not in DENOMINATORS:
        raise ConfigError(f"denominator must be one of {DENOMINATORS}")
    if batch.skip or len(batch.labels) == 0:
        return batch.embeddings.new_zeros(0)
    e = batch.embeddings
    sims = e @ e.T / temperature
    n = len(batch.labels)
    pos = torch.zeros(n, n, dtype=torch.bool)
    neg = torch.zeros(n, n, dtype=torch.bool)
    for i in range(n):
        pos[i, torch.from_numpy(batch.positives[i])] = True
        neg[i, torch.from_numpy(batch.negatives[i])] = True
    keep = pos.any(1) & neg.any(1)
    if not keep.any():
        return e.new_zeros(0)
    sims, pos, neg = sims[keep], pos[keep], neg[keep]
    return _contrast_from_similarities(sims, pos, neg, denominator)


def _contrast_from_similarities(logits, pos, neg, denominator):
    ninf = torch.finfo(logits.dtype).min
    log_num = torch.logsumexp(logits.masked_fill(~pos, ninf), dim=1) - torch.log(pos.sum(1).to(logits.dtype))
    log_den = torch.logsumexp(logits.masked_fill(~neg, ninf), dim=1)
    if denominator == "infonce":
        log_den = torch.logaddexp(log_den, log_num)
    return log_den - log_num


def contrastive_loss(batch: PixelSampleBatch, temperature: float, denominator: str = "printed") -> torch.Tensor:
    """Mean anchor loss; 0 for a skipped or empty batch."""
    losses = anchor_losses(batch, temperature, denominator)
    if losses.numel() == 0:
        return batch.embeddings.new_zeros(())
    return losses.mean()


def contrastive_from_similarities(pos_sims, neg_sims, temperature: float, denominator: str = "printed"):
    """Single-anchor loss from raw similarity vectors ``q.k+`` and ``q.k-``."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    p = torch.as_tensor(pos_sims, dtype=torch.float64).reshape(-1)
    n = torch.as_tensor(neg_sims, dtype=torch.float64).reshape(-1)
    logits = torch.cat([p, n])[None] / temperature
    pos = torch.zeros_like(logits, dtype=torch.bool)
    pos[0, : len(p)] = True
    return _contrast_from_similarities(logits, pos, ~pos, denominator)[0]


def focal_loss(G, M, cfg: FocalConfig | None = None) -> torch.Tensor:
    """Pixel-mean focal loss of probability map ``M`` against binary labels ``G``."""
    cfg = (cfg or FocalConfig()).validate()
    M = torch.as_tensor(M)
    if not M.is_floating_point():
        M = M.double()
    G = torch.as_tensor(G).to(M.dtype)
    if G.shape != M.shape:
        raise ValidationError(f"label shape {tuple(G.shape)} != prediction shape {tuple(M.shape)}")
    M = M.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    pos = cfg.alpha * (1 - M) ** cfg.gamma * G * torch.log(M)
    neg = (1 - cfg.alpha) * M**cfg.gamma * (1 - G) * torch.log(1 - M)
    return -(pos + neg).mean()


def config_summary(c: ContrastiveConfig, f: FocalConfig) -> dict:
    out = {f"contrastive.{k}": v for k, v in asdict(c).items()}
    out.update({f"focal.{k}": v for k, v in asdict(f).items()})
    return out
