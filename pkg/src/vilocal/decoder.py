"""Lightweight localisation head and mask thresholding."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError

DEFAULT_THRESHOLD = 0.5
UPSAMPLE = 4


class LocalizationDecoder(nn.Module):
    """1x1 conv -> BN -> ReLU -> 1x1 conv -> x4 bilinear upsample -> sigmoid.

    ``forward`` returns logits at full resolution so the training loop can
    stay numerically stable; ``probabilities`` applies the sigmoid.
    """

    def __init__(self, in_channels: int = 256, hidden: int = 128):
        super().__init__()
        # the batch norm shift makes a bias here redundant
        self.conv1 = nn.Conv2d(in_channels, hidden, 1, bias=False)
        self.bn = nn.BatchNorm2d(hidden)
        self.conv2 = nn.Conv2d(hidden, 1, 1)
        nn.init.zeros_(self.conv2.bias)
        self.in_channels = in_channels

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        if emb.ndim != 4 or emb.shape[1] != self.in_channels:
            raise ValidationError(f"decoder expects B x {self.in_channels} x h x w, got {tuple(emb.shape)}")
        x = self.conv2(F.relu(self.bn(self.conv1(emb))))
        x = F.interpolate(x, scale_factor=UPSAMPLE, mode="bilinear", align_corners=False)
        return x[:, 0]

    def probabilities(self, emb: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(emb))


def build_decoder(in_channels: int = 256, seed: int = 0) -> LocalizationDecoder:
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return LocalizationDecoder(in_channels)
    finally:
        torch.random.set_rng_state(state)


def decode(model: LocalizationDecoder, emb) -> np.ndarray:
    """Probability map ``H x W`` for one ``H/4 x W/4 x C`` embedding map (eval mode)."""
    arr = np.asarray(emb, dtype=np.float32)
    if arr.ndim != 3:
        raise ValidationError(f"expected h x w x C embeddings, got shape {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        p = model.probabilities(x)
    model.train(was_training)
    return p[0].numpy()


def binarize(probs, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Label 1 where ``probs > threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(probs) > threshold).astype(np.uint8)


def probability_png(probs) -> np.ndarray:
    """8-bit grayscale rendering, round(255 p)."""
    return np.rint(np.clip(np.asarray(probs, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def mask_png(labels) -> np.ndarray:
    return (np.asarray(labels) > 0).astype(np.uint8) * 255
