"""Two-stage training.

Stage 1 fits the encoder with the pixel contrastive loss. Stage 2 freezes it
and fits the decoder with the focal loss. With ``use_contrastive=False``
stage 1 only emits a randomly initialised encoder and stage 2 trains encoder
and decoder jointly on the focal loss.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    Checkpoint,
    flatten_optimizer,
    load_checkpoint,
    save_checkpoint,
    to_numpy_state,
    to_torch_state,
    unflatten_optimizer,
)
from .clipset.manifest import DatasetManifest, units_for_entries
from .clipset.types import TrainingUnit
from .config import RunConfig
from .decoder import LocalizationDecoder, build_decoder
from .encoder import EncoderConfig, SpatiotemporalEncoder, build_encoder, model_checksum
from .errors import ConfigError, IntegrityError, TrainingDivergedError, ValidationError
from .hp3d import Hp3dFilter, Hp3dKernel
from .objectives import anchor_losses, downsample_mask, focal_loss, sample_pixel_embeddings

log = logging.getLogger(__name__)


class InputTransform(torch.nn.Module):
    """uint8 ``B x 5 x H x W x 3`` units -> ``B x 3 x 5 x H x W`` encoder input.

    With HP3D the input is the noise residual of frames in [0, 1] times
    ``gain``; without it the raw frames are shifted to [-0.5, 0.5].
    """

    def __init__(self, use_hp3d: bool = True, kernel: Hp3dKernel | None = None, gain: float = 1.0):
        super().__init__()
        self.use_hp3d = use_hp3d
        self.gain = gain
        self.hp3d = Hp3dFilter(kernel) if use_hp3d else None

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        x = frames.permute(0, 4, 1, 2, 3).float() / 255.0
        if self.use_hp3d:
            return self.hp3d(x) * self.gain
        return x - 0.5


def kernel_from_config(cfg: RunConfig) -> Hp3dKernel:
    return Hp3dKernel.from_file(cfg.train.hp3d_kernel) if cfg.train.hp3d_kernel else Hp3dKernel.default()


def input_transform(cfg: RunConfig) -> InputTransform:
    return InputTransform(cfg.train.use_hp3d, kernel_from_config(cfg), cfg.train.residual_gain)


def stack_units(units: list[TrainingUnit]) -> tuple[torch.Tensor, np.ndarray]:
    frames = torch.from_numpy(np.stack([u.frames for u in units]))
    masks = np.stack([u.middle_mask for u in units])
    return frames, masks


def load_units(cfg: RunConfig, manifest: DatasetManifest, split: str | None = None) -> list[TrainingUnit]:
    split = split or cfg.train.split
    entries = manifest.split(split)
    if not entries:
        raise ConfigError(f"manifest split {split!r} is empty")
    units = units_for_entries(entries, cfg.train.stride, cfg.train.target_resolution)
    if len(units) < cfg.train.batch_size:
        raise ConfigError(f"split {split!r} yields {len(units)} units, fewer than batch_size={cfg.train.batch_size}")
    return units


def epoch_batches(n_units: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled unit indices grouped into full batches; the partial tail is dropped."""
    order = np.random.default_rng([seed, epoch]).permutation(n_units)
    n = n_units // batch_size
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(n)]


@dataclass
class StepLog:
    path: Path | None = None

    def __post_init__(self):
        self.records = []
        self.t0 = time.perf_counter()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record):
        record.setdefault("wall_time", round(time.perf_counter() - self.t0, 4))
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def losses(self, stage: int | None = None) -> list[float]:
        return [r["loss"] for r in self.records if r.get("kind") == "step" and (stage is None or r["stage"] == stage)]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list
    best: Checkpoint | None = None


def _seed_everything(seed: int, threads: int):
    torch.manual_seed(seed)
    if threads:
        torch.set_num_threads(threads)


def contrastive_batch_loss(emb: torch.Tensor, masks: np.ndarray, cfg: RunConfig, seeds) -> torch.Tensor | None:
    """Mean anchor loss over every unit in the batch; None when no unit has both classes."""
    losses = []
    for b in range(emb.shape[0]):
        ds = downsample_mask(masks[b], 4)
        batch = sample_pixel_embeddings(emb[b].permute(1, 2, 0), ds, cfg.contrastive, seeds[b])
        if not batch.skip:
            losses.append(anchor_losses(batch, cfg.contrastive.temperature, cfg.contrastive.denominator))
    losses = [l for l in losses if l.numel()]
    if not losses:
        return None
    return torch.cat(losses).mean()


def _dump_bad_batch(run_dir, stage, step, units, idx):
    record = {"stage": stage, "step": step,
              "units": [vars(units[i].provenance) for i in idx]}
    if run_dir is not None:
        path = Path(run_dir) / f"diverged_stage{stage}_step{step}.json"
        path.write_text(json.dumps(record, indent=1), encoding="utf-8")
    return record


def _check_finite(model: torch.nn.Module, what: str, step: int):
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise TrainingDivergedError(f"{what} parameter {name} became non-finite at step {step}")


def _config_snapshot(cfg: RunConfig, stage: int) -> dict:
    d = cfg.to_dict()
    d["train"]["stage"] = stage
    return d


def encoder_from_checkpoint(ckpt: Checkpoint) -> SpatiotemporalEncoder:
    enc_cfg = EncoderConfig.from_dict(ckpt.config["model"])
    model = build_encoder(enc_cfg, 0)
    model.load_state_dict(to_torch_state(ckpt.encoder))
    return model


def decoder_from_checkpoint(ckpt: Checkpoint) -> LocalizationDecoder:
    if ckpt.decoder is None:
        raise ValidationError("checkpoint has no decoder (stage-1 checkpoint?)")
    enc_cfg = EncoderConfig.from_dict(ckpt.config["model"])
    model = build_decoder(enc_cfg.stage_channels[-1], 0)
    model.load_state_dict(to_torch_state(ckpt.decoder))
    return model


def train_stage1(cfg: RunConfig, manifest: DatasetManifest, run_dir=None, units=None) -> TrainResult:
    """Contrastive encoder training; returns the last checkpoint (and the best-loss one)."""
    cfg.validate()
    tc = cfg.train
    run_dir = Path(run_dir) if run_dir is not None else None
    _seed_everything(tc.seed, tc.threads)
    encoder = build_encoder(cfg.model, tc.seed)
    snapshot = _config_snapshot(cfg, 1)
    steplog = StepLog(run_dir / "log.jsonl" if run_dir else None)

    if not tc.use_contrastive:
        ckpt = Checkpoint(1, 0, snapshot, to_numpy_state(encoder.state_dict()),
                          extra={"skipped": "use_contrastive=false"})
        if run_dir:
            save_checkpoint(ckpt, run_dir / "last.ckpt")
        steplog.write(kind="skip", stage=1, step=0, loss=0.0, lr=tc.lr_stage1)
        return TrainResult(ckpt, [])

    units = units if units is not None else load_units(cfg, manifest)
    transform = input_transform(cfg)
    opt = torch.optim.Adam(encoder.parameters(), lr=tc.lr_stage1, betas=tuple(tc.betas))
    encoder.train()

    step, best, best_loss = 0, None, float("inf")
    losses = []
    for epoch in range(tc.epochs_stage1):
        epoch_losses = []
        for idx in epoch_batches(len(units), tc.batch_size, tc.seed, epoch):
            if tc.max_steps and step >= tc.max_steps:
                break
            frames, masks = stack_units([units[i] for i in idx])
            emb = encoder(transform(frames))
            seeds = [[tc.seed, step, b] for b in range(len(idx))]
            loss = contrastive_batch_loss(emb, masks, cfg, seeds)
            step += 1
            if loss is None:
                steplog.write(kind="step", stage=1, step=step, epoch=epoch, loss=0.0, lr=tc.lr_stage1, skipped=True)
                continue
            if not torch.isfinite(loss):
                dump = _dump_bad_batch(run_dir, 1, step, units, idx)
                raise TrainingDivergedError(f"non-finite contrastive loss at step {step}: {dump['units']}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            _check_finite(encoder, "encoder", step)
            value = float(loss.detach())
            losses.append(value)
            epoch_losses.append(value)
            steplog.write(kind="step", stage=1, step=step, epoch=epoch, loss=value, lr=tc.lr_stage1)
            if tc.checkpoint_every and run_dir and step % tc.checkpoint_every == 0:
                save_checkpoint(_stage1_ckpt(encoder, opt, snapshot, step), run_dir / "last.ckpt")
        if epoch_losses and np.mean(epoch_losses) < best_loss:
            best_loss = float(np.mean(epoch_losses))
            best = _stage1_ckpt(encoder, opt, snapshot, step, best_epoch_loss=best_loss)
        if tc.max_steps and step >= tc.max_steps:
            break

    ckpt = _stage1_ckpt(encoder, opt, snapshot, step)
    if run_dir:
        save_checkpoint(ckpt, run_dir / "last.ckpt")
        if best is not None:
            save_checkpoint(best, run_dir / "best.ckpt")
    return TrainResult(ckpt, losses, best)


def _stage1_ckpt(encoder, opt, snapshot, step, **extra):
    arrays, meta = flatten_optimizer(opt.state_dict())
    return Checkpoint(1, step, snapshot, to_numpy_state(encoder.state_dict()),
                      optimizer=arrays, optimizer_meta=meta, extra=extra)


def _check_stage1_compat(cfg: RunConfig, ckpt: Checkpoint):
    if ckpt.stage != 1 and ckpt.decoder is None:
        raise ValidationError(f"expected a stage-1 checkpoint, got stage {ckpt.stage}")
    stored = ckpt.config
    if EncoderConfig.from_dict(stored["model"]) != cfg.model:
        raise ValidationError("stage-1 checkpoint encoder config differs from the run config")
    if bool(stored["train"]["use_hp3d"]) != cfg.train.use_hp3d:
        raise ValidationError("stage-1 checkpoint use_hp3d differs from the run config")
    if bool(stored["train"]["use_contrastive"]) != cfg.train.use_contrastive:
        raise ValidationError("stage-1 checkpoint use_contrastive differs from the run config")
    for key in ("residual_gain", "hp3d_kernel"):
        if stored["train"].get(key) != getattr(cfg.train, key):
            raise ValidationError(f"stage-1 checkpoint {key} differs from the run config")


def train_stage2(cfg: RunConfig, stage1_ckpt: Checkpoint | str | Path | None, manifest: DatasetManifest,
                 run_dir=None, units=None) -> TrainResult:
    """Focal-loss decoder training on top of a frozen stage-1 encoder."""
    cfg.validate()
    tc = cfg.train
    run_dir = Path(run_dir) if run_dir is not None else None
    _seed_everything(tc.seed, tc.threads)

    if isinstance(stage1_ckpt, (str, Path)):
        stage1_ckpt = load_checkpoint(stage1_ckpt)
    if stage1_ckpt is None:
        if tc.use_contrastive:
            raise ConfigError("stage 2 needs a stage-1 checkpoint (train.stage1_checkpoint) unless use_contrastive=false")
        encoder = build_encoder(cfg.model, tc.seed)
    else:
        _check_stage1_compat(cfg, stage1_ckpt)
        encoder = encoder_from_checkpoint(stage1_ckpt)

    joint = not tc.use_contrastive
    decoder = build_decoder(encoder.out_channels, tc.seed + 1)
    transform = input_transform(cfg)
    units = units if units is not None else load_units(cfg, manifest)
    snapshot = _config_snapshot(cfg, 2)
    steplog = StepLog(run_dir / "log.jsonl" if run_dir else None)

    params = list(decoder.parameters())
    if joint:
        params += list(encoder.parameters())
        encoder.train()
    else:
        encoder.eval()
        for p in encoder.parameters():
            p.requires_grad_(False)
    frozen_sum = None if joint else model_checksum(encoder)
    opt = torch.optim.Adam(params, lr=tc.lr_stage2, betas=tuple(tc.betas))

    cache = None
    if not joint and tc.cache_embeddings:
        cache = embed_units(encoder, transform, units, tc.batch_size)

    step, best, best_loss, losses = 0, None, float("inf"), []
    decoder.train()
    for epoch in range(tc.epochs_stage2):
        epoch_losses = []
        for idx in epoch_batches(len(units), tc.batch_size, tc.seed, epoch):
            if tc.max_steps and step >= tc.max_steps:
                break
            frames, masks = stack_units([units[i] for i in idx])
            if cache is not None:
                emb = cache[torch.from_numpy(idx)]
            elif joint:
                emb = encoder(transform(frames))
            else:
                with torch.no_grad():
                    emb = encoder(transform(frames))
            probs = torch.sigmoid(decoder(emb))
            loss = focal_loss(torch.from_numpy(masks), probs, cfg.focal)
            step += 1
            if not torch.isfinite(loss):
                dump = _dump_bad_batch(run_dir, 2, step, units, idx)
                raise TrainingDivergedError(f"non-finite focal loss at step {step}: {dump['units']}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            _check_finite(decoder, "decoder", step)
            if joint:
                _check_finite(encoder, "encoder", step)
            value = float(loss.detach())
            losses.append(value)
            epoch_losses.append(value)
            steplog.write(kind="step", stage=2, step=step, epoch=epoch, loss=value, lr=tc.lr_stage2)
            if tc.checkpoint_every and run_dir and step % tc.checkpoint_every == 0:
                save_checkpoint(_stage2_ckpt(encoder, decoder, opt, snapshot, step), run_dir / "last.ckpt")
        if frozen_sum is not None and model_checksum(encoder) != frozen_sum:
            raise IntegrityError(f"frozen encoder changed during stage-2 epoch {epoch}")
        if epoch_losses and np.mean(epoch_losses) < best_loss:
            best_loss = float(np.mean(epoch_losses))
            best = _stage2_ckpt(encoder, decoder, opt, snapshot, step, best_epoch_loss=best_loss)
        if tc.max_steps and step >= tc.max_steps:
            break

    if frozen_sum is not None and model_checksum(encoder) != frozen_sum:
        raise IntegrityError("frozen encoder changed during stage 2")
    ckpt = _stage2_ckpt(encoder, decoder, opt, snapshot, step)
    if run_dir:
        save_checkpoint(ckpt, run_dir / "last.ckpt")
        if best is not None:
            save_checkpoint(best, run_dir / "best.ckpt")
    return TrainResult(ckpt, losses, best)


def _stage2_ckpt(encoder, decoder, opt, snapshot, step, **extra):
    arrays, meta = flatten_optimizer(opt.state_dict())
    return Checkpoint(2, step, snapshot, to_numpy_state(encoder.state_dict()),
                      decoder=to_numpy_state(decoder.state_dict()),
                      optimizer=arrays, optimizer_meta=meta, extra=extra)


@torch.no_grad()
def embed_units(encoder, transform, units, batch_size: int = 2) -> torch.Tensor:
    out = []
    for i in range(0, len(units), batch_size):
        frames, _ = stack_units(units[i : i + batch_size])
        out.append(encoder(transform(frames)))
    return torch.cat(out)


@torch.no_grad()
def mean_contrastive_loss(encoder, cfg: RunConfig, units, seed: int = 12345) -> float:
    """Contrastive loss of ``encoder`` over all ``units`` with fixed pixel samples.

    Used to compare two encoders on identical anchors.
    """
    transform = input_transform(cfg)
    was = encoder.training
    encoder.eval()
    total, count = 0.0, 0
    for i, u in enumerate(units):
        frames, masks = stack_units([u])
        with torch.no_grad():
            emb = encoder(transform(frames))
        ds = downsample_mask(masks[0], 4)
        batch = sample_pixel_embeddings(emb[0].permute(1, 2, 0), ds, cfg.contrastive, [seed, i])
        if batch.skip:
            continue
        losses = anchor_losses(batch, cfg.contrastive.temperature, cfg.contrastive.denominator)
        total += float(losses.sum())
        count += losses.numel()
    encoder.train(was)
    return total / count if count else 0.0


def restore_optimizer(opt: torch.optim.Optimizer, ckpt: Checkpoint):
    if ckpt.optimizer is not None:
        opt.load_state_dict(unflatten_optimizer(ckpt.optimizer, ckpt.optimizer_meta))
