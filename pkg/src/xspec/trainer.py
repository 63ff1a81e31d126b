"""SGD training loop: warmup+cosine schedule, augmentations, checkpoints, metrics log."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .data import Dataset, SieScheme, assign_sie_index, batches_per_epoch, sample_batch
from .errors import ContractError, NumericalError, ParameterError
from .losses import LossConfig, batch_hard_triplet, cross_entropy_id, total_loss
from .model import ModelConfig, ModelParams, forward_batch, init_params

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,step,lr,loss_ce,loss_tri,loss_total"


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 0.0004
    warmup_epochs: int = 20
    total_epochs: int = 120
    momentum: float = 0.9
    weight_decay: float = 0.0001
    seed: int = 0
    P: int = 16
    K_batch: int = 4
    pair_ranges: bool = False
    flip: bool = True
    pad_crop: bool = True
    pad: int = 4
    erase: bool = True
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.4)
    erase_aspect: tuple = (0.3, 3.3)
    checkpoint_every: int = 0    # epochs; 0 writes only the final checkpoint
    triplet_from_epoch: int = 0  # epochs before this one train on the identity loss alone

    def __post_init__(self):
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ParameterError(f"train.warmup_epochs={self.warmup_epochs} must lie in [0, total_epochs={self.total_epochs}]")
        for key in ("lr_init", "momentum", "weight_decay", "pad", "erase_prob"):
            if getattr(self, key) < 0:
                raise ParameterError(f"train.{key} must be nonnegative")


def lr_at(epoch, cfg: TrainConfig):
    """Linear warmup to ``lr_init`` then half-cosine decay, per epoch."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_init * ((epoch + 1) / cfg.warmup_epochs)
    span = cfg.total_epochs - cfg.warmup_epochs
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """In-place momentum SGD with L2 decay folded into the gradient.

    ``params``, ``grads`` and ``velocity`` are parallel dicts of arrays.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}")
    for name, p in params.items():
        v = velocity[name]
        v *= momentum
        v += grads[name] + weight_decay * p
        p -= lr * v


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(image):
    return image[:, ::-1, :].copy()


def pad_crop(image, pad, rng):
    if pad <= 0:
        return image
    h, w, _ = image.shape
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    return padded[top:top + h, left:left + w].copy()


def random_erase(image, rng, area=(0.02, 0.4), aspect=(0.3, 3.3), attempts=100):
    h, w, c = image.shape
    for _ in range(attempts):
        target = rng.uniform(*area) * h * w
        ratio = rng.uniform(*aspect)
        eh = int(round(math.sqrt(target * ratio)))
        ew = int(round(math.sqrt(target / ratio)))
        if 0 < eh < h and 0 < ew < w:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            out = image.copy()
            out[y:y + eh, x:x + ew] = rng.uniform(0.0, 1.0, size=(eh, ew, c))
            return out
    return image


def augment(image, cfg: TrainConfig, rng, force_flip=None):
    """Flip (p=0.5), zero-pad and random-crop, random erasing, in that order."""
    out = np.asarray(image, dtype=np.float64)
    if cfg.flip:
        do_flip = rng.random() < 0.5 if force_flip is None else force_flip
        if do_flip:
            out = hflip(out)
    elif force_flip:
        out = hflip(out)
    if cfg.pad_crop:
        out = pad_crop(out, cfg.pad, rng)
    if cfg.erase and rng.random() < cfg.erase_prob:
        out = random_erase(out, rng, cfg.erase_area, cfg.erase_aspect)
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class StepLog:
    epoch: int
    step: int
    lr: float
    loss_ce: float
    loss_tri: float
    loss_total: float

    def line(self):
        return f"{self.epoch},{self.step},{self.lr!r},{self.loss_ce!r},{self.loss_tri!r},{self.loss_total!r}"


@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)


def batch_loss(params: ModelParams, images, sie_indices, labels, loss_cfg: LossConfig, lambda_t=None):
    feats, logits = forward_batch(images, sie_indices, params)
    ce = cross_entropy_id(logits, labels)
    tri = batch_hard_triplet(feats, labels, loss_cfg.margin)
    return ce, tri, total_loss(ce, tri, loss_cfg.lambda_t if lambda_t is None else lambda_t)


def train(dataset: Dataset, model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig,
          sie_scheme: Optional[SieScheme] = None, params: Optional[ModelParams] = None,
          out_dir=None, log_path=None, max_steps=None) -> TrainResult:
    """Run ``train_cfg.total_epochs`` epochs of PK batches.

    One epoch is ``ceil(len(dataset) / (P * K_batch))`` batches. Parameter
    init, sampling and augmentation draw from independent streams of
    ``train_cfg.seed``. On a non-finite loss the last written checkpoint is
    left untouched and :class:`NumericalError` carries the last good params.
    """
    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    sie_on = model_cfg.lambda_sie != 0
    if sie_on:
        if sie_scheme is None:
            raise ContractError("lambda_sie > 0 needs an SIE scheme")
        if sie_scheme.table_size != model_cfg.n_sie:
            raise ContractError(f"scheme table size {sie_scheme.table_size} != model n_sie {model_cfg.n_sie}")
    n_dom = dataset.n_domains
    sample_ss, aug_ss = np.random.SeedSequence(train_cfg.seed).spawn(2)
    sample_rng = np.random.default_rng(sample_ss)
    aug_rng = np.random.default_rng(aug_ss)
    arrays = {name: t.data for name, t in params}
    velocity = {name: np.zeros_like(a) for name, a in arrays.items()}
    steps = batches_per_epoch(len(dataset), train_cfg.P, train_cfg.K_batch)
    result = TrainResult(params)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w")
        if not sie_on:
            log_fh.write("# sie disabled (lambda_sie=0)\n")
        else:
            log_fh.write(f"# sie enabled mode={sie_scheme.mode} n_sie={model_cfg.n_sie} lambda_sie={model_cfg.lambda_sie!r}\n")
        log_fh.write(LOG_HEADER + "\n")
    meta = {"sie_mode": sie_scheme.mode if sie_scheme is not None else "none"}
    global_step = 0
    try:
        for epoch in range(train_cfg.total_epochs):
            lr = lr_at(epoch, train_cfg)
            lambda_t = loss_cfg.lambda_t if epoch >= train_cfg.triplet_from_epoch else 0.0
            totals = []
            for step in range(steps):
                plan = sample_batch(dataset, train_cfg.P, train_cfg.K_batch, n_dom, sample_rng,
                                    pair_ranges=train_cfg.pair_ranges)
                recs = [dataset[k] for k in plan.record_indices]
                images = np.stack([augment(r.load(), train_cfg, aug_rng) for r in recs])
                sie = [assign_sie_index(r, sie_scheme) for r in recs] if sie_on else np.zeros(len(recs), dtype=np.int64)
                with ad.Tape():
                    ce, tri, tot = batch_loss(params, images, sie, plan.labels, loss_cfg, lambda_t)
                    if not math.isfinite(tot.item()):
                        raise NumericalError(f"non-finite loss at epoch {epoch} step {step}")
                ad.backward(tot, leaves=[t for _, t in params])
                grads = {name: t.grad for name, t in params}
                sgd_step(arrays, grads, velocity, lr, train_cfg.momentum, train_cfg.weight_decay)
                if "gem_p" in arrays:
                    np.maximum(arrays["gem_p"], 1.0, out=arrays["gem_p"])
                entry = StepLog(epoch, global_step, lr, ce.item(), tri.item(), tot.item())
                result.log.append(entry)
                totals.append(entry.loss_total)
                if log_fh is not None:
                    log_fh.write(entry.line() + "\n")
                global_step += 1
                if max_steps is not None and global_step >= max_steps:
                    break
            result.epoch_loss.append(float(np.mean(totals)))
            log.info("epoch %d lr %.3g loss %.4f", epoch, lr, result.epoch_loss[-1])
            if out_dir is not None and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(params, out_dir / "model.ckpt", {**meta, "epoch": epoch + 1})
            if max_steps is not None and global_step >= max_steps:
                break
    except NumericalError as exc:
        exc.last_good = params
        raise
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(params, out_dir / "model.ckpt", {**meta, "epoch": len(result.epoch_loss)})
    return result
