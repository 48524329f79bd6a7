"""Supervised reconstructor training (with or without contrastive latents) and inference."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .analysis import nmse, psnr, ssim
from .autodiff import RMSProp, Tensor
from .config import TrainConfig
from .kspace import SamplingMask, coil_combine_rss, fft2c, ifft2c, make_mask
from .models import FeatureExtractor, from_two_channel, to_two_channel
from .phantoms import Volume, derive_seed, make_undersampled_pair, select, volume_coils

logger = logging.getLogger(__name__)


@dataclass
class RunRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    wall_time: list[float] = field(default_factory=list, compare=False)
    config: dict = field(default_factory=dict)
    seed: int = 0

    def epochs_to_reach(self, threshold: float) -> int | None:
        """1-based epoch at which the validation loss first drops to ``threshold``."""
        for epoch, value in enumerate(self.val_loss, 1):
            if value <= threshold:
                return epoch
        return None


def recon_loss(x_hat: Tensor, target, kind: str = "mse") -> Tensor:
    """Two-channel loss against the coil-weighted complex ground truth."""
    target = np.asarray(target)
    if np.iscomplexobj(target):
        target = to_two_channel(target)
    if x_hat.shape != target.shape:
        raise ad.ShapeError(f"recon_loss: prediction {x_hat.shape} vs target {target.shape}")
    diff = ad.sub(x_hat, target)
    if kind == "mse":
        return ad.mean(ad.square(diff))
    if kind == "l1":
        return ad.mean(ad.abs(diff))
    raise ValueError(f"unknown loss kind {kind!r}")


def _acc_key(acc: float) -> int:
    return int(round(acc * 1000))


@dataclass
class _Batch:
    inputs: np.ndarray   # (N, 2, H, W) zero-filled
    kspace: np.ndarray   # (N, H, W)
    masks: np.ndarray    # (N, W) bool
    targets: np.ndarray  # (N, 2, H, W)


def _make_batch(items, coil_maps, mask_kind: str) -> _Batch:
    """``items`` are (volume, slice, coil, acceleration, mask_seed) tuples."""
    xs, ys, ms, ts = [], [], [], []
    for vol, s, c, acc, seed in items:
        image = coil_maps(vol)[c] * vol.slices[s].astype(np.complex128)
        mask = make_mask(mask_kind, image.shape[-1], acc, seed)
        y = np.where(mask.kept, fft2c(image), 0)
        xs.append(ifft2c(y))
        ys.append(y)
        ms.append(mask.kept)
        ts.append(image)
    return _Batch(to_two_channel(np.stack(xs)), np.stack(ys), np.stack(ms), to_two_channel(np.stack(ts)))


class _CoilMaps:
    def __init__(self, num_coils: int, coil_seed: int):
        self.num_coils, self.coil_seed, self._cache = num_coils, coil_seed, {}

    def __call__(self, vol: Volume) -> np.ndarray:
        if vol.volume_id not in self._cache:
            self._cache[vol.volume_id] = volume_coils(vol, self.num_coils, self.coil_seed).sensitivities
        return self._cache[vol.volume_id]


def forward_pipeline(model, extractor: FeatureExtractor | None, inputs: np.ndarray, kspace, masks) -> Tensor:
    """x* = G(T(x_u)) (or G(x_u) without an extractor), on two-channel inputs."""
    x = Tensor(inputs)
    if extractor is not None:
        x = extractor(x)
    return model(x, kspace, masks)


def validation_loss(model, extractor, volumes: Sequence[Volume], cfg: TrainConfig, chunk: int = 32) -> float:
    coil_maps = _CoilMaps(cfg.num_coils, cfg.coil_seed)
    accs = cfg.val_accelerations or cfg.accelerations
    items = [(vol, s, c, acc, derive_seed(cfg.seed, "val-mask", vol.volume_id, _acc_key(acc), cfg.mask_kind))
             for vol in volumes for acc in accs for s in range(vol.num_slices) for c in range(cfg.num_coils)]
    total, count = 0.0, 0
    for start in range(0, len(items), chunk):
        batch = _make_batch(items[start:start + chunk], coil_maps, cfg.mask_kind)
        with ad.no_grad():
            out = forward_pipeline(model, extractor, batch.inputs, batch.kspace, batch.masks)
            n = batch.inputs.shape[0]
            total += recon_loss(out, batch.targets, cfg.loss).item() * n
        count += n
    return total / count


def train_reconstructor(model, extractor: FeatureExtractor | None, volumes: Sequence[Volume], cfg: TrainConfig,
                        progress: Callable[[int, float, float], None] | None = None):
    """Train ``model`` on zero-filled images (without_cl) or on T's latents (with_cl).

    Each epoch visits every training slice ``items_per_slice`` times with a
    random coil and an acceleration drawn uniformly from ``cfg.accelerations``.
    Returns (model, RunRecord).
    """
    cfg.validate()
    if cfg.mode == "with_cl" and extractor is None:
        raise ValueError("with_cl mode needs a pretrained feature extractor")
    if cfg.mode == "without_cl":
        extractor = None
    train = select(volumes, family=cfg.family, split="train")
    val = select(volumes, family=cfg.family, split="val")
    if not train or not val:
        raise ValueError(f"family {cfg.family} needs both train and val volumes")
    params = list(model.parameters())
    if extractor is not None:
        extractor.set_trainable(not cfg.freeze_extractor)
        if not cfg.freeze_extractor:
            params += extractor.parameters()
    opt = RMSProp(params, lr=cfg.learning_rate, rho=cfg.rho, eps=cfg.eps)
    coil_maps = _CoilMaps(cfg.num_coils, cfg.coil_seed)
    record = RunRecord(config=dict(cfg.__dict__), seed=cfg.seed)
    record.initial_val_loss = validation_loss(model, extractor, val, cfg)
    for epoch in range(cfg.epochs):
        start_time = time.perf_counter()
        rng = np.random.default_rng(derive_seed(cfg.seed, "train-epoch", epoch))
        items = []
        for vol in train:
            for s in range(vol.num_slices):
                for _ in range(cfg.items_per_slice):
                    acc = float(cfg.accelerations[rng.integers(len(cfg.accelerations))])
                    c = int(rng.integers(cfg.num_coils))
                    seed = derive_seed(cfg.seed, "train-mask", vol.volume_id, _acc_key(acc), epoch)
                    items.append((vol, s, c, acc, seed))
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = _make_batch([items[i] for i in order[start:start + cfg.batch_size]], coil_maps, cfg.mask_kind)
            out = forward_pipeline(model, extractor, batch.inputs, batch.kspace, batch.masks)
            loss = recon_loss(out, batch.targets, cfg.loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        val_loss = validation_loss(model, extractor, val, cfg)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise FloatingPointError(f"non-finite loss in epoch {epoch}")
        record.train_loss.append(train_loss)
        record.val_loss.append(val_loss)
        record.wall_time.append(time.perf_counter() - start_time)
        logger.info("train epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if progress is not None:
            progress(epoch, train_loss, val_loss)
    if extractor is not None:
        extractor.set_trainable(False)
    return model, record


def infer(extractor: FeatureExtractor | None, model, zero_filled: np.ndarray, kspace: np.ndarray,
          mask: SamplingMask | np.ndarray) -> np.ndarray:
    """Per-coil reconstruction of one slice, RSS-combined to a magnitude image.

    ``zero_filled`` and ``kspace`` are complex (C, H, W) arrays.
    """
    kept = mask.kept if isinstance(mask, SamplingMask) else np.asarray(mask, dtype=bool)
    with ad.no_grad():
        out = forward_pipeline(model, extractor, to_two_channel(zero_filled), kspace, kept)
    return coil_combine_rss(from_two_channel(out), axis=0)


@dataclass
class SliceResult:
    volume_id: str
    slice: int
    acceleration: float
    nmse: float
    psnr: float
    ssim: float


def evaluate_reconstruction(extractor, model, volumes: Sequence[Volume], acceleration: float,
                            mask_kind: str = "random", snr_db: float | None = None, num_coils: int = 4,
                            coil_seed: int = 0, seed: int = 0, keep_images: bool = False):
    """Per-slice NMSE/PSNR/SSIM on magnitude images, with PSNR/SSIM scaled by the volume max.

    Returns a list of SliceResult (and the reconstructions if ``keep_images``).
    """
    results, images = [], []
    for vol in volumes:
        coils = volume_coils(vol, num_coils, coil_seed)
        pair = make_undersampled_pair(vol, acceleration, mask_kind, coils, seed, snr_db)
        peak = float(pair.target.max())
        for s in range(vol.num_slices):
            recon = infer(extractor, model, pair.zero_filled[s], pair.kspace[s], pair.mask)
            gt = pair.target[s]
            results.append(SliceResult(vol.volume_id, s, float(acceleration), nmse(recon, gt),
                                       psnr(recon, gt, peak), ssim(recon, gt, peak)))
            if keep_images:
                images.append((recon, gt))
    return (results, images) if keep_images else results
