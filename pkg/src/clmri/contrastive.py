"""Contrastive pretraining of the feature extractor on multi-accelerated images.

Every scan in a minibatch is undersampled at each of D accelerations; the D
latents of one scan are mutual positives and every latent from another scan
is a negative. No fully sampled images are used.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import RMSProp, Tensor
from .config import PretrainConfig
from .kspace import fft2c, ifft2c, make_mask
from .models import FeatureExtractor, to_two_channel
from .phantoms import Volume, derive_seed, select, volume_coils

logger = logging.getLogger(__name__)


def cosine_sim(u, v) -> float:
    u = np.ravel(np.asarray(u, dtype=np.float64))
    v = np.ravel(np.asarray(v, dtype=np.float64))
    if u.shape != v.shape:
        raise ValueError(f"cosine_sim: length mismatch {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass
class ContrastiveBatch:
    latents: Tensor | np.ndarray  # (D*B, ...) one row per item
    scan_ids: Sequence[int]       # scan label p of each row
    tau: float = 0.5


def positive_mask(scan_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(scan_ids)
    same = ids[:, None] == ids[None, :]
    np.fill_diagonal(same, False)
    return same


def clmri_loss(latents, scan_ids: Sequence[int] | None = None, tau: float | None = None,
               require_negatives: bool = False) -> Tensor:
    """Mean over ordered positive pairs (i, j) of

        -log( exp(s_ij / tau) / sum_{k != i} exp(s_ik / tau) )

    with s the cosine similarity of flattened latents. The denominator runs
    over all other items, positives included.
    """
    if isinstance(latents, ContrastiveBatch):
        latents, scan_ids, tau = latents.latents, latents.scan_ids, latents.tau
    if tau is None or tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = latents if isinstance(latents, Tensor) else Tensor(latents)
    n = z.shape[0]
    if len(scan_ids) != n:
        raise ValueError(f"{len(scan_ids)} scan labels for {n} latents")
    pos = positive_mask(scan_ids)
    if not pos.any():
        raise ValueError("batch has no positive pairs")
    if require_negatives and len(set(scan_ids)) < 2:
        raise ValueError("contrastive batches need at least two scans (B >= 2)")
    flat = ad.reshape(z, (n, -1))
    norms = ad.sqrt(ad.sum(ad.square(flat), axis=1, keepdims=True))
    unit = ad.div(flat, norms)
    logits = ad.mul(ad.matmul(unit, ad.transpose(unit)), 1.0 / tau)
    off_diag = 1.0 - np.eye(n)
    log_denom = ad.log(ad.sum(ad.mul(ad.exp(logits), off_diag), axis=1))
    pairs_per_row = pos.sum(axis=1).astype(np.float64)
    total = ad.sub(ad.sum(ad.mul(log_denom, pairs_per_row)), ad.sum(ad.mul(logits, pos.astype(np.float64))))
    return ad.mul(total, 1.0 / pos.sum())


class _SliceCache:
    def __init__(self, num_coils: int, coil_seed: int):
        self.num_coils, self.coil_seed = num_coils, coil_seed
        self._coils = {}

    def coils(self, volume: Volume) -> np.ndarray:
        if volume.volume_id not in self._coils:
            self._coils[volume.volume_id] = volume_coils(volume, self.num_coils, self.coil_seed).sensitivities
        return self._coils[volume.volume_id]


def multi_accelerated(coil_image: np.ndarray, accelerations: Sequence[float], mask_kind: str,
                      seeds: Sequence[int]) -> np.ndarray:
    """Zero-filled images of one coil image at each acceleration, shape (D, H, W)."""
    k = fft2c(coil_image)
    width = coil_image.shape[-1]
    out = np.empty((len(accelerations),) + coil_image.shape, dtype=np.complex128)
    for q, (acc, seed) in enumerate(zip(accelerations, seeds)):
        out[q] = ifft2c(np.where(make_mask(mask_kind, width, acc, seed).kept, k, 0))
    return out


def _mask_seed(cfg: PretrainConfig, volume_id: str, acc: float, epoch: int) -> int:
    return derive_seed(cfg.seed, "pretrain-mask", volume_id, int(round(acc * 1000)), epoch if cfg.fresh_masks else 0)


def pretrain(extractor: FeatureExtractor, volumes: Sequence[Volume], cfg: PretrainConfig,
             progress: Callable[[int, int, float], None] | None = None):
    """Contrastive pretraining loop; returns (extractor, history).

    ``history`` holds one (step, epoch, loss) tuple per optimizer step. Each
    epoch draws ``items_per_volume`` (slice, coil) images from every training
    volume; a minibatch holds ``batch_size`` such scans.
    """
    cfg.validate()
    train = select(volumes, family=cfg.family, split="train")
    if len(train) < 2:
        raise ValueError("pretraining needs at least two training volumes")
    cache = _SliceCache(cfg.num_coils, cfg.coil_seed)
    opt = RMSProp(extractor.parameters(), lr=cfg.learning_rate, rho=cfg.rho, eps=cfg.eps)
    d = len(cfg.accelerations)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(derive_seed(cfg.seed, "pretrain-epoch", epoch))
        items = [(vi, int(rng.integers(v.num_slices)), int(rng.integers(cfg.num_coils)))
                 for vi, v in enumerate(train) for _ in range(cfg.items_per_volume)]
        order = rng.permutation(len(items))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [items[i] for i in order[start:start + cfg.batch_size]]
            if len(chunk) < 2:
                continue
            images = []
            for vi, s, c in chunk:
                vol = train[vi]
                coil_image = cache.coils(vol)[c] * vol.slices[s].astype(np.complex128)
                seeds = [_mask_seed(cfg, vol.volume_id, a, epoch) for a in cfg.accelerations]
                images.append(multi_accelerated(coil_image, cfg.accelerations, cfg.mask_kind, seeds))
            x = Tensor(to_two_channel(np.concatenate(images)))
            scan_ids = np.repeat(np.arange(len(chunk)), d)
            loss = clmri_loss(extractor(x), scan_ids, cfg.tau)
            opt.zero_grad()
            loss.backward()
            opt.step()
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite contrastive loss at step {step}")
            history.append((step, epoch, value))
            if progress is not None:
                progress(step, epoch, value)
            step += 1
        if history:
            logger.info("pretrain epoch %d loss %.5f", epoch, history[-1][2])
    return extractor, history


def collect_latents(extractor: FeatureExtractor | None, volumes: Sequence[Volume], accelerations: Sequence[float],
                    num_coils: int = 4, coil_seed: int = 0, seed: int = 0, mask_kind: str = "random",
                    slices: Sequence[int] | None = None, chunk: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Latents for every (volume, slice, coil) scan at every acceleration.

    Returns (latents, inputs), both shaped (num_scans, D, 2, H, W); with
    ``extractor=None`` the latents are the zero-filled inputs themselves.
    Masks are fixed per (volume, acceleration).
    """
    cache = _SliceCache(num_coils, coil_seed)
    inputs = []
    for vol in volumes:
        sens = cache.coils(vol)
        seeds = [derive_seed(seed, "eval-mask", vol.volume_id, int(round(a * 1000))) for a in accelerations]
        for s in (range(vol.num_slices) if slices is None else slices):
            for c in range(num_coils):
                inputs.append(multi_accelerated(sens[c] * vol.slices[s].astype(np.complex128),
                                                accelerations, mask_kind, seeds))
    x = to_two_channel(np.stack(inputs))  # (scans, D, 2, H, W)
    if extractor is None:
        return x.copy(), x
    flat = x.reshape((-1,) + x.shape[2:])
    out = np.empty_like(flat)
    with ad.no_grad():
        for start in range(0, flat.shape[0], chunk):
            out[start:start + chunk] = extractor(Tensor(flat[start:start + chunk])).data
    return out.reshape(x.shape), x


def mean_positive_similarity(latents: np.ndarray) -> float:
    """Mean cosine similarity over all positive pairs of (scans, D, ...) latents."""
    flat = latents.reshape(latents.shape[0], latents.shape[1], -1)
    unit = flat / np.linalg.norm(flat, axis=-1, keepdims=True)
    sims = np.einsum("sil,sjl->sij", unit, unit)
    d = latents.shape[1]
    iu = np.triu_indices(d, k=1)
    return float(sims[:, iu[0], iu[1]].mean())
