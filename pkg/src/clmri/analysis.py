"""Reconstruction metrics and latent-space diagnostics."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

SSIM_WINDOW = 7
SSIM_K1, SSIM_K2 = 0.01, 0.03


class DegenerateRangeWarning(UserWarning):
    pass


def nmse(v_hat, v) -> float:
    """||v_hat - v||^2 / ||v||^2 over the whole array (a volume or a single slice)."""
    v_hat, v = np.asarray(v_hat, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if v_hat.shape != v.shape:
        raise ValueError(f"shape mismatch {v_hat.shape} vs {v.shape}")
    ref = np.sum(v ** 2)
    if ref == 0:
        raise ValueError("NMSE is undefined for an all-zero ground truth")
    return float(np.sum((v_hat - v) ** 2) / ref)


def psnr(v_hat, v, max_value: float | None = None) -> float:
    """10 log10(max(v)^2 / MSE); +inf when the reconstruction is exact."""
    v_hat, v = np.asarray(v_hat, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if v_hat.shape != v.shape:
        raise ValueError(f"shape mismatch {v_hat.shape} vs {v.shape}")
    mse = np.mean((v_hat - v) ** 2)
    peak = v.max() if max_value is None else max_value
    if mse == 0:
        return math.inf
    return float(10 * np.log10(peak ** 2 / mse))


def ssim(m_hat, m, data_range: float | None = None, win_size: int = SSIM_WINDOW) -> float:
    """Mean SSIM over every fully-contained ``win_size`` x ``win_size`` window.

    Window statistics use the unbiased (n-1) covariance, c1 = (0.01 L)^2 and
    c2 = (0.03 L)^2 with L = ``data_range`` (default: max of ``m``). 3-D
    inputs are treated as stacks of slices.
    """
    m_hat, m = np.asarray(m_hat, dtype=np.float64), np.asarray(m, dtype=np.float64)
    if m_hat.shape != m.shape:
        raise ValueError(f"shape mismatch {m_hat.shape} vs {m.shape}")
    if m.ndim == 3:
        L = m.max() if data_range is None else data_range
        return float(np.mean([ssim(a, b, L, win_size) for a, b in zip(m_hat, m)]))
    if m.shape[0] < win_size or m.shape[1] < win_size:
        raise ValueError(f"image {m.shape} is smaller than the {win_size}x{win_size} window")
    L = m.max() if data_range is None else data_range
    if L <= 0:
        raise ValueError("SSIM needs a positive data range")
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    n = win_size * win_size
    wa = sliding_window_view(m_hat, (win_size, win_size))
    wb = sliding_window_view(m, (win_size, win_size))
    mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    cov_norm = n / (n - 1)
    var_a = (np.mean(wa * wa, axis=(-2, -1)) - mu_a ** 2) * cov_norm
    var_b = (np.mean(wb * wb, axis=(-2, -1)) - mu_b ** 2) * cov_norm
    cov = (np.mean(wa * wb, axis=(-2, -1)) - mu_a * mu_b) * cov_norm
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


# -- latent diagnostics --------------------------------------------------------

def _flatten(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z.reshape(z.shape[0], -1)


def alignment(pairs, alpha: float = 2.0) -> float:
    """-E ||z - z+||^alpha over positive pairs given as (z, z_plus) arrays or a list of tuples."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if isinstance(pairs, tuple) and len(pairs) == 2 and not isinstance(pairs[0], tuple):
        a, b = _flatten(pairs[0]), _flatten(pairs[1])
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("alignment needs at least one positive pair")
        a = np.stack([np.ravel(p[0]) for p in pairs]).astype(np.float64)
        b = np.stack([np.ravel(p[1]) for p in pairs]).astype(np.float64)
    if a.shape[0] == 0:
        raise ValueError("alignment needs at least one positive pair")
    return float(-np.mean(np.linalg.norm(a - b, axis=1) ** alpha))


def uniformity(latents, beta: float = 2.0) -> float:
    """log E exp(-beta ||z_i - z_j||^2) over distinct unordered pairs of unit-normalized latents."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    z = _flatten(latents)
    if z.shape[0] < 2:
        raise ValueError("uniformity needs at least two latents")
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    sq = np.sum(z * z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * z @ z.T, 0.0)
    iu = np.triu_indices(z.shape[0], k=1)
    return float(logsumexp(-beta * d2[iu]) - math.log(len(iu[0])))


def acceleration_key(a: float, b: float) -> str:
    def fmt(x):
        return str(int(x)) if float(x).is_integer() else str(x)
    return f"{fmt(a)}-{fmt(b)}"


@dataclass
class PairHistogram:
    key: str
    distances: np.ndarray
    counts: np.ndarray
    edges: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.distances.mean())


def pair_distances(latents: np.ndarray, accelerations: Sequence[float]) -> dict[str, np.ndarray]:
    """Raw l2 distances of positive pairs keyed by acceleration pair.

    ``latents`` is (num_scans, D, ...) with axis 1 ordered like ``accelerations``.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape[1] != len(accelerations) or len(accelerations) < 2:
        raise ValueError("need latents for at least two accelerations")
    flat = latents.reshape(latents.shape[0], latents.shape[1], -1)
    return {acceleration_key(accelerations[i], accelerations[j]):
            np.linalg.norm(flat[:, i] - flat[:, j], axis=1)
            for i, j in itertools.combinations(range(len(accelerations)), 2)}


def pair_distance_histogram(latents: np.ndarray, accelerations: Sequence[float],
                            edges: Sequence[float] | int = 20) -> dict[str, PairHistogram]:
    """One histogram of positive-pair distances per acceleration pair, on shared bin edges."""
    dists = pair_distances(latents, accelerations)
    if np.isscalar(edges):
        hi = max(float(max(d.max() for d in dists.values())), 1e-12)
        edges = np.linspace(0.0, hi * (1 + 1e-9), int(edges) + 1)
    edges = np.asarray(edges, dtype=np.float64)
    return {key: PairHistogram(key, d, np.histogram(d, bins=edges)[0], edges) for key, d in dists.items()}


def quantize(image, bins: int) -> np.ndarray:
    """Equal-width bin indices over the image's own [min, max]."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        warnings.warn("constant image has a degenerate intensity range; all pixels go to bin 0",
                      DegenerateRangeWarning, stacklevel=3)
        return np.zeros(image.shape, dtype=np.int64)
    idx = np.floor((image - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _joint_histogram(a: Iterable, b: Iterable, bins: int) -> np.ndarray:
    counts = np.zeros(bins * bins, dtype=np.int64)
    for x, y in zip(a, b):
        x, y = np.asarray(x), np.asarray(y)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
        counts += np.bincount((quantize(x, bins) * bins + quantize(y, bins)).ravel(), minlength=bins * bins)
    return counts.reshape(bins, bins)


def _as_image_set(images) -> list[np.ndarray]:
    if isinstance(images, np.ndarray) and images.ndim == 2:
        return [images]
    return list(images)


def mutual_info_hist(a, b, bins: int = 32) -> float:
    """Histogram mutual information (nats) between two aligned sets of magnitude images.

    Each image is binned over its own range; the joint histogram is pooled
    across the set.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    a, b = _as_image_set(a), _as_image_set(b)
    if len(a) != len(b) or not a:
        raise ValueError("image sets must be nonempty and of equal length")
    joint = _joint_histogram(a, b, bins).astype(np.float64)
    p = joint / joint.sum()
    pa, pb = p.sum(axis=1), p.sum(axis=0)
    nz = p > 0
    return float(max(np.sum(p[nz] * np.log(p[nz] / np.outer(pa, pb)[nz])), 0.0))


def entropy_hist(a, bins: int = 32) -> float:
    """Entropy (nats) of the binned intensities, binned as in :func:`mutual_info_hist`."""
    counts = sum(np.bincount(quantize(x, bins).ravel(), minlength=bins) for x in _as_image_set(a))
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def latent_magnitude(z) -> np.ndarray:
    """Two-channel (..., 2, H, W) latent -> magnitude (..., H, W)."""
    z = np.asarray(z)
    return np.sqrt(z[..., 0, :, :] ** 2 + z[..., 1, :, :] ** 2)


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation of per-slice values."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size and np.all(arr == arr[0]):  # also covers all-inf PSNR of exact reconstructions
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std())


def summarize(rows: Sequence[Mapping], keys: Sequence[str], metrics=("nmse", "psnr", "ssim")) -> list[dict]:
    """Group per-slice rows by ``keys`` and report mean and std of each metric."""
    groups: dict[tuple, list[Mapping]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for group_key, members in groups.items():
        entry = dict(zip(keys, group_key))
        entry["n"] = len(members)
        for m in metrics:
            entry[f"{m}_mean"], entry[f"{m}_std"] = aggregate([float(r[m]) for r in members])
        out.append(entry)
    return out
