"""Feature extractor, reconstructors and the data-consistency block.

Complex images travel as two-channel real tensors of shape (N, 2, H, W)
with channel 0 the real part and channel 1 the imaginary part. Every
network is residual with a zero-initialized last layer, so all models are
exact identities until trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kspace import SamplingMask, fft2c, ifft2c

__all__ = [
    "to_two_channel",
    "from_two_channel",
    "DCConfig",
    "dc_block",
    "ResidualConvNet",
    "FeatureExtractor",
    "PlainCNN",
    "CascadeDC",
    "build_reconstructor",
    "extract",
    "reconstruct",
]


def to_two_channel(x: np.ndarray) -> np.ndarray:
    """Complex (N, H, W) -> real (N, 2, H, W)."""
    x = np.asarray(x)
    return np.stack([x.real, x.imag], axis=-3).astype(np.float64)


def from_two_channel(x) -> np.ndarray:
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


@dataclass(frozen=True)
class DCConfig:
    lam: float = 1.0
    hard: bool = False

    def __post_init__(self):
        if not self.hard and not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"DC lambda must be finite and >= 0, got {self.lam}")

    @property
    def sampled_weight(self) -> float:
        """Weight kept by the network's k-space on sampled locations."""
        return 0.0 if self.hard else 1.0 / (1.0 + self.lam)


def _mask_array(mask, n: int, width: int) -> np.ndarray:
    """Per-item column masks as a (n, 1, width) boolean array."""
    if isinstance(mask, SamplingMask):
        kept = mask.kept[None, :]
    elif isinstance(mask, (list, tuple)):
        kept = np.stack([m.kept if isinstance(m, SamplingMask) else np.asarray(m, bool) for m in mask])
    else:
        kept = np.asarray(mask, dtype=bool)
        kept = kept.reshape(-1, kept.shape[-1])
    if kept.shape[-1] != width or kept.shape[0] not in (1, n):
        raise ValueError(f"mask of shape {kept.shape} does not fit {n} items of width {width}")
    return kept[:, None, :]


def dc_block(x_dl: Tensor, y: np.ndarray, mask, cfg: DCConfig = DCConfig()) -> Tensor:
    """Blend the network's k-space with the measurements on sampled columns.

    k_out = k_dl off the mask, (k_dl + lam*y) / (1 + lam) on it; hard mode
    replaces sampled entries with y outright.
    """
    x_dl = x_dl if isinstance(x_dl, Tensor) else Tensor(x_dl)
    if x_dl.ndim != 4 or x_dl.shape[1] != 2:
        raise ad.ShapeError(f"dc_block: expected (N, 2, H, W) input, got {x_dl.shape}")
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    n, _, h, w = x_dl.shape
    if y.shape[-2:] != (h, w) or y.shape[0] not in (1, n):
        raise ad.ShapeError(f"dc_block: k-space {y.shape} does not match image {x_dl.shape}")
    kept = _mask_array(mask, n, w)
    weight = np.where(kept, cfg.sampled_weight, 1.0)
    k_dl = fft2c(from_two_channel(x_dl))
    if cfg.hard:
        k_out = np.where(kept, y, k_dl)
    else:
        k_out = np.where(kept, (k_dl + cfg.lam * y) / (1.0 + cfg.lam), k_dl)
    out = to_two_channel(ifft2c(k_out))

    def backward(g):
        # The map is affine in x_dl with linear part F^H W F, which is self-adjoint.
        gk = fft2c(from_two_channel(g)) * weight
        return (to_two_channel(ifft2c(gk)),)

    return ad._make(out, (x_dl,), backward, "dc_block")


class ResidualConvNet:
    """3x3 conv stack with leaky ReLU between layers and an input->output skip."""

    def __init__(self, channels: Sequence[int], seed: int = 0, slope: float = 0.01, prefix: str = ""):
        if len(channels) < 2 or channels[0] != channels[-1]:
            raise ValueError(f"residual stack needs matching in/out channels, got {channels}")
        rng = np.random.default_rng(seed)
        self.channels = tuple(channels)
        self.slope = slope
        self.layers: list[tuple[Tensor, Tensor]] = []
        last = len(channels) - 2
        for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
            if i == last:
                w = np.zeros((cout, cin, 3, 3))
            else:
                w = rng.normal(0.0, math.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
            self.layers.append((Tensor(w, requires_grad=True, name=f"{prefix}conv{i}.weight"),
                                Tensor(np.zeros(cout), requires_grad=True, name=f"{prefix}conv{i}.bias")))

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = ad.conv2d(h, w, b)
            if i < len(self.layers) - 1:
                h = ad.leaky_relu(h, self.slope)
        return ad.add(x, h)

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.parameters()}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ad.ShapeError(f"{name}: checkpoint shape {state[name].shape} != model shape {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None


class FeatureExtractor(ResidualConvNet):
    """Image-shaped latent: 2 -> 16 -> 16 -> 16 -> 2 channels.

    The output is rescaled per image to the input's l2 energy. Cosine
    similarity cannot see scale, so without this the latent norm drifts
    freely during pretraining.
    """

    def __init__(self, seed: int = 0, width: int = 16, slope: float = 0.01, match_energy: bool = True):
        super().__init__((2, width, width, width, 2), seed=seed, slope=slope)
        self.match_energy = match_energy

    def __call__(self, x: Tensor) -> Tensor:
        h = super().__call__(x)
        if not self.match_energy:
            return h
        in_norm = np.sqrt(np.sum(x.data ** 2, axis=(1, 2, 3), keepdims=True))
        out_norm = ad.sqrt(ad.sum(ad.square(h), axis=(1, 2, 3), keepdims=True))
        return ad.mul(h, ad.div(in_norm, out_norm))


class PlainCNN(ResidualConvNet):
    kind = "plain"
    needs_measurements = False

    def __init__(self, seed: int = 0, width: int = 16, slope: float = 0.01):
        super().__init__((2, width, width, width, 2), seed=seed, slope=slope)

    def __call__(self, x: Tensor, y=None, mask=None) -> Tensor:
        return super().__call__(x)


class CascadeDC:
    """Cascades of (residual 2 -> 16 -> 16 -> 2 conv block, DC block)."""

    kind = "cascade"
    needs_measurements = True

    def __init__(self, seed: int = 0, num_cascades: int = 3, width: int = 16, dc: DCConfig = DCConfig(),
                 slope: float = 0.01):
        seeds = np.random.SeedSequence(seed).spawn(num_cascades)
        self.dc = dc
        self.blocks = [ResidualConvNet((2, width, width, 2), seed=int(s.generate_state(1)[0]), slope=slope,
                                       prefix=f"cascade{i}.") for i, s in enumerate(seeds)]

    def __call__(self, x: Tensor, y=None, mask=None) -> Tensor:
        if y is None or mask is None:
            raise ValueError("CascadeDC needs the measured k-space and its sampling mask")
        for block in self.blocks:
            x = dc_block(block(x), y, mask, self.dc)
        return x

    def parameters(self) -> list[Tensor]:
        return [t for b in self.blocks for t in b.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.parameters()}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    state_dict = ResidualConvNet.state_dict
    load_state_dict = ResidualConvNet.load_state_dict
    set_trainable = ResidualConvNet.set_trainable


def build_reconstructor(kind: str, seed: int = 0, dc: DCConfig = DCConfig()):
    if kind == "plain":
        return PlainCNN(seed=seed)
    if kind == "cascade":
        return CascadeDC(seed=seed, dc=dc)
    raise ValueError(f"unknown reconstructor {kind!r} (expected 'plain' or 'cascade')")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x)
    return Tensor(to_two_channel(x) if np.iscomplexobj(x) else x)


def extract(extractor: FeatureExtractor, x_u) -> Tensor:
    """Latent z = T(x_u); accepts complex (N, H, W) arrays or two-channel tensors."""
    return extractor(_as_tensor(x_u))


def reconstruct(model, z, y=None, mask=None) -> Tensor:
    if model.needs_measurements and (y is None or mask is None):
        raise ValueError(f"{type(model).__name__} needs the measured k-space and its sampling mask")
    return model(_as_tensor(z), y, mask)
