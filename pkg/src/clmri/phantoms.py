"""Synthetic complex phantom volumes, the CKV1 dataset format, and undersampling.

Family "A" is brain-like (skull ring around interior ellipses), family "B"
is knee-like (elongated off-center structures). Both carry a smooth random
phase so that the real/imaginary channels are both informative.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kspace import (
    CoilSet,
    SamplingMask,
    add_noise_at_snr,
    apply_mask,
    coil_combine_rss,
    fft2c,
    ifft2c,
    make_mask,
    simulate_coils,
)

FAMILIES = ("A", "B")
SPLITS = ("train", "val", "test")
CKV_MAGIC = b"CKV1"
CKV_VERSION = 1


class DatasetError(Exception):
    pass


class ChecksumError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class FormatError(DatasetError):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a mix of ints and strings."""
    entropy = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) & 0xFFFFFFFF for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class PhantomSpec:
    family: str
    num_ellipses: int
    intensity_range: tuple[float, float]
    size_range: tuple[float, float]
    phase_ramp_scale: float
    seed: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown phantom family {self.family!r}")
        if self.num_ellipses < 3:
            raise ValueError("a phantom needs at least 3 ellipses")

    @classmethod
    def default(cls, family: str, seed: int) -> "PhantomSpec":
        rng = np.random.default_rng(seed)
        if family == "A":
            return cls("A", int(rng.integers(4, 9)), (0.1, 0.6), (0.05, 0.3), 1.5, seed)
        return cls("B", int(rng.integers(3, 7)), (0.2, 0.9), (0.05, 0.2), 1.5, seed)


@dataclass
class Volume:
    volume_id: str
    family: str
    split: str
    slices: np.ndarray  # (num_slices, H, W) complex64

    @property
    def num_slices(self) -> int:
        return self.slices.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.slices.shape[1:]


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _base_ellipses(spec: PhantomSpec, rng: np.random.Generator) -> list[tuple]:
    """(cy, cx, ay, ax, theta, intensity) rows; intensities may be negative (subtractive)."""
    lo, hi = spec.intensity_range
    smin, smax = spec.size_range
    rows = []
    if spec.family == "A":
        ay, ax = rng.uniform(0.78, 0.9), rng.uniform(0.6, 0.72)
        theta = rng.uniform(-0.15, 0.15)
        thick = rng.uniform(0.05, 0.09)
        rows.append((0.0, 0.0, ay, ax, theta, 1.0))
        rows.append((0.0, 0.0, ay - thick, ax - thick, theta, -1.0 + rng.uniform(*spec.intensity_range)))
        for _ in range(spec.num_ellipses):
            r, phi = rng.uniform(0, 0.45), rng.uniform(0, 2 * np.pi)
            rows.append((r * math.sin(phi), r * math.cos(phi), rng.uniform(smin, smax), rng.uniform(smin, smax),
                         rng.uniform(0, np.pi), rng.uniform(-hi / 2, hi / 2)))
    else:
        ay, ax = rng.uniform(0.6, 0.85), rng.uniform(0.45, 0.7)
        cx = rng.uniform(-0.15, 0.15)
        rows.append((0.0, cx, ay, ax, rng.uniform(-0.2, 0.2), rng.uniform(lo, hi) * 0.5))
        for k in range(spec.num_ellipses):
            side = -1 if k % 2 else 1
            rows.append((side * rng.uniform(0.1, 0.4), cx + rng.uniform(-0.3, 0.3),
                         rng.uniform(0.25, 0.55), rng.uniform(smin, smax), rng.uniform(-0.4, 0.4),
                         rng.uniform(lo, hi)))
    return rows


def _render_slice(rows, yy, xx, z: float, jitter: np.ndarray) -> np.ndarray:
    image = np.zeros_like(yy)
    taper = math.sqrt(max(1.0 - 0.5 * z * z, 0.1))
    for (cy, cx, ay, ax, theta, value), jit in zip(rows, jitter):
        mask = _ellipse(yy, xx, cy + jit[0], cx + jit[1], ay * taper * (1 + jit[2]),
                        ax * taper * (1 + jit[2]), theta + jit[3])
        image[mask] += value
    return np.clip(image, 0.0, None)


def generate_volume(spec: PhantomSpec, dims: tuple[int, int], num_slices: int,
                    volume_id: str | None = None, split: str = "train") -> Volume:
    """Render ``num_slices`` adjacent slices; deterministic per (seed, slice index)."""
    h, w = dims
    if h < 32 or w < 32 or h % 2 or w % 2:
        raise ValueError(f"phantom dims must be even and >= 32, got {dims}")
    if num_slices < 1:
        raise ValueError("num_slices must be positive")
    rng = np.random.default_rng(spec.seed)
    rows = _base_ellipses(spec, rng)
    phase_coef = rng.normal(0, spec.phase_ramp_scale, size=6) * np.array([1, 1, 1, 0.5, 0.5, 0.5])
    bias_coef = rng.normal(0, 0.08, size=3)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    bias = 1.0 + bias_coef[0] * xx + bias_coef[1] * yy + bias_coef[2] * xx * yy

    mags = np.empty((num_slices, h, w))
    phases = np.empty((num_slices, h, w))
    for s in range(num_slices):
        z = 0.0 if num_slices == 1 else 2 * s / (num_slices - 1) - 1
        srng = np.random.default_rng(derive_seed(spec.seed, s))
        jitter = srng.normal(0, 1, size=(len(rows), 4)) * np.array([0.01, 0.01, 0.02, 0.02])
        mags[s] = _render_slice(rows, yy, xx, z, jitter) * bias
        c = phase_coef
        phases[s] = (c[0] + c[1] * xx + c[2] * yy + c[3] * xx * yy + c[4] * xx ** 2 + c[5] * yy ** 2
                     + 0.05 * z * (xx + yy))
    if mags.max() <= 0:
        raise ValueError("phantom rendered empty; check PhantomSpec ranges")
    mags /= mags.max()
    peak = np.unravel_index(np.argmax(mags), mags.shape)
    phases -= phases[peak]  # peak pixel is exactly 1 + 0j
    vol = (mags * np.exp(1j * phases)).astype(np.complex64)
    vol = _renormalize_complex64(vol)
    return Volume(volume_id or f"{spec.family}-{spec.seed}", spec.family, split, vol)


def _renormalize_complex64(vol: np.ndarray) -> np.ndarray:
    # The peak pixel is exactly 1+0j; plateau pixels may round a hair above 1.
    for _ in range(16):
        over = np.abs(vol) > 1
        if not over.any():
            return vol
        vol[over] *= np.float32(1 - 2 ** -23)
    raise ArithmeticError("could not normalize phantom peak magnitude to exactly 1")


def synthesize_dataset(seed: int, dims: tuple[int, int] = (64, 64), num_slices: int = 8,
                       counts: dict[str, Sequence[int]] | None = None) -> list[Volume]:
    """Volumes for both families; ``counts`` maps family -> (train, val, test) volume counts."""
    if counts is None:
        counts = {"A": (60, 8, 8), "B": (16, 4, 4)}
    volumes = []
    for fi, family in enumerate(FAMILIES):
        for si, split in enumerate(SPLITS):
            for i in range(counts.get(family, (0, 0, 0))[si]):
                spec = PhantomSpec.default(family, derive_seed(seed, fi, si, i))
                volumes.append(generate_volume(spec, dims, num_slices, f"{family}-{split}-{i:03d}", split))
    return volumes


def select(volumes: Iterable[Volume], family: str | None = None, split: str | None = None) -> list[Volume]:
    return [v for v in volumes
            if (family is None or v.family == family) and (split is None or v.split == split)]


# -- CKV1 I/O ------------------------------------------------------------------

_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected (CRC-64/XZ)
_CRC64_TABLE = []
for _i in range(256):
    _c = _i
    for _ in range(8):
        _c = (_c >> 1) ^ _CRC64_POLY if _c & 1 else _c >> 1
    _CRC64_TABLE.append(_c)
del _i, _c


def crc64(data: bytes) -> int:
    """CRC-64/XZ; crc64(b"123456789") == 0x995DC9BBDF1939FA."""
    crc = 0xFFFFFFFFFFFFFFFF
    table = _CRC64_TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


@dataclass
class ManifestEntry:
    volume_id: str
    family: str
    split: str
    offset: int
    length: int
    checksum: int


@dataclass
class DatasetManifest:
    height: int
    width: int
    entries: list[ManifestEntry] = field(default_factory=list)
    version: int = CKV_VERSION

    def to_text(self) -> str:
        lines = [f"format=CKV1", f"version={self.version}", f"height={self.height}",
                 f"width={self.width}", f"num_volumes={len(self.entries)}"]
        for i, e in enumerate(self.entries):
            lines.append(f"volume.{i}={e.volume_id},{e.family},{e.split},{e.offset},{e.length},{e.checksum:016x}")
        return "\n".join(lines) + "\n"


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest")


def write_dataset(volumes: Sequence[Volume], path) -> DatasetManifest:
    shapes = {v.shape for v in volumes}
    if len(shapes) > 1:
        raise ValueError(f"volumes must share dimensions, got {sorted(shapes)}")
    h, w = shapes.pop() if shapes else (0, 0)
    chunks = [CKV_MAGIC, struct.pack("<IIII", CKV_VERSION, h, w, len(volumes))]
    offset = sum(len(c) for c in chunks)
    manifest = DatasetManifest(h, w)
    for v in volumes:
        ident = v.volume_id.encode("utf-8")
        head = struct.pack("<I", len(ident)) + ident + struct.pack(
            "<BBI", FAMILIES.index(v.family), SPLITS.index(v.split), v.num_slices)
        payload = np.ascontiguousarray(v.slices, dtype="<c8").tobytes()
        checksum = crc64(payload)
        chunks += [head, payload, struct.pack("<Q", checksum)]
        manifest.entries.append(ManifestEntry(v.volume_id, v.family, v.split, offset + len(head), len(payload),
                                              checksum))
        offset += len(head) + len(payload) + 8
    Path(path).write_bytes(b"".join(chunks))
    manifest_path(path).write_text(manifest.to_text(), encoding="utf-8")
    return manifest


def read_dataset(path) -> list[Volume]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"{path}: file ends at byte {len(buf)}, needed {pos + n}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != CKV_MAGIC:
        raise FormatError(f"{path}: not a CKV1 dataset file")
    version, h, w, count = struct.unpack("<IIII", take(16))
    if version != CKV_VERSION:
        raise VersionError(f"{path}: unsupported version {version} (expected {CKV_VERSION})")
    volumes = []
    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4))
        volume_id = take(id_len).decode("utf-8")
        family, split, num_slices = struct.unpack("<BBI", take(6))
        if family >= len(FAMILIES) or split >= len(SPLITS):
            raise FormatError(f"{path}: bad family/split code in volume {volume_id!r}")
        payload = take(num_slices * h * w * 8)
        (checksum,) = struct.unpack("<Q", take(8))
        if crc64(payload) != checksum:
            raise ChecksumError(f"{path}: checksum mismatch in volume {volume_id!r}")
        slices = np.frombuffer(payload, dtype="<c8").reshape(num_slices, h, w).astype(np.complex64)
        volumes.append(Volume(volume_id, FAMILIES[family], SPLITS[split], slices))
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return volumes


# -- undersampling -------------------------------------------------------------

def volume_coils(volume: Volume, num_coils: int, coil_seed: int = 0) -> CoilSet:
    h, w = volume.shape
    return simulate_coils(num_coils, h, w, derive_seed(coil_seed, volume.volume_id))


@dataclass
class UndersampledVolume:
    volume_id: str
    acceleration: float
    mask: SamplingMask
    coil_images: np.ndarray  # (S, C, H, W) s_c * x, the per-coil complex ground truth
    kspace: np.ndarray       # (S, C, H, W) masked (optionally noisy) measurements y
    zero_filled: np.ndarray  # (S, C, H, W) x_u = ifft2c(y)
    target: np.ndarray       # (S, H, W) RSS magnitude ground truth |x|


def make_undersampled_pair(volume: Volume, acceleration: float, mask_kind: str, coilset: CoilSet,
                           seed: int, snr_db: float | None = None) -> UndersampledVolume:
    """Undersample every slice of ``volume`` with one shared mask.

    The mask depends only on (seed, volume_id, acceleration, mask_kind).
    """
    if coilset.shape != volume.shape:
        raise ValueError(f"coil maps {coilset.shape} do not match volume {volume.shape}")
    mask = make_mask(mask_kind, volume.shape[1], acceleration,
                     derive_seed(seed, volume.volume_id, int(round(acceleration * 1000)), mask_kind))
    x = volume.slices.astype(np.complex128)
    coil_images = coilset.sensitivities[None] * x[:, None]
    y = apply_mask(fft2c(coil_images), mask)
    if snr_db is not None and not math.isinf(snr_db):
        for s in range(y.shape[0]):
            y[s] = add_noise_at_snr(y[s], snr_db, derive_seed(seed, volume.volume_id, s, "noise"),
                                    sampled=np.broadcast_to(mask.kept, y[s].shape))
    return UndersampledVolume(volume.volume_id, float(acceleration), mask, coil_images, y, ifft2c(y),
                              coil_combine_rss(coil_images, axis=1))
