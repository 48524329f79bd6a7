"""Run configurations. Every field maps to a ``key=value`` line in config files."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    size: int = 64
    num_slices: int = 8
    family_a: tuple[int, ...] = (60, 8, 8)
    family_b: tuple[int, ...] = (16, 4, 4)

    def counts(self) -> dict[str, tuple[int, ...]]:
        return {"A": self.family_a, "B": self.family_b}


@dataclass(frozen=True)
class PretrainConfig:
    dataset: str = ""
    family: str = "A"
    accelerations: tuple[float, ...] = (2.0, 4.0, 6.0, 8.0)
    tau: float = 0.5
    epochs: int = 50
    batch_size: int = 4
    items_per_volume: int = 1
    learning_rate: float = 1e-3
    rho: float = 0.99
    eps: float = 1e-8
    mask_kind: str = "random"
    fresh_masks: bool = True
    num_coils: int = 4
    coil_seed: int = 0
    seed: int = 0

    def validate(self) -> None:
        if len(set(self.accelerations)) != len(self.accelerations) or len(self.accelerations) < 2:
            raise ValueError("pretraining needs at least two distinct accelerations")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so that negatives exist")
        if self.epochs < 0 or self.items_per_volume < 1:
            raise ValueError("epochs must be >= 0 and items_per_volume >= 1")


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = ""
    family: str = "A"
    mode: str = "without_cl"
    model: str = "cascade"
    extractor: str = ""
    freeze_extractor: bool = True
    accelerations: tuple[float, ...] = (4.0, 8.0)
    epochs: int = 12
    batch_size: int = 8
    items_per_slice: int = 1
    learning_rate: float = 1e-3
    rho: float = 0.99
    eps: float = 1e-8
    loss: str = "mse"
    dc_lambda: float = 1.0
    hard_dc: bool = False
    mask_kind: str = "random"
    num_coils: int = 4
    coil_seed: int = 0
    val_accelerations: tuple[float, ...] = ()
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("with_cl", "without_cl"):
            raise ValueError(f"mode must be with_cl or without_cl, got {self.mode!r}")
        if self.model not in ("plain", "cascade"):
            raise ValueError(f"model must be plain or cascade, got {self.model!r}")
        if self.loss not in ("mse", "l1"):
            raise ValueError(f"loss must be mse or l1, got {self.loss!r}")
        if self.mode == "with_cl" and not self.extractor:
            raise ValueError("with_cl mode requires a pretrained extractor checkpoint")
        if not self.accelerations:
            raise ValueError("at least one training acceleration is required")
