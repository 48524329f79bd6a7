"""CLMP parameter checkpoints and plain-text key=value configs."""

from __future__ import annotations

import dataclasses
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

CLMP_MAGIC = b"CLMP"


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def save_checkpoint(params: Mapping[str, np.ndarray], path, config: Mapping[str, Any] | None = None) -> None:
    """Write named float64 tensors; ``config`` goes to ``<path>.cfg`` when given."""
    path = Path(path)
    chunks = [CLMP_MAGIC, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))
    if config is not None:
        write_config(config, config_path_for(path))


def config_path_for(checkpoint_path) -> Path:
    return Path(str(checkpoint_path) + ".cfg")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CLMP_MAGIC:
        raise CheckpointError(f"{path}: not a CLMP checkpoint")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return params


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def write_config(config: Mapping[str, Any], path) -> None:
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    lines = [f"{key}={format_value(value)}" for key, value in config.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config(path) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(raw: str, default: Any, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            item = type(default[0]) if default else float
            return tuple(_coerce(part.strip(), item(), key) for part in raw.split(","))
        if default is None:
            return raw or None
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def apply_overrides(cfg, values: Mapping[str, str]):
    """Return a copy of dataclass ``cfg`` with string ``values`` coerced to field types.

    Unknown keys are an error so that typos in config files surface.
    """
    fields = {f.name for f in dataclasses.fields(cfg)}
    unknown = sorted(set(values) - fields)
    if unknown:
        raise ConfigError(f"unknown config keys for {type(cfg).__name__}: {', '.join(unknown)}")
    updates = {key: _coerce(raw, getattr(cfg, key), key) for key, raw in values.items()}
    return dataclasses.replace(cfg, **updates)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
