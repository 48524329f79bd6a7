import numpy as np
import pytest

from clmri.config import PretrainConfig, TrainConfig
from clmri.serialization import (CheckpointError, ConfigError, apply_overrides, config_path_for, load_checkpoint,
                                 read_config, save_checkpoint, write_config)


def test_checkpoint_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.weight": rng.standard_normal((3, 2, 3, 3)), "a.bias": rng.standard_normal(3), "s": np.array(2.5)}
    path = tmp_path / "m.clmp"
    save_checkpoint(params, path, {"epochs": 3, "tau": 0.5})
    back = load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
    assert read_config(config_path_for(path)) == {"epochs": "3", "tau": "0.5"}


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.clmp"
    save_checkpoint({"w": np.ones(4)}, path)
    raw = path.read_bytes()
    for name, data in (("bad", b"NOPE" + raw[4:]), ("short", raw[:-3]), ("long", raw + b"\0")):
        (tmp_path / name).write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


def test_config_roundtrip_through_dataclass(tmp_path):
    cfg = TrainConfig(dataset="d.ckv", accelerations=(4.0, 8.0), hard_dc=True, dc_lambda=0.25, epochs=7)
    path = tmp_path / "t.cfg"
    from dataclasses import asdict
    write_config(asdict(cfg), path)
    assert apply_overrides(TrainConfig(), read_config(path)) == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        apply_overrides(PretrainConfig(), {"nonsense": "1"})
    with pytest.raises(ConfigError):
        apply_overrides(PretrainConfig(), {"epochs": "many"})
    (tmp_path / "x.cfg").write_text("# comment\nno equals sign here\n")
    with pytest.raises(ConfigError):
        read_config(tmp_path / "x.cfg")
    with pytest.raises(FileNotFoundError):
        read_config(tmp_path / "missing.cfg")
