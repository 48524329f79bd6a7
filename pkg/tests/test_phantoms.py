import struct

import numpy as np
import pytest

from clmri.analysis import nmse
from clmri.kspace import coil_combine_rss
from clmri.phantoms import (ChecksumError, FormatError, PhantomSpec, TruncatedError, VersionError, crc64,
                            derive_seed, generate_volume, make_undersampled_pair, manifest_path, read_dataset,
                            select, synthesize_dataset, volume_coils, write_dataset)


@pytest.fixture(scope="module")
def small():
    return synthesize_dataset(5, (32, 32), 3, {"A": (3, 2, 2), "B": (2, 1, 1)})


class TestGeneration:
    def test_deterministic(self):
        spec = PhantomSpec.default("A", 11)
        a, b = generate_volume(spec, (32, 32), 4), generate_volume(spec, (32, 32), 4)
        assert a.slices.tobytes() == b.slices.tobytes()

    def test_peak_is_exactly_one(self, small):
        for v in small:
            assert np.abs(v.slices).max() == 1.0
            assert v.slices.dtype == np.complex64

    def test_families_differ(self):
        a = generate_volume(PhantomSpec.default("A", 3), (32, 32), 2)
        b = generate_volume(PhantomSpec.default("B", 3), (32, 32), 2)
        assert crc64(a.slices.tobytes()) != crc64(b.slices.tobytes())

    def test_slices_are_coherent_but_distinct(self):
        v = generate_volume(PhantomSpec.default("A", 4), (64, 64), 8)
        adjacent = nmse(np.abs(v.slices[4]), np.abs(v.slices[3]))
        assert 0 < adjacent < 0.5
        assert not np.allclose(v.slices[0].imag, 0)  # phase is nontrivial

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            generate_volume(PhantomSpec.default("A", 0), (30, 32), 2)
        with pytest.raises(ValueError):
            PhantomSpec("A", 2, (0.1, 0.5), (0.1, 0.2), 1.0, 0)
        with pytest.raises(ValueError):
            PhantomSpec("C", 4, (0.1, 0.5), (0.1, 0.2), 1.0, 0)

    def test_split_hygiene_and_counts(self, small):
        ids = [v.volume_id for v in small]
        assert len(ids) == len(set(ids))
        assert len(select(small, "A", "train")) == 3 and len(select(small, "B", "test")) == 1

    def test_dataset_is_pure_function_of_seed(self, small):
        again = synthesize_dataset(5, (32, 32), 3, {"A": (3, 2, 2), "B": (2, 1, 1)})
        assert all(a.slices.tobytes() == b.slices.tobytes() for a, b in zip(small, again))
        other = synthesize_dataset(6, (32, 32), 3, {"A": (1, 0, 0)})
        assert other[0].slices.tobytes() != small[0].slices.tobytes()

    def test_derive_seed_is_stable(self):
        assert derive_seed(1, "x", 2) == derive_seed(1, "x", 2)
        assert derive_seed(1, "x", 2) != derive_seed(1, "y", 2)
        assert 0 <= derive_seed(123) < 2 ** 63


class TestCKV:
    def test_crc_check_value(self):
        assert crc64(b"123456789") == 0x995DC9BBDF1939FA

    def test_roundtrip(self, small, tmp_path):
        path = tmp_path / "d.ckv"
        manifest = write_dataset(small, path)
        back = read_dataset(path)
        assert [v.volume_id for v in back] == [v.volume_id for v in small]
        for a, b in zip(small, back):
            assert (a.family, a.split) == (b.family, b.split)
            assert a.slices.tobytes() == b.slices.tobytes()
        text = manifest_path(path).read_text()
        assert f"num_volumes={len(small)}" in text
        e = manifest.entries[0]
        raw = path.read_bytes()
        assert crc64(raw[e.offset:e.offset + e.length]) == e.checksum

    def test_header_layout(self, small, tmp_path):
        path = tmp_path / "d.ckv"
        write_dataset(small[:1], path)
        raw = path.read_bytes()
        assert raw[:4] == b"CKV1"
        assert struct.unpack("<IIII", raw[4:20]) == (1, 32, 32, 1)

    def test_corruption_detected(self, small, tmp_path):
        path = tmp_path / "d.ckv"
        manifest = write_dataset(small[:2], path)
        raw = bytearray(path.read_bytes())
        raw[manifest.entries[1].offset + 17] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            read_dataset(path)

    def test_version_truncation_format(self, small, tmp_path):
        path = tmp_path / "d.ckv"
        write_dataset(small[:1], path)
        raw = path.read_bytes()
        (tmp_path / "v.ckv").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
        with pytest.raises(VersionError):
            read_dataset(tmp_path / "v.ckv")
        (tmp_path / "t.ckv").write_bytes(raw[:-20])
        with pytest.raises(TruncatedError):
            read_dataset(tmp_path / "t.ckv")
        (tmp_path / "f.ckv").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            read_dataset(tmp_path / "f.ckv")
        (tmp_path / "x.ckv").write_bytes(raw + b"\0")
        with pytest.raises(FormatError):
            read_dataset(tmp_path / "x.ckv")

    def test_empty(self, tmp_path):
        manifest = write_dataset([], tmp_path / "e.ckv")
        assert manifest.entries == []
        assert read_dataset(tmp_path / "e.ckv") == []


class TestUndersampling:
    def test_fully_sampled_reproduces_ground_truth(self, small):
        vol = small[0]
        pair = make_undersampled_pair(vol, 1.0, "random", volume_coils(vol, 4), seed=0)
        np.testing.assert_allclose(pair.zero_filled, pair.coil_images, atol=1e-10)
        np.testing.assert_allclose(coil_combine_rss(pair.zero_filled, axis=1), np.abs(vol.slices.astype(np.complex128)), atol=1e-9)
        np.testing.assert_allclose(pair.target, np.abs(vol.slices.astype(np.complex128)), atol=1e-9)

    def test_one_mask_per_volume(self, small):
        vol = small[1]
        pair = make_undersampled_pair(vol, 4.0, "random", volume_coils(vol, 2), seed=3)
        for s in range(vol.num_slices):
            for c in range(2):
                assert np.all(pair.kspace[s, c][:, ~pair.mask.kept] == 0)
        again = make_undersampled_pair(vol, 4.0, "random", volume_coils(vol, 2), seed=3)
        np.testing.assert_array_equal(again.mask.kept, pair.mask.kept)

    def test_aliasing_grows_with_acceleration(self):
        vol = generate_volume(PhantomSpec.default("A", 2), (64, 64), 2, "fixed")
        coils = volume_coils(vol, 4)
        err = {}
        for acc in (2.0, 4.0):
            pair = make_undersampled_pair(vol, acc, "random", coils, seed=0)
            err[acc] = nmse(coil_combine_rss(pair.zero_filled, axis=1), np.abs(vol.slices))
        assert 0 < err[2.0] < err[4.0]

    def test_noise_only_changes_sampled_entries(self, small):
        vol = small[0]
        coils = volume_coils(vol, 2)
        clean = make_undersampled_pair(vol, 4.0, "random", coils, seed=0)
        noisy = make_undersampled_pair(vol, 4.0, "random", coils, seed=0, snr_db=20.0)
        kept = clean.mask.kept
        assert np.all(noisy.kspace[..., ~kept] == 0)
        assert not np.allclose(noisy.kspace[..., kept], clean.kspace[..., kept])

    def test_coil_mismatch(self, small):
        from clmri.kspace import simulate_coils
        with pytest.raises(ValueError):
            make_undersampled_pair(small[0], 4.0, "random", simulate_coils(2, 16, 16, 0), seed=0)
