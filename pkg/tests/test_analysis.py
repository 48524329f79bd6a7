import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from clmri.analysis import (DegenerateRangeWarning, aggregate, alignment, entropy_hist, mutual_info_hist, nmse,
                            pair_distance_histogram, pair_distances, psnr, ssim, summarize, uniformity)


def ssim_oracle(a, b, L, win=7):
    """Window-by-window evaluation of the SSIM formula with explicit sums."""
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    n = win * win
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa = a[i:i + win, j:j + win].ravel().tolist()
            pb = b[i:i + win, j:j + win].ravel().tolist()
            ma, mb = sum(pa) / n, sum(pb) / n
            va = sum((x - ma) ** 2 for x in pa) / (n - 1)
            vb = sum((y - mb) ** 2 for y in pb) / (n - 1)
            cov = sum((x - ma) * (y - mb) for x, y in zip(pa, pb)) / (n - 1)
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


class TestNMSEPSNR:
    def test_nmse_identities(self):
        v = np.random.default_rng(0).uniform(0, 1, (4, 16, 16))
        assert nmse(v, v) == 0.0
        assert nmse(2 * v, v) == 1.0
        assert nmse(np.zeros_like(v), v) == 1.0
        with pytest.raises(ValueError):
            nmse(v, np.zeros_like(v))

    def test_nmse_brute_force(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
        num = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel()))
        den = sum(y ** 2 for y in b.ravel())
        assert nmse(a, b) == pytest.approx(num / den, rel=1e-14)

    def test_psnr_identities(self):
        v = np.zeros((10, 10))
        v[0, 0] = 1.0
        noisy = v + 0.1  # MSE = 0.01
        assert psnr(noisy, v) == pytest.approx(20.0, abs=1e-12)
        assert psnr(v, v) == math.inf
        rng = np.random.default_rng(2)
        a, b = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
        assert psnr(3.5 * a, 3.5 * b) == pytest.approx(psnr(a, b), abs=1e-12)

    def test_psnr_brute_force(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert psnr(a, b) == pytest.approx(10 * math.log10(b.max() ** 2 / mse), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nmse(np.ones(3), np.ones(4))
        with pytest.raises(ValueError):
            psnr(np.ones(3), np.ones(4))


class TestSSIM:
    def test_identical(self):
        m = np.random.default_rng(0).uniform(0, 1, (16, 16))
        assert abs(ssim(m, m) - 1.0) < 1e-12

    def test_equal_constants(self):
        m = np.full((16, 16), 0.4)
        assert ssim(m, m, data_range=1.0) == pytest.approx(1.0, abs=1e-15)

    def test_matches_window_oracle(self):
        rng = np.random.default_rng(1)
        m = rng.uniform(0, 1, (16, 16))
        noisy = m + 0.1 * rng.standard_normal((16, 16))
        assert abs(ssim(noisy, m) - ssim_oracle(noisy, m, m.max())) < 1e-9

    def test_random_pairs_match_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            a, b = rng.uniform(0, 2, (16, 16)), rng.uniform(0, 2, (16, 16))
            assert abs(ssim(a, b, 2.0) - ssim_oracle(a, b, 2.0)) < 1e-9

    def test_matches_scikit_image(self):
        skm = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(3)
        m = rng.uniform(0, 1, (32, 24))
        noisy = np.clip(m + 0.05 * rng.standard_normal(m.shape), 0, None)
        ref = skm.structural_similarity(noisy, m, win_size=7, data_range=m.max(), gaussian_weights=False,
                                        use_sample_covariance=True)
        assert abs(ssim(noisy, m) - ref) < 1e-9

    def test_volume_uses_volume_max(self):
        rng = np.random.default_rng(4)
        v = rng.uniform(0, 1, (3, 16, 16))
        v[1] *= 0.2
        w = v + 0.05 * rng.standard_normal(v.shape)
        assert ssim(w, v) == pytest.approx(np.mean([ssim(w[i], v[i], v.max()) for i in range(3)]), abs=1e-15)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.ones((6, 16)), np.ones((6, 16)))

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (9, 9), elements=st.floats(0, 1)), arrays(np.float64, (9, 9), elements=st.floats(0, 1)))
    def test_bounded(self, a, b):
        assert -1 - 1e-12 <= ssim(a, b, 1.0) <= 1 + 1e-12


class TestAlignmentUniformity:
    def test_alignment_examples(self):
        z = np.random.default_rng(0).standard_normal((5, 3))
        assert alignment((z, z.copy())) == 0.0
        assert alignment([(np.zeros(2), np.array([2.0, 0.0]))]) == -4.0
        a, b = z, z + 1
        perm = np.random.default_rng(1).permutation(5)
        assert alignment((a[perm], b[perm])) == pytest.approx(alignment((a, b)), abs=1e-15)
        with pytest.raises(ValueError):
            alignment([])
        with pytest.raises(ValueError):
            alignment((a, b), alpha=0)

    def test_uniformity_examples(self):
        z = np.tile(np.array([1.0, 2.0, 3.0]), (4, 1))
        assert uniformity(z) == pytest.approx(0.0, abs=1e-12)
        assert uniformity(np.array([[1.0, 0.0], [-1.0, 0.0]])) == pytest.approx(-8.0, abs=1e-12)
        with pytest.raises(ValueError):
            uniformity(np.ones((1, 3)))
        with pytest.raises(ValueError):
            uniformity(np.ones((2, 3)), beta=-1)

    def test_uniformity_brute_force_and_properties(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((7, 5))
        u = z / np.linalg.norm(z, axis=1, keepdims=True)
        terms = [math.exp(-2 * np.sum((u[i] - u[j]) ** 2)) for i, j in itertools.combinations(range(7), 2)]
        assert uniformity(z) == pytest.approx(math.log(sum(terms) / len(terms)), abs=1e-12)
        assert uniformity(z[::-1]) == pytest.approx(uniformity(z), abs=1e-12)
        assert uniformity(z) <= 0
        assert uniformity(np.vstack([z, z[2:3]])) >= uniformity(z)
        # invariant to per-vector scaling because latents are normalized first
        assert uniformity(z * rng.uniform(0.1, 5, (7, 1))) == pytest.approx(uniformity(z), abs=1e-12)


class TestPairHistogram:
    def test_identical_latents_fill_zero_bin(self):
        z = np.repeat(np.random.default_rng(0).standard_normal((6, 1, 2, 4, 4)), 4, axis=1)
        hist = pair_distance_histogram(z, (2, 4, 6, 8), edges=np.linspace(0, 1, 11))
        assert sorted(hist) == ["2-4", "2-6", "2-8", "4-6", "4-8", "6-8"]
        for h in hist.values():
            assert h.counts[0] == 6 and h.counts.sum() == 6

    def test_counts_and_distances(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((9, 3, 2, 4, 4))
        hist = pair_distance_histogram(z, (2, 4, 8))
        assert sorted(hist) == ["2-4", "2-8", "4-8"]
        assert all(h.counts.sum() == 9 for h in hist.values())
        d = pair_distances(z, (2, 4, 8))["2-8"]
        np.testing.assert_allclose(d, [np.linalg.norm(z[s, 0] - z[s, 2]) for s in range(9)])

    def test_needs_two_accelerations(self):
        with pytest.raises(ValueError):
            pair_distances(np.ones((3, 1, 4)), (4,))


class TestMutualInformation:
    def test_self_information_is_entropy(self):
        x = np.random.default_rng(0).uniform(0, 1, (3, 32, 32))
        assert abs(mutual_info_hist(x, x) - entropy_hist(x)) < 1e-12

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (2, 32, 32))
        b = a ** 2 + 0.3 * rng.uniform(0, 1, a.shape)
        ab, ba = mutual_info_hist(a, b), mutual_info_hist(b, a)
        assert abs(ab - ba) < 1e-12
        assert -1e-12 <= ab <= min(entropy_hist(a), entropy_hist(b)) + 1e-12

    def test_independent_noise(self):
        rng = np.random.default_rng(2)
        x, y = rng.uniform(size=(1000, 1000)), rng.uniform(size=(1000, 1000))
        assert mutual_info_hist(x, y, 32) < 0.01

    def test_brute_force_joint_histogram(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 1, (16, 16))
        b = rng.uniform(0, 1, (16, 16)) + 0.5 * a
        bins = 4

        def q(img):
            lo, hi = img.min(), img.max()
            return [min(int((v - lo) / (hi - lo) * bins), bins - 1) for v in img.ravel()]

        qa, qb = q(a), q(b)
        n = len(qa)
        joint = {}
        for i, j in zip(qa, qb):
            joint[(i, j)] = joint.get((i, j), 0) + 1
        pa = {i: qa.count(i) / n for i in set(qa)}
        pb = {j: qb.count(j) / n for j in set(qb)}
        ref = sum(c / n * math.log((c / n) / (pa[i] * pb[j])) for (i, j), c in joint.items())
        assert abs(mutual_info_hist(a, b, bins) - ref) < 1e-12

    def test_constant_image_warns_and_gives_zero(self):
        with pytest.warns(DegenerateRangeWarning):
            val = mutual_info_hist(np.ones((8, 8)), np.random.default_rng(4).uniform(size=(8, 8)))
        assert val == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            mutual_info_hist(np.ones((4, 4)), np.ones((4, 4)), bins=1)
        with pytest.raises(ValueError):
            mutual_info_hist(np.ones((4, 4)), np.ones((4, 5)))


class TestAggregates:
    def test_summary_recomputable(self):
        rows = [{"mode": m, "acceleration": a, "nmse": v, "psnr": 2 * v, "ssim": v / 3}
                for m, a, v in [("x", 4, 0.1), ("x", 4, 0.3), ("y", 4, 0.2), ("x", 8, 0.5)]]
        out = summarize(rows, ["mode", "acceleration"])
        first = next(r for r in out if r["mode"] == "x" and r["acceleration"] == 4)
        assert first["n"] == 2
        assert first["nmse_mean"] == aggregate([0.1, 0.3])[0]
        assert first["nmse_std"] == pytest.approx(0.1, abs=1e-15)
