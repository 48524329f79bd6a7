import numpy as np
import pytest

from _gradcheck import numeric_grad, rel_err
from clmri.autodiff import Tensor
from clmri.config import TrainConfig
from clmri.kspace import coil_combine_rss, fft2c, make_mask
from clmri.models import CascadeDC, DCConfig, FeatureExtractor, PlainCNN
from clmri.phantoms import derive_seed, make_undersampled_pair, select, synthesize_dataset, volume_coils
from clmri.training import evaluate_reconstruction, infer, recon_loss, train_reconstructor


@pytest.fixture(scope="module")
def vols():
    return synthesize_dataset(1, (32, 32), 2, {"A": (3, 1, 1)})


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=4, num_coils=2, accelerations=(4.0, 8.0))
    base.update(kw)
    return TrainConfig(**base)


def perturbed_extractor(seed):
    T = FeatureExtractor(seed=seed, width=4)
    rng = np.random.default_rng(seed)
    for p in T.parameters():
        p.data = p.data + 0.05 * rng.standard_normal(p.shape)
    return T


class TestLoss:
    def test_zero_on_match_and_all_zero_prediction(self):
        rng = np.random.default_rng(0)
        t = rng.standard_normal((2, 2, 4, 4))
        assert recon_loss(Tensor(t), t).item() == 0.0
        assert recon_loss(Tensor(np.zeros_like(t)), t).item() == pytest.approx(np.mean(t ** 2), rel=1e-14)
        assert recon_loss(Tensor(np.zeros_like(t)), t, "l1").item() == pytest.approx(np.mean(np.abs(t)), rel=1e-14)
        with pytest.raises(ValueError):
            recon_loss(Tensor(t), t, "huber")
        with pytest.raises(ValueError):
            recon_loss(Tensor(t[:1]), t)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        t = rng.standard_normal((2, 2, 3, 3))
        x = Tensor(rng.standard_normal(t.shape), requires_grad=True)
        recon_loss(x, t).backward()
        assert rel_err(x.grad, numeric_grad(lambda: recon_loss(Tensor(x.data), t).item(), x.data)) < 1e-6


class TestTraining:
    def test_initial_val_loss_is_zero_filled_baseline(self, vols):
        cfg = small_cfg(epochs=1, dc_lambda=0.0)
        _, rec = train_reconstructor(CascadeDC(seed=0, width=4, dc=DCConfig(0.0)), None, vols, cfg)
        # the identity-initialized cascade leaves zero-filled inputs unchanged, so compare against them directly
        total, count = 0.0, 0
        for vol in select(vols, "A", "val"):
            maps = volume_coils(vol, cfg.num_coils, cfg.coil_seed).sensitivities
            for acc in cfg.accelerations:
                seed = derive_seed(cfg.seed, "val-mask", vol.volume_id, int(round(acc * 1000)), cfg.mask_kind)
                mask = make_mask(cfg.mask_kind, 32, acc, seed)
                for s in range(vol.num_slices):
                    for c in range(cfg.num_coils):
                        img = maps[c] * vol.slices[s].astype(np.complex128)
                        zf = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(
                            np.where(mask.kept, fft2c(img), 0)), norm="ortho"))
                        total += np.mean(np.concatenate([(zf - img).real, (zf - img).imag]) ** 2)
                        count += 1
        assert rec.initial_val_loss == pytest.approx(total / count, rel=1e-10)

    def test_loss_decreases_and_is_deterministic(self, vols):
        cfg = small_cfg(epochs=3)
        _, a = train_reconstructor(CascadeDC(seed=0, width=4), None, vols, cfg)
        _, b = train_reconstructor(CascadeDC(seed=0, width=4), None, vols, cfg)
        assert a == b
        assert a.val_loss[-1] < a.initial_val_loss
        assert a.epochs_to_reach(a.initial_val_loss) == 1
        assert a.epochs_to_reach(-1.0) is None

    def test_frozen_extractor_is_untouched(self, vols):
        T = perturbed_extractor(3)
        before = [p.data.copy() for p in T.parameters()]
        train_reconstructor(CascadeDC(seed=0, width=4), T, vols, small_cfg(mode="with_cl", extractor="T.clmp"))
        for p, q in zip(before, T.parameters()):
            assert p.tobytes() == q.data.tobytes()
            assert not q.requires_grad

    def test_unfrozen_extractor_moves(self, vols):
        T = perturbed_extractor(3)
        before = [p.data.copy() for p in T.parameters()]
        cfg = small_cfg(mode="with_cl", extractor="T.clmp", freeze_extractor=False, epochs=1)
        train_reconstructor(CascadeDC(seed=0, width=4), T, vols, cfg)
        assert any(not np.array_equal(p, q.data) for p, q in zip(before, T.parameters()))

    def test_identity_extractor_matches_baseline(self, vols):
        # at init T is the identity, so with_cl and without_cl see identical inputs
        _, a = train_reconstructor(PlainCNN(seed=0, width=4), None, vols, small_cfg(epochs=1))
        _, b = train_reconstructor(PlainCNN(seed=0, width=4), FeatureExtractor(seed=0, width=4), vols,
                                   small_cfg(epochs=1, mode="with_cl", extractor="T.clmp"))
        assert a.train_loss == b.train_loss and a.val_loss == b.val_loss

    def test_configuration_errors(self, vols):
        with pytest.raises(ValueError):
            train_reconstructor(CascadeDC(), None, vols, small_cfg(mode="with_cl", extractor="T.clmp"))
        with pytest.raises(ValueError):
            train_reconstructor(CascadeDC(), None, vols, small_cfg(family="B"))


class TestInference:
    def test_fully_sampled_recovers_ground_truth(self, vols):
        vol = vols[0]
        pair = make_undersampled_pair(vol, 1.0, "random", volume_coils(vol, 3), seed=0)
        for model in (CascadeDC(seed=0, width=4), PlainCNN(seed=0, width=4)):
            out = infer(FeatureExtractor(seed=0, width=4), model, pair.zero_filled[0], pair.kspace[0], pair.mask)
            assert np.all(out >= 0)
            np.testing.assert_allclose(out, pair.target[0], atol=1e-9)

    def test_hard_dc_output_keeps_measurements(self, vols):
        vol = vols[0]
        pair = make_undersampled_pair(vol, 4.0, "random", volume_coils(vol, 2), seed=0)
        G = CascadeDC(seed=0, width=4, dc=DCConfig(hard=True))
        rng = np.random.default_rng(0)
        for p in G.parameters():
            p.data = p.data + 0.05 * rng.standard_normal(p.shape)
        from clmri.training import forward_pipeline
        from clmri.models import from_two_channel, to_two_channel
        out = forward_pipeline(G, None, to_two_channel(pair.zero_filled[0]), pair.kspace[0], pair.mask.kept)
        k = fft2c(from_two_channel(out.data))
        np.testing.assert_allclose(k[..., pair.mask.kept], pair.kspace[0][..., pair.mask.kept], atol=1e-9)

    def test_evaluation_of_identity_model_is_zero_filled(self, vols):
        test = select(vols, "A", "test")
        res = evaluate_reconstruction(None, PlainCNN(seed=0, width=4), test, 4.0, num_coils=2)
        vol = test[0]
        pair = make_undersampled_pair(vol, 4.0, "random", volume_coils(vol, 2), 0)
        zf = coil_combine_rss(pair.zero_filled, axis=1)
        from clmri.analysis import nmse
        assert [r.slice for r in res] == [0, 1]
        assert res[0].nmse == pytest.approx(nmse(zf[0], pair.target[0]), rel=1e-12)
