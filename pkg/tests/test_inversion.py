import numpy as np
import pytest
import torch

from exedit import imaging, inversion
from exedit.backbone import Conditioning
from exedit.errors import ComputationError, ContractError

from .conftest import natural_image


@pytest.fixture(scope="module")
def null_cond(embedder):
    return Conditioning.null(embedder.embed_caption(""))


class TestInvert:
    def test_num_steps_matches_schedule(self, backbone, null_cond):
        inv = inversion.invert(backbone, natural_image("chelsea"), null_cond, num_steps=24)
        assert inv.num_steps == 24 == len(inv.schedule)
        assert all(b > a for a, b in zip(inv.schedule, inv.schedule[1:]))

    def test_single_step_inversion_finite(self, backbone, null_cond):
        inv = inversion.invert(backbone, natural_image("chelsea"), null_cond, num_steps=1)
        assert inv.schedule == [999]
        assert np.isfinite(inv.y_noise).all()

    def test_deterministic(self, backbone, null_cond):
        img = natural_image("coffee")
        a = inversion.invert(backbone, img, null_cond, num_steps=8)
        b = inversion.invert(backbone, img, null_cond, num_steps=8)
        assert np.array_equal(a.y_noise, b.y_noise)

    def test_non_work_size_input_resized_with_warning(self, backbone, null_cond, caplog):
        small = natural_image("chelsea").resize((128, 128))
        with caplog.at_level("WARNING"):
            inv = inversion.invert(backbone, small, null_cond, num_steps=4)
        assert "resizing" in caplog.text
        assert inv.y_noise.shape == (4, 64, 64)

    def test_divergence_reports_timestep(self, backbone, null_cond, monkeypatch):
        real = backbone.predict_eps

        def poisoned(x, t, tc, ic, taps=None):
            out = real(x, t, tc, ic, taps=taps)
            return out * float("nan") if t >= 500 else out

        monkeypatch.setattr(backbone, "predict_eps", poisoned)
        with pytest.raises(ComputationError, match="timestep"):
            inversion.invert(backbone, natural_image("chelsea"), null_cond, num_steps=8)


class TestReconstruct:
    def test_deterministic_pixels(self, backbone, null_cond):
        inv = inversion.invert(backbone, natural_image("chelsea"), null_cond, num_steps=8)
        a = inversion.reconstruct(backbone, inv, null_cond)
        b = inversion.reconstruct(backbone, inv, null_cond)
        assert np.array_equal(np.asarray(a), np.asarray(b))

    def test_gray_image_round_trip(self, backbone, null_cond, metric_suite):
        gray = imaging.to_image(np.full((512, 512, 3), 0.5, dtype=np.float32))
        inv = inversion.invert(backbone, gray, null_cond, num_steps=40)
        rec = inversion.reconstruct(backbone, inv, null_cond)
        assert metric_suite.ssim(rec, gray) > 0.8

    def test_schedule_beyond_train_steps_rejected(self, backbone, null_cond):
        inv = inversion.invert(backbone, natural_image("chelsea"), null_cond, num_steps=4)
        bad = inversion.InversionResult(
            y_noise=inv.y_noise, schedule=[0, 1, 2, 1000], source_image_id="x", num_steps=4
        )
        with pytest.raises(ContractError):
            inversion.reconstruct(backbone, bad, null_cond)


class TestInversionResultInvariants:
    def test_non_monotonic_schedule_rejected(self):
        with pytest.raises(ContractError):
            inversion.InversionResult(
                y_noise=np.zeros((4, 64, 64), np.float32), schedule=[5, 3], source_image_id="s", num_steps=2
            )

    def test_step_count_mismatch_rejected(self):
        with pytest.raises(ContractError):
            inversion.InversionResult(
                y_noise=np.zeros((4, 64, 64), np.float32), schedule=[1, 2], source_image_id="s", num_steps=3
            )

    def test_nonfinite_latent_rejected(self):
        bad = np.zeros((4, 64, 64), np.float32)
        bad[0, 0, 0] = np.inf
        with pytest.raises(ComputationError):
            inversion.InversionResult(y_noise=bad, schedule=[1], source_image_id="s", num_steps=1)


class TestCache:
    def test_round_trip_and_hit(self, backbone, null_cond, tmp_path):
        cache = inversion.InversionCache(tmp_path)
        img = natural_image("chelsea")
        result, hit = inversion.invert_cached(backbone, img, null_cond, 6, cache)
        assert not hit
        again, hit2 = inversion.invert_cached(backbone, img, null_cond, 6, cache)
        assert hit2
        assert np.array_equal(result.y_noise, again.y_noise)
        assert again.schedule == result.schedule

    def test_key_depends_on_steps_and_backbone(self, tmp_path):
        img = natural_image("coffee")
        k1 = inversion.InversionCache.key(img, 10, "b1")
        k2 = inversion.InversionCache.key(img, 12, "b1")
        k3 = inversion.InversionCache.key(img, 10, "b2")
        assert len({k1, k2, k3}) == 3
