"""
合成退化测试：闭式结果、极限情形、确定性与取值范围
"""

import math

import pytest
import torch

from conftest import MID_GRAY, smooth_image
from degradation_service import (
    ImagePair, add_gaussian_noise, apply_degradation, derive_seed, synth_blur, synth_haze, synth_lowlight, synth_rain,
)
from exceptions import DimensionError, ParameterError
from metrics import psnr
from schemas import NOISE_TEST_GRID, DegradationKind, DegradationSpec


def _gray(size: int = 128) -> torch.Tensor:
    return torch.full((3, size, size), MID_GRAY)


class TestGaussianNoise:

    def test_zero_sigma_is_identity(self):
        x = smooth_image(0)
        assert torch.equal(add_gaussian_noise(x, 0.0, seed=1), x)

    @pytest.mark.parametrize("sigma", [15.0, 25.0])
    def test_psnr_matches_closed_form(self, sigma):
        y = add_gaussian_noise(_gray(), sigma, seed=7)
        expected = 10 * math.log10(255.0 ** 2 / sigma ** 2)
        assert abs(psnr(y, _gray()) - expected) < 0.1

    def test_sigma_50_within_clamp_bias(self):
        # 中灰处 ±2.55σ 截断使 MSE 略小，PSNR 约偏高 0.08 dB
        y = add_gaussian_noise(_gray(), 50.0, seed=7)
        assert abs(psnr(y, _gray()) - 10 * math.log10(255.0 ** 2 / 50.0 ** 2)) < 0.15

    def test_deterministic_given_seed(self):
        x = smooth_image(1)
        assert torch.equal(add_gaussian_noise(x, 25.0, 3), add_gaussian_noise(x, 25.0, 3))
        assert not torch.equal(add_gaussian_noise(x, 25.0, 3), add_gaussian_noise(x, 25.0, 4))

    def test_negative_sigma(self):
        with pytest.raises(ParameterError) as exc:
            add_gaussian_noise(_gray(8), -1.0, 0)
        assert exc.value.field_name == "sigma"


class TestHaze:

    def test_tiny_beta_is_near_identity(self):
        x = smooth_image(2)
        assert (synth_haze(x, 1e-6, 0.8, seed=0) - x).abs().max().item() < 1e-4

    def test_constant_depth_closed_form(self):
        x = smooth_image(3)
        y = synth_haze(x, math.log(2.0), 0.6, seed=0, depth=torch.ones(32, 32))
        assert torch.allclose(y, 0.5 * x + 0.5 * 0.6, atol=1e-6)

    def test_dense_white_haze_saturates(self):
        y = synth_haze(smooth_image(4), 1e3, 1.0, seed=0)
        assert torch.allclose(y, torch.ones_like(y))

    @pytest.mark.parametrize("beta,airlight", [(0.0, 0.5), (-1.0, 0.5), (1.0, 1.5)])
    def test_out_of_range(self, beta, airlight):
        with pytest.raises(ParameterError):
            synth_haze(smooth_image(0), beta, airlight, seed=0)


class TestRainBlurLowlight:

    def test_rain_deterministic_and_bounded(self):
        x = smooth_image(5, 48, 48)
        a = synth_rain(x, 60, 8, 15.0, 0.7, seed=11)
        assert torch.equal(a, synth_rain(x, 60, 8, 15.0, 0.7, seed=11))
        assert not torch.equal(a, x)
        assert a.min().item() >= 0.0 and a.max().item() <= 1.0

    def test_rain_only_brightens(self):
        x = smooth_image(6, 48, 48)
        assert (synth_rain(x, 60, 8, -20.0, 0.7, seed=2) >= x - 1e-7).all()

    def test_zero_streaks_is_identity(self):
        x = smooth_image(7)
        assert torch.equal(synth_rain(x, 0, 8, 0.0, 0.7, seed=1), x)

    def test_rain_parameter_ranges(self):
        with pytest.raises(ParameterError):
            synth_rain(smooth_image(0), 10.5, 8, 0.0, 0.5, seed=0)
        with pytest.raises(ParameterError):
            synth_rain(smooth_image(0), 10, 8, 0.0, 1.5, seed=0)

    def test_blur_zero_sigma_is_identity(self):
        x = smooth_image(8)
        assert torch.equal(synth_blur(x, 0.0), x)

    def test_blur_preserves_constant_image(self):
        y = synth_blur(torch.full((3, 32, 32), 0.3), 1.5)
        assert torch.allclose(y, torch.full_like(y, 0.3), atol=1e-6)

    def test_blur_kernel_must_fit(self):
        with pytest.raises(DimensionError):
            synth_blur(torch.rand(3, 8, 8), 5.0)

    def test_lowlight_formula(self):
        y = synth_lowlight(torch.ones(3, 2, 2), 2.2, 0.5)
        assert torch.allclose(y, torch.full_like(y, 0.5))

    def test_lowlight_identity(self):
        x = smooth_image(9)
        assert torch.equal(synth_lowlight(x, 1.0, 1.0), x)

    def test_lowlight_ranges(self):
        with pytest.raises(ParameterError):
            synth_lowlight(smooth_image(0), 0.5, 0.5)
        with pytest.raises(ParameterError):
            synth_lowlight(smooth_image(0), 2.0, 0.0)


class TestDegradationSpec:

    @pytest.mark.parametrize("kind", list(DegradationKind))
    def test_every_kind_clamps_and_is_deterministic(self, kind):
        spec = DegradationSpec(kind=kind, seed=5)
        x = smooth_image(10, 48, 48)
        y = apply_degradation(x, spec)
        assert y.shape == x.shape
        assert y.min().item() >= 0.0 and y.max().item() <= 1.0
        assert torch.equal(y, apply_degradation(x, spec))

    def test_noise_sigma_on_test_grid(self):
        assert NOISE_TEST_GRID == (15.0, 25.0, 50.0)
        with pytest.raises(ParameterError):
            DegradationSpec(kind="noise", params={"sigma": 30.0}).resolved_params()

    def test_unknown_parameter(self):
        with pytest.raises(ParameterError) as exc:
            DegradationSpec(kind="haze", params={"density": 1.0}).resolved_params()
        assert exc.value.field_name == "density"

    def test_task_names(self):
        assert DegradationSpec(kind="noise", params={"sigma": 15.0}).task_name() == "noise_s15"
        assert DegradationSpec(kind="rain").task_name() == "rain"

    def test_pair_shapes_must_match(self):
        with pytest.raises(DimensionError):
            ImagePair(torch.rand(3, 4, 4), torch.rand(3, 4, 5), DegradationSpec(kind="blur"))

    def test_derived_seeds(self):
        assert derive_seed(0, 1) == derive_seed(0, 1)
        assert derive_seed(0, 1) != derive_seed(0, 2)
        assert derive_seed(0, 1) != derive_seed(1, 1)
        assert 0 <= derive_seed(123, 456) < 2 ** 63
