"""
训练测试：学习率排程、AdamW 闭式结果、续训逐位一致、非有限值中止
"""

import math

import pytest
import torch
import torch.nn as nn

from checkpoint_service import load_checkpoint, parameter_checksum
from conftest import randomize, tiny_model_config, write_images
from dataset_service import BatchStream, read_manifest, resolve_kinds, synthesize_dataset
from exceptions import TrainingError
from metrics import batch_psnr, total_loss
from models import build_model
from schemas import TrainConfig
from training_service import (
    CHECKPOINT_DIR, LOG_FILE, adamw_step, build_optimizer, cosine_lr, read_log, train_loop,
)


def _small_train_config(**overrides) -> TrainConfig:
    values = dict(total_steps=4, batch_size=2, crop=16, checkpoint_every=2, val_every=2, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def stream(clean_dir, tmp_path):
    manifest = synthesize_dataset(clean_dir, resolve_kinds(["noise:sigma=25", "haze"]), tmp_path / "data", seed=0, workers=1)
    return BatchStream(read_manifest(manifest), batch_size=2, crop=16, seed=0, workers=1)


class _Vector(nn.Module):

    def __init__(self, values):
        super().__init__()
        self.theta = nn.Parameter(torch.tensor(values, dtype=torch.float64))


class TestCosineSchedule:

    def test_endpoints_are_exact(self):
        assert cosine_lr(0, 1000, 1e-3, 1e-7) == 1e-3
        assert cosine_lr(1000, 1000, 1e-3, 1e-7) == 1e-7

    def test_midpoint(self):
        assert cosine_lr(500, 1000, 1e-3, 1e-7) == pytest.approx(5.00005e-4, rel=1e-12)

    def test_monotone_non_increasing(self):
        values = [cosine_lr(s, 200, 1e-3, 1e-7) for s in range(201)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestAdamW:

    def test_first_step_closed_form(self):
        module = _Vector([2.0])
        optimizer = build_optimizer(module, TrainConfig(lr0=1.0, weight_decay=0.0))
        module.theta.grad = torch.ones(1, dtype=torch.float64)
        adamw_step(module.named_parameters(), optimizer, lr=1.0)
        assert module.theta.item() == pytest.approx(2.0 - 1.0 / (1.0 + 1e-8), abs=1e-12)

    def test_decay_only_step(self):
        module = _Vector([0.5, -3.0, 7.25])
        before = module.theta.detach().clone()
        optimizer = build_optimizer(module, TrainConfig(lr0=1e-2, weight_decay=1e-3))
        module.theta.grad = torch.zeros(3, dtype=torch.float64)
        adamw_step(module.named_parameters(), optimizer, lr=1e-2)
        assert torch.equal(module.theta.detach(), before.mul(1 - 1e-2 * 1e-3))

    def test_matches_reference_update_over_several_steps(self):
        target = torch.tensor([0.3, -1.2, 2.0, 0.0], dtype=torch.float64)
        module = _Vector([1.0, 1.0, -1.0, 0.5])
        optimizer = build_optimizer(module, TrainConfig(lr0=0.05, weight_decay=0.0))

        theta = module.theta.detach().clone()
        m = torch.zeros_like(theta)
        v = torch.zeros_like(theta)
        beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.05
        for t in range(1, 6):
            optimizer.zero_grad()
            ((module.theta - target) ** 2).sum().backward()
            adamw_step(module.named_parameters(), optimizer, lr=lr)

            g = 2 * (theta - target)
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            denom = (v / (1 - beta2 ** t)).sqrt() + eps
            theta = theta - lr / (1 - beta1 ** t) * m / denom
            assert torch.allclose(module.theta.detach(), theta, rtol=1e-10, atol=1e-12)

    def test_zero_lr_and_decay_leave_parameters_unchanged(self, tiny_config):
        model = randomize(build_model(tiny_config), seed=1)
        before = parameter_checksum(model)
        optimizer = build_optimizer(model, TrainConfig(weight_decay=0.0))
        y = torch.rand(1, 3, 16, 16)
        total_loss(model(y), torch.rand(1, 3, 16, 16)).backward()
        adamw_step(model.named_parameters(), optimizer, lr=0.0)
        assert parameter_checksum(model) == before

    def test_non_finite_gradient_names_parameter(self):
        module = _Vector([1.0, 2.0])
        optimizer = build_optimizer(module, TrainConfig())
        module.theta.grad = torch.tensor([0.0, float("inf")], dtype=torch.float64)
        with pytest.raises(TrainingError) as exc:
            adamw_step(module.named_parameters(), optimizer, lr=1e-3, step=7)
        assert exc.value.parameter == "theta"
        assert exc.value.step == 7
        assert module.theta.tolist() == [1.0, 2.0]

    def test_small_step_does_not_increase_loss(self, tiny_config):
        failures = 0
        for seed in range(20):
            model = randomize(build_model(tiny_config, seed=seed), seed=seed).double()
            generator = torch.Generator().manual_seed(seed)
            clean = torch.rand(2, 3, 16, 16, generator=generator, dtype=torch.float64)
            degraded = (clean + 0.1 * torch.randn(2, 3, 16, 16, generator=generator, dtype=torch.float64)).clamp(0, 1)
            optimizer = build_optimizer(model, TrainConfig(weight_decay=0.0))
            loss = total_loss(model(degraded), clean)
            loss.backward()
            adamw_step(model.named_parameters(), optimizer, lr=1e-6)
            with torch.no_grad():
                after = total_loss(model(degraded), clean)
            failures += int(after.item() > loss.item())
        assert failures <= 1


class TestTrainLoop:

    def test_writes_log_and_checkpoint(self, tiny_config, stream, tmp_path):
        result = train_loop(build_model(tiny_config), stream, _small_train_config(), tmp_path / "run")
        assert result.final_step == 4
        records = read_log(tmp_path / "run" / LOG_FILE)
        assert [r.step for r in records] == [1, 2, 3, 4]
        assert records[0].psnr_val is None and records[1].psnr_val is not None
        assert records[0].lr == 1e-3
        assert load_checkpoint(tmp_path / "run" / CHECKPOINT_DIR).step == 4

    def test_same_seed_is_deterministic(self, tiny_config, stream, tmp_path):
        a = train_loop(build_model(tiny_config), stream, _small_train_config(), tmp_path / "a")
        b = train_loop(build_model(tiny_config), stream, _small_train_config(), tmp_path / "b")
        assert parameter_checksum(a.model) == parameter_checksum(b.model)

    def test_resume_is_bit_exact(self, tiny_config, stream, tmp_path):
        config = _small_train_config()
        continuous = train_loop(build_model(tiny_config), stream, config, tmp_path / "continuous")

        first = train_loop(build_model(tiny_config), stream, config, tmp_path / "segmented", stop_at=2)
        assert first.final_step == 2
        resumed = train_loop(build_model(tiny_config, seed=99), stream, config, tmp_path / "segmented",
                             resume=tmp_path / "segmented" / CHECKPOINT_DIR)

        assert resumed.final_step == 4
        assert parameter_checksum(resumed.model) == parameter_checksum(continuous.model)
        assert (tmp_path / "segmented" / LOG_FILE).read_text() == (tmp_path / "continuous" / LOG_FILE).read_text()

    def test_non_finite_loss_aborts_and_keeps_checkpoint(self, tiny_config, stream, tmp_path):

        class PoisonedStream(BatchStream):
            def batches(self, start, stop):
                for step, degraded, clean in super().batches(start, stop):
                    if step >= 2:
                        degraded = torch.full_like(degraded, float("nan"))
                    yield step, degraded, clean

        poisoned = PoisonedStream(stream.entries, 2, 16, seed=0, workers=1)
        with pytest.raises(TrainingError) as exc:
            train_loop(build_model(tiny_config), poisoned, _small_train_config(), tmp_path / "run")
        assert exc.value.step == 2
        assert load_checkpoint(tmp_path / "run" / CHECKPOINT_DIR).step == 2
        assert [r.step for r in read_log(tmp_path / "run" / LOG_FILE)] == [1, 2]


@pytest.mark.slow
class TestOverfit:

    def test_small_model_overfits_noise_pairs(self, tmp_path):
        write_images(tmp_path / "clean", 8, 64, 64)
        manifest = synthesize_dataset(tmp_path / "clean", resolve_kinds(["noise:sigma=25"]), tmp_path / "data", seed=0, workers=1)
        stream = BatchStream(read_manifest(manifest), batch_size=4, crop=64, seed=0, workers=1)
        config = tiny_model_config(levels=3, base_channels=16, encoder_blocks=[1, 1, 1], bottleneck_blocks=2,
                                   decoder_blocks=[1, 1, 1], heads_per_level=[1, 2, 4, 8], decoder_patches=[2, 2, 2])
        train_config = TrainConfig(total_steps=600, batch_size=4, crop=64, checkpoint_every=600, val_every=100)
        result = train_loop(build_model(config), stream, train_config, tmp_path / "run")

        degraded, clean = stream.validation_batch()
        result.model.eval()
        with torch.no_grad():
            restored = result.model(degraded).clamp(0, 1)
        assert batch_psnr(degraded, clean) < 25
        assert batch_psnr(restored, clean) > 30
        assert not math.isnan(result.records[-1].loss)
