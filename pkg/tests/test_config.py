"""
配置测试：key=value 文件、覆盖顺序、结构约束、环境变量
"""

import pytest

import config
from config import build_run_config, dump_model_config, load_run_config, parse_key_values, reload_settings
from exceptions import ConfigurationError
from schemas import GuidanceMode, ModelConfig


class TestKeyValueFiles:

    def test_parse_skips_comments_and_blanks(self):
        values = parse_key_values(["# comment", "", "levels = 3", "encoder_blocks=4,6,6"])
        assert values == {"levels": "3", "encoder_blocks": "4,6,6"}

    def test_missing_equals_sign(self):
        with pytest.raises(ConfigurationError) as exc:
            parse_key_values(["levels 3"], "run.cfg")
        assert "run.cfg:1" in exc.value.message

    def test_defaults_match_reference_layout(self):
        model_cfg, train_cfg = load_run_config()
        assert model_cfg.levels == 3
        assert model_cfg.encoder_blocks == [4, 6, 6]
        assert model_cfg.bottleneck_blocks == 8
        assert model_cfg.decoder_blocks == [6, 6, 4]
        assert train_cfg.lr0 == 1e-3
        assert train_cfg.lr_min == 1e-7
        assert train_cfg.lambda_fft == 0.1

    def test_overrides_applied_after_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("base_channels=16\nguidance_mode=bidirectional\nseed=3\n", encoding="utf-8")
        model_cfg, train_cfg = load_run_config(path, {"base_channels": "32"})
        assert model_cfg.base_channels == 32
        assert model_cfg.guidance_mode == GuidanceMode.BIDIRECTIONAL
        assert train_cfg.seed == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError) as exc:
            build_run_config({"levles": "3"})
        assert "levles" in exc.value.constraint

    def test_invalid_value_names_key(self):
        with pytest.raises(ConfigurationError) as exc:
            build_run_config({"levels": "zero"})
        assert exc.value.constraint == "levels"

    def test_dump_round_trip(self):
        model_cfg, _ = build_run_config({"symmetric": "false", "decoder_blocks": "6,6,4", "base_channels": "16"})
        values = parse_key_values(dump_model_config(model_cfg).splitlines())
        reloaded, _ = build_run_config(values)
        assert reloaded == model_cfg


class TestModelInvariants:

    def test_symmetric_requires_reversed_decoder(self):
        with pytest.raises(ConfigurationError) as exc:
            ModelConfig(decoder_blocks=[4, 6, 6]).validate_invariants()
        assert exc.value.constraint == "symmetric => decoder_blocks == reverse(encoder_blocks)"

    def test_list_lengths(self):
        with pytest.raises(ConfigurationError) as exc:
            ModelConfig(encoder_blocks=[4, 6], decoder_blocks=[6, 4]).validate_invariants()
        assert exc.value.constraint == "len(encoder_blocks) == levels"

    def test_heads_divide_channels(self):
        with pytest.raises(ConfigurationError) as exc:
            ModelConfig(base_channels=6, heads_per_level=[4, 2, 4, 8]).validate_invariants()
        assert exc.value.constraint == "channels[0] % heads[0] == 0"

    def test_guidance_patch_power_of_two(self):
        cfg = ModelConfig(guidance_mode="one_way", decoder_patches=[4, 3, 4])
        with pytest.raises(ConfigurationError) as exc:
            cfg.validate_invariants()
        assert "power of two" in exc.value.constraint

    def test_required_multiple(self):
        assert ModelConfig().required_multiple() == 8
        # 第0层 patch 4 → 4，第1层 2·4 → 8，第2层 4·4 → 16，瓶颈 8·2 → 16
        assert ModelConfig(guidance_mode="bidirectional").required_multiple() == 16

    def test_asymmetric_decoder_width(self):
        cfg = ModelConfig(symmetric=False)
        assert cfg.decoder_channels(0) == 96
        assert cfg.decoder_channels(1) == 96
        assert ModelConfig().decoder_channels(0) == 48


class TestSettings:

    def test_thread_cap_from_environment(self, monkeypatch):
        monkeypatch.setenv("SYMUNET_THREADS", "3")
        try:
            assert reload_settings().worker_count == 3
            assert config.get_settings().threads == 3
        finally:
            monkeypatch.delenv("SYMUNET_THREADS")
            reload_settings()

    def test_zero_threads_means_all_cpus(self, monkeypatch):
        monkeypatch.setenv("SYMUNET_THREADS", "0")
        try:
            assert reload_settings().worker_count >= 1
        finally:
            monkeypatch.delenv("SYMUNET_THREADS")
            reload_settings()
