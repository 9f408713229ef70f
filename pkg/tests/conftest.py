"""
测试公共夹具
小尺寸模型配置、随机参数扰动、合成 PNG 目录
"""

import os
from pathlib import Path
from typing import List

import pytest
import torch

os.environ.setdefault("SYMUNET_ENCODER", "stub")
os.environ.pop("SYMUNET_CHECKPOINT", None)

from dataset_service import save_png  # noqa: E402
from schemas import ModelConfig  # noqa: E402

MID_GRAY = 128.0 / 255.0


def tiny_model_config(**overrides) -> ModelConfig:
    """两层、8 通道、每层 1 块；语义维度缩小到 5×16"""
    values = dict(
        levels=2,
        base_channels=8,
        encoder_blocks=[1, 1],
        bottleneck_blocks=1,
        decoder_blocks=[1, 1],
        heads_per_level=[1, 2, 4],
        bottleneck_patch=1,
        decoder_patches=[2, 2],
        context_tokens=5,
        context_dim=16,
        guidance_heads=2,
    )
    values.update(overrides)
    return ModelConfig(**values)


def randomize(module: torch.nn.Module, seed: int = 0, scale: float = 0.1) -> torch.nn.Module:
    """在现有参数上叠加高斯扰动（零初始化的投影也随之变为非零）"""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            noise = torch.randn(param.shape, generator=generator, dtype=torch.float64)
            param.add_(noise.to(param.dtype) * scale)
    return module


def smooth_image(seed: int, height: int = 32, width: int = 32) -> torch.Tensor:
    """低频随机图像，取值 [0,1]"""
    generator = torch.Generator().manual_seed(seed)
    coarse = torch.rand(1, 3, 4, 4, generator=generator)
    image = torch.nn.functional.interpolate(coarse, size=(height, width), mode="bilinear", align_corners=False)
    return image[0].clamp(0.0, 1.0)


def write_images(directory: Path, count: int, height: int = 32, width: int = 32, gray: bool = False) -> List[Path]:
    paths = []
    for i in range(count):
        image = torch.full((3, height, width), MID_GRAY) if gray else smooth_image(i, height, width)
        paths.append(save_png(directory / f"img{i:02d}.png", image))
    return paths


@pytest.fixture
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def clean_dir(tmp_path) -> Path:
    directory = tmp_path / "clean"
    write_images(directory, 4)
    return directory


@pytest.fixture
def gray_dir(tmp_path) -> Path:
    directory = tmp_path / "gray"
    write_images(directory, 4, 64, 64, gray=True)
    return directory
