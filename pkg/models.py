"""
SymUNet 网络结构
对称编码器/解码器 + 加性跳连；非对称变体（拼接跳连 + 细化块）用于消融对比
"""

import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from exceptions import ConfigurationError, DimensionError
from nn_core import (
    FeatureBlock, Downsample, Upsample, as_batch, restore_batch, ensure_finite, conv_macs, module_macs,
)
from schemas import GuidanceMode, ModelConfig
from semantic import SemanticGuidanceStack, forward_se_symunet

logger = logging.getLogger(__name__)

REFERENCE_PARAMETERS = 22.26e6
REFERENCE_FLOPS = 78.47e9
FLOPS_RESOLUTION = 256


def tap_names(levels: int) -> List[str]:
    """可用的特征抽头名"""
    names = [f"f_enc_{i}" for i in range(levels + 1)]
    names += [f"s_{i}" for i in range(levels)]
    names += ["bottleneck"]
    names += [f"f_dec_{i}" for i in range(levels)]
    return names


class TapRecorder:
    """按名记录中间特征（分离并复制）"""

    def __init__(self, names: Iterable[str] = ()):
        self.names = set(names)
        self.features: Dict[str, torch.Tensor] = {}

    def __call__(self, name: str, tensor: torch.Tensor) -> None:
        if name in self.names:
            self.features[name] = tensor.detach().clone()


def _no_taps(name: str, tensor: torch.Tensor) -> None:
    return None


def _stage(dim: int, count: int, heads: int, expansion: float) -> nn.Sequential:
    return nn.Sequential(*[FeatureBlock(dim, heads, expansion) for _ in range(count)])


class SymUNet(nn.Module):
    """
    SymUNet 主干

    参数命名:
        initial_conv        3×3 输入卷积
        encoders.{i}        第 i 层编码块
        downs.{i}           第 i 层 → 第 i+1 层下采样
        bottleneck          瓶颈块
        ups.{i}             第 i+1 层 → 第 i 层上采样
        decoders.{i}        第 i 层解码块
        refinement          细化块（仅非对称变体）
        final_conv          3×3 输出卷积
        guidance            语义引导模块（仅 SE 变体）
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate_invariants()
        self.config = config
        L = config.levels
        C = config.base_channels
        heads = config.heads_per_level
        gamma = config.ffn_expansion

        self.initial_conv = nn.Conv2d(config.in_channels, C, kernel_size=3, padding=1, bias=False)
        self.encoders = nn.ModuleList(
            [_stage(config.channels(i), config.encoder_blocks[i], heads[i], gamma) for i in range(L)])
        self.downs = nn.ModuleList([Downsample(config.channels(i)) for i in range(L)])
        self.bottleneck = _stage(config.channels(L), config.bottleneck_blocks, heads[L], gamma)
        self.ups = nn.ModuleList(
            [Upsample(config.channels(i + 1), config.upsample_kernel) for i in range(L)])
        self.decoders = nn.ModuleList(
            [_stage(config.decoder_channels(i), config.decoder_blocks_at(i), heads[i], gamma) for i in range(L)])

        width0 = config.decoder_channels(0)
        if config.symmetric:
            self.refinement = None
        else:
            self.refinement = _stage(width0, config.refinement_blocks, heads[0], gamma)
        self.final_conv = nn.Conv2d(width0, config.in_channels, kernel_size=3, padding=1, bias=False)
        self.guidance = None

        # 加性跳连对齐：UP(f_dec_{i+1}) 与 s_i 通道一致
        for i, up in enumerate(self.ups):
            if up.body.out_channels // 4 != config.channels(i):
                raise ConfigurationError(
                    f"第{i}层上采样输出 {up.body.out_channels // 4} 通道，跳连 s_{i} 为 {config.channels(i)} 通道",
                    f"channels(UP(f_dec_{i + 1})) == channels(s_{i})")

    # ========== 前向组件 ==========
    def check_input(self, y: torch.Tensor, multiple: Optional[int] = None) -> None:
        """输入尺寸检查，H、W 需整除 multiple（默认 2^L）"""
        multiple = multiple or 2 ** self.config.levels
        if y.shape[-3] != self.config.in_channels:
            raise DimensionError(f"输入通道 {y.shape[-3]} 与配置 in_channels={self.config.in_channels} 不符")
        height, width = y.shape[-2:]
        if height % multiple != 0 or width % multiple != 0:
            raise DimensionError(
                f"输入尺寸 {height}×{width} 必须能被 {multiple} 整除（请先用 pad_to_multiple 填充）",
                required_multiple=multiple)

    def encode(self, y: torch.Tensor, tap: Callable = _no_taps) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """编码路径，返回 (瓶颈输入 f_enc_L, 各层跳连 s_i)"""
        f = self.initial_conv(y)
        skips = []
        for i in range(self.config.levels):
            tap(f"f_enc_{i}", f)
            s = self.encoders[i](f)
            tap(f"s_{i}", s)
            skips.append(s)
            f = self.downs[i](s)
        tap(f"f_enc_{self.config.levels}", f)
        return f, skips

    def fuse(self, level: int, deeper: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        """第 level 层解码输入：UP(deeper) 与 s_level 相加（非对称变体第0层为拼接）"""
        up = self.ups[level](deeper)
        if self.refinement is not None and level == 0:
            return torch.cat([up, skip], dim=1)
        return up + skip

    def head(self, f: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """输出头：x̂ = Conv(f) + y"""
        if self.refinement is not None:
            f = self.refinement(f)
        return self.final_conv(f) + y

    def forward(self, y: torch.Tensor, tap: Callable = _no_taps) -> torch.Tensor:
        batch, squeezed = as_batch(y)
        self.check_input(batch)
        f, skips = self.encode(batch, tap)
        f = self.bottleneck(f)
        tap("bottleneck", f)
        for level in reversed(range(self.config.levels)):
            f = self.decoders[level](self.fuse(level, f, skips[level]))
            tap(f"f_dec_{level}", f)
        return restore_batch(self.head(f, batch), squeezed)

    # ========== 统计 ==========
    def tap_names(self) -> List[str]:
        return tap_names(self.config.levels)

    def macs(self, height: int, width: int, include_guidance: bool = True) -> int:
        """解析式乘加计数"""
        L = self.config.levels
        total = conv_macs(self.initial_conv, height, width)
        for i in range(L):
            h, w = height >> i, width >> i
            total += sum(block.macs(h, w) for block in self.encoders[i])
            total += self.downs[i].macs(h, w)
        total += sum(block.macs(height >> L, width >> L) for block in self.bottleneck)
        for i in range(L):
            total += self.ups[i].macs(height >> (i + 1), width >> (i + 1))
            total += sum(block.macs(height >> i, width >> i) for block in self.decoders[i])
        if self.refinement is not None:
            total += sum(block.macs(height, width) for block in self.refinement)
        total += conv_macs(self.final_conv, height, width)
        if include_guidance and self.guidance is not None:
            total += self.guidance.macs(height, width)
        return total


# ========== 构建 ==========
def zero_init_residuals(model: nn.Module) -> None:
    """残差分支输出投影、输出卷积、交叉注意力输出投影置零"""
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, FeatureBlock):
                for weight in module.residual_projections():
                    weight.zero_()
            elif hasattr(module, "zero_init"):
                module.zero_init()
        if isinstance(model, SymUNet):
            model.final_conv.weight.zero_()


def build_model(config: ModelConfig, seed: int = 0) -> SymUNet:
    """
    按配置构建模型（SE 变体附带语义引导模块）

    Args:
        config: 模型结构配置
        seed: 初始化种子，相同 (config, seed) 得到逐位相同的参数

    Returns:
        SymUNet 模型（float32）

    Raises:
        ConfigurationError: 结构约束不满足
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SymUNet(config)
        if config.guidance_mode != GuidanceMode.NONE:
            model.guidance = SemanticGuidanceStack(config)
    zero_init_residuals(model)
    logger.info(
        f"模型构建完成: levels={config.levels} C={config.base_channels} symmetric={config.symmetric} "
        f"guidance={config.guidance_mode.value} 参数量={count_parameters(model):,}")
    return model


def build_asymmetric_variant(config: ModelConfig, seed: int = 0) -> SymUNet:
    """非对称消融变体：第0层拼接跳连（2C 通道）并追加细化块"""
    if config.symmetric:
        raise ConfigurationError("非对称变体要求 symmetric=false", "asymmetric variant requires symmetric=false")
    return build_model(config, seed)


def forward_symunet(model: SymUNet, y: torch.Tensor) -> torch.Tensor:
    """
    SymUNet 前向（只走主干，忽略语义引导模块）

    Args:
        model: 模型
        y: 退化图像 [3,H,W] 或 [B,3,H,W]，H、W 需整除 2^L

    Returns:
        复原图像，形状同 y
    """
    return ensure_finite(model(y), "forward_symunet")


def count_parameters(model: nn.Module) -> int:
    """可学习标量参数总数"""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def estimate_flops(model: nn.Module, height: int, width: int) -> int:
    """
    乘加次数估计（卷积、注意力矩阵乘、归一化）

    Raises:
        DimensionError: H、W 不满足整除要求
    """
    if isinstance(model, SymUNet):
        multiple = 2 ** model.config.levels
        if height % multiple != 0 or width % multiple != 0:
            raise DimensionError(f"{height}×{width} 不能被 {multiple} 整除", required_multiple=multiple)
        return model.macs(height, width)
    return module_macs(model, height, width)


def extract_features(
    model: SymUNet,
    y: torch.Tensor,
    taps: Sequence[str],
    context=None,
    encoder=None,
) -> Dict[str, torch.Tensor]:
    """
    前向并抽取中间特征

    Args:
        model: 模型；SE 变体走语义引导前向
        y: 输入图像
        taps: 抽头名列表，取自 tap_names()
        context: SE 变体的语义上下文（可选）
        encoder: SE 变体的上下文编码器（可选）

    Returns:
        抽头名 → 分离后的特征副本（与 y 同为单张或批量）

    Raises:
        ConfigurationError: 未知抽头名
    """
    valid = model.tap_names()
    unknown = [name for name in taps if name not in valid]
    if unknown:
        raise ConfigurationError(f"未知抽头 {unknown}，可用抽头: {valid}", "tap in documented set")
    recorder = TapRecorder(taps)
    with torch.no_grad():
        if model.guidance is not None:
            forward_se_symunet(model, y, context=context, encoder=encoder, tap=recorder)
        else:
            model(y, tap=recorder)
    squeeze = y.dim() == 3
    return {name: (recorder.features[name].squeeze(0) if squeeze else recorder.features[name]) for name in taps}


def parameter_report(model: SymUNet, height: int = FLOPS_RESOLUTION, width: int = FLOPS_RESOLUTION) -> Dict[str, float]:
    """参数量与计算量报告（与参考复杂度对照）"""
    params = count_parameters(model)
    trunk_params = params - (count_parameters(model.guidance) if model.guidance is not None else 0)
    trunk_macs = model.macs(height, width, include_guidance=False)
    return {
        "parameters": params,
        "trunk_parameters": trunk_params,
        "guidance_parameters": params - trunk_params,
        "parameter_deviation_pct": 100.0 * (trunk_params - REFERENCE_PARAMETERS) / REFERENCE_PARAMETERS,
        "macs": model.macs(height, width),
        "trunk_macs": trunk_macs,
        "flops_ratio": trunk_macs / REFERENCE_FLOPS,
        "resolution": height,
    }
