"""
Pydantic模型定义
定义模型结构配置、训练配置、退化描述以及HTTP接口的数据结构
"""

from enum import Enum
from typing import Optional, Dict, Any, List

from pydantic import BaseModel, ConfigDict, Field, field_validator

from exceptions import ConfigurationError, ParameterError


def _split_csv(value: Any) -> Any:
    """配置文件中的列表值以逗号分隔"""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _is_power_of_two(value: int) -> bool:
    return value > 0 and (value & (value - 1)) == 0


class GuidanceMode(str, Enum):
    """语义引导模式"""
    NONE = "none"
    ONE_WAY = "one_way"
    BIDIRECTIONAL = "bidirectional"


# ========== 模型结构配置 ==========
class ModelConfig(BaseModel):
    """SymUNet / SE-SymUNet 结构超参数"""

    model_config = ConfigDict(extra="forbid")

    levels: int = Field(3, ge=1, description="下采样层数 L（共 L+1 个尺度）")
    in_channels: int = Field(3, ge=1, description="输入图像通道数")
    base_channels: int = Field(48, ge=1, description="第0层通道数 C")
    encoder_blocks: List[int] = Field(default_factory=lambda: [4, 6, 6], description="各编码层特征块数（浅→深）")
    bottleneck_blocks: int = Field(8, ge=0, description="瓶颈层特征块数")
    decoder_blocks: List[int] = Field(default_factory=lambda: [6, 6, 4], description="各解码层特征块数（深→浅）")
    heads_per_level: List[int] = Field(default_factory=lambda: [1, 2, 4, 8], description="各尺度注意力头数（含瓶颈）")
    ffn_expansion: float = Field(2.66, gt=0, description="GDFN 扩展系数 γ")
    upsample_kernel: int = Field(1, ge=1, description="UP 预卷积核尺寸")
    guidance_mode: GuidanceMode = Field(GuidanceMode.NONE, description="语义引导模式")
    symmetric: bool = Field(True, description="对称结构（加性跳连）")
    refinement_blocks: int = Field(4, ge=0, description="非对称变体的细化块数")
    bottleneck_patch: int = Field(2, ge=1, description="瓶颈层语义引导的 patch 尺寸")
    decoder_patches: List[int] = Field(default_factory=lambda: [4, 4, 4], description="各解码层 patch 尺寸（深→浅）")
    context_tokens: int = Field(257, ge=1, description="语义上下文 token 数 N_z")
    context_dim: int = Field(1024, ge=1, description="语义上下文维度 D_z")
    guidance_heads: int = Field(8, ge=1, description="交叉注意力头数")

    @field_validator("encoder_blocks", "decoder_blocks", "heads_per_level", "decoder_patches", mode="before")
    @classmethod
    def split_lists(cls, v):
        return _split_csv(v)

    def channels(self, level: int) -> int:
        """第 level 层的通道数 C·2^level"""
        return self.base_channels * (2 ** level)

    def decoder_channels(self, level: int) -> int:
        """第 level 层解码器的工作通道数（非对称变体第0层拼接后为 2C）"""
        if not self.symmetric and level == 0:
            return 2 * self.base_channels
        return self.channels(level)

    def decoder_blocks_at(self, level: int) -> int:
        """第 level 层解码器的块数（decoder_blocks 按深→浅排列）"""
        return self.decoder_blocks[self.levels - 1 - level]

    def patch_at(self, level: int) -> int:
        """第 level 层语义引导的 patch 尺寸（level == L 为瓶颈）"""
        if level == self.levels:
            return self.bottleneck_patch
        return self.decoder_patches[self.levels - 1 - level]

    def required_multiple(self) -> int:
        """输入 H、W 需要整除的倍数"""
        multiple = 2 ** self.levels
        if self.guidance_mode != GuidanceMode.NONE:
            for level in range(self.levels + 1):
                multiple = max(multiple, (2 ** level) * self.patch_at(level))
        return multiple

    def validate_invariants(self) -> None:
        """
        检查结构约束，失败时抛出 ConfigurationError 并指明约束名

        Raises:
            ConfigurationError: 任一约束不满足
        """
        L = self.levels
        if len(self.encoder_blocks) != L:
            raise ConfigurationError(
                f"encoder_blocks 长度 {len(self.encoder_blocks)} 与 levels={L} 不一致", "len(encoder_blocks) == levels")
        if len(self.decoder_blocks) != L:
            raise ConfigurationError(
                f"decoder_blocks 长度 {len(self.decoder_blocks)} 与 levels={L} 不一致", "len(decoder_blocks) == levels")
        if len(self.heads_per_level) != L + 1:
            raise ConfigurationError(
                f"heads_per_level 需要 {L + 1} 项（含瓶颈），实际 {len(self.heads_per_level)}",
                "len(heads_per_level) == levels + 1")
        if len(self.decoder_patches) != L:
            raise ConfigurationError(
                f"decoder_patches 长度 {len(self.decoder_patches)} 与 levels={L} 不一致", "len(decoder_patches) == levels")
        if any(n < 0 for n in self.encoder_blocks + self.decoder_blocks):
            raise ConfigurationError("块数不能为负", "blocks >= 0")
        if self.symmetric and list(self.decoder_blocks) != list(reversed(self.encoder_blocks)):
            raise ConfigurationError(
                f"对称结构要求 decoder_blocks == reverse(encoder_blocks)，"
                f"实际 encoder={self.encoder_blocks} decoder={self.decoder_blocks}",
                "symmetric => decoder_blocks == reverse(encoder_blocks)")
        if self.base_channels % 2 != 0:
            raise ConfigurationError(f"base_channels={self.base_channels} 必须为偶数", "base_channels % 2 == 0")
        for level, heads in enumerate(self.heads_per_level):
            width = self.channels(level)
            if heads < 1 or width % heads != 0:
                raise ConfigurationError(
                    f"第{level}层通道数 {width} 不能被头数 {heads} 整除", f"channels[{level}] % heads[{level}] == 0")
        if not self.symmetric and self.refinement_blocks < 1:
            raise ConfigurationError("非对称变体至少需要 1 个细化块", "asymmetric => refinement_blocks > 0")
        if self.upsample_kernel % 2 != 1:
            raise ConfigurationError(f"upsample_kernel={self.upsample_kernel} 必须为奇数", "upsample_kernel is odd")
        if self.guidance_mode != GuidanceMode.NONE:
            if self.context_dim % self.guidance_heads != 0:
                raise ConfigurationError(
                    f"context_dim={self.context_dim} 不能被 guidance_heads={self.guidance_heads} 整除",
                    "context_dim % guidance_heads == 0")
            for level in range(L + 1):
                p = self.patch_at(level)
                if not _is_power_of_two(p):
                    raise ConfigurationError(f"第{level}层 patch={p} 不是 2 的幂", f"patch[{level}] is power of two")
                token_dim = p * p * self.decoder_channels(level)
                if token_dim % self.guidance_heads != 0:
                    raise ConfigurationError(
                        f"第{level}层 token 维度 {token_dim} 不能被 guidance_heads 整除",
                        f"p^2*C[{level}] % guidance_heads == 0")


# ========== 训练配置 ==========
class TrainConfig(BaseModel):
    """训练超参数（默认值即参考设置，步数缩减到桌面规模）"""

    model_config = ConfigDict(extra="forbid")

    lr0: float = Field(1e-3, gt=0, description="初始学习率")
    lr_min: float = Field(1e-7, ge=0, description="余弦退火最小学习率")
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(1e-3, ge=0)
    lambda_fft: float = Field(0.1, description="FFT 损失权重 λ")
    total_steps: int = Field(2000, ge=1)
    batch_size: int = Field(4, ge=1)
    crop: int = Field(128, ge=1)
    seed: int = Field(0, ge=0)
    checkpoint_every: int = Field(500, ge=1)
    val_every: int = Field(100, ge=1)

    def validate_invariants(self) -> None:
        """检查训练配置约束"""
        if not self.lr_min < self.lr0:
            raise ConfigurationError(f"lr_min={self.lr_min} 必须小于 lr0={self.lr0}", "lr_min < lr0")
        if self.lambda_fft < 0:
            raise ConfigurationError(f"lambda_fft={self.lambda_fft} 不能为负", "lambda_fft >= 0")


# ========== 退化描述 ==========
class DegradationKind(str, Enum):
    """退化类型枚举"""
    NOISE = "noise"
    HAZE = "haze"
    RAIN = "rain"
    BLUR = "blur"
    LOWLIGHT = "lowlight"


NOISE_TEST_GRID = (15.0, 25.0, 50.0)

DEFAULT_DEGRADATION_PARAMS: Dict[DegradationKind, Dict[str, float]] = {
    DegradationKind.NOISE: {"sigma": 25.0},
    DegradationKind.HAZE: {"beta": 1.0, "airlight": 0.8},
    DegradationKind.RAIN: {"streaks": 150.0, "length": 12.0, "angle": 10.0, "intensity": 0.6},
    DegradationKind.BLUR: {"sigma_b": 2.0},
    DegradationKind.LOWLIGHT: {"gamma": 2.2, "gain": 0.5},
}


class DegradationSpec(BaseModel):
    """合成退化描述：类型 + 参数 + 种子"""

    kind: DegradationKind
    params: Dict[str, float] = Field(default_factory=dict)
    seed: int = 0

    def resolved_params(self) -> Dict[str, float]:
        """合并默认参数，拒绝未知参数名"""
        defaults = DEFAULT_DEGRADATION_PARAMS[self.kind]
        unknown = sorted(set(self.params) - set(defaults))
        if unknown:
            raise ParameterError(
                f"{self.kind.value} 不支持参数 {unknown}，可用参数: {sorted(defaults)}", unknown[0])
        merged = dict(defaults)
        merged.update(self.params)
        if self.kind == DegradationKind.NOISE and merged["sigma"] not in NOISE_TEST_GRID:
            raise ParameterError(
                f"噪声 sigma={merged['sigma']} 不在测试网格 {NOISE_TEST_GRID} 中", "sigma")
        return merged

    def task_name(self) -> str:
        """评测表中的任务列名"""
        if self.kind == DegradationKind.NOISE:
            return f"noise_s{int(self.resolved_params()['sigma'])}"
        return self.kind.value

    def params_text(self) -> str:
        """清单中的 param=val,... 字段"""
        return ",".join(f"{key}={value:g}" for key, value in sorted(self.params.items()))


# ========== 命令行运行描述 ==========
class RunSpec(BaseModel):
    """一次命令行调用的描述"""
    subcommand: str
    config_path: Optional[str] = None
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    overrides: Dict[str, str] = Field(default_factory=dict)


# ========== HTTP接口模型 ==========
class HealthResponse(BaseModel):
    """健康检查响应模型"""
    status: str = Field(..., description="服务状态")
    model_loaded: bool = Field(..., description="模型是否已加载")
    checkpoint: Optional[str] = Field(None, description="检查点路径")
    processed_at: str = Field(..., description="处理时间")


class ModelInfoResponse(BaseModel):
    """模型信息响应模型"""
    config: Dict[str, Any] = Field(..., description="模型结构配置")
    parameters: int = Field(..., description="可学习参数量")
    step: int = Field(0, description="检查点训练步数")
    required_multiple: int = Field(..., description="输入尺寸需整除的倍数（服务端自动填充）")


class ErrorResponse(BaseModel):
    """错误响应模型"""
    error: str = Field(..., description="错误信息")
    error_code: str = Field(..., description="错误代码")
    details: Dict[str, Any] = Field(default_factory=dict, description="错误详情")
    processed_at: str = Field(..., description="处理时间")
