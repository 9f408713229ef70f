"""
合成退化服务
噪声、雾、雨、模糊、低照度五类退化；全部由 (参数, 种子) 决定并裁剪到 [0,1]
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
import kornia

from exceptions import ParameterError, DimensionError
from schemas import DegradationKind, DegradationSpec

logger = logging.getLogger(__name__)


@dataclass
class ImagePair:
    """训练/评测样本对 (x, y)"""
    clean: torch.Tensor
    degraded: torch.Tensor
    spec: DegradationSpec

    def __post_init__(self):
        if self.clean.shape != self.degraded.shape:
            raise DimensionError(
                f"样本对形状不一致: clean {tuple(self.clean.shape)}, degraded {tuple(self.degraded.shape)}")


def derive_seed(global_seed: int, index: int) -> int:
    """
    由全局种子和样本序号派生样本种子（与生成顺序无关）

    Args:
        global_seed: 全局种子
        index: 样本序号

    Returns:
        63 位非负整数种子
    """
    digest = hashlib.sha256(f"{global_seed}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _require(condition: bool, message: str, field_name: str) -> None:
    if not condition:
        raise ParameterError(message, field_name)


# ========== 五类退化 ==========
def add_gaussian_noise(x: torch.Tensor, sigma: float, seed: int) -> torch.Tensor:
    """y = clamp(x + n/255)，n ~ N(0, σ²)，σ 以 8 位灰度为单位"""
    _require(sigma >= 0, f"噪声 sigma={sigma} 不能为负", "sigma")
    noise = torch.randn(x.shape, generator=_generator(seed), dtype=x.dtype) * sigma
    return (x + noise / 255.0).clamp(0.0, 1.0)


def depth_ramp(height: int, width: int, seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """沿种子决定方向的平滑深度斜坡，取值 [0.2, 1.0]"""
    angle = torch.rand(1, generator=_generator(seed)).item() * 2 * math.pi
    ys = torch.linspace(0.0, 1.0, height, dtype=torch.float64).view(-1, 1)
    xs = torch.linspace(0.0, 1.0, width, dtype=torch.float64).view(1, -1)
    ramp = math.cos(angle) * xs + math.sin(angle) * ys
    span = ramp.max() - ramp.min()
    ramp = (ramp - ramp.min()) / span if span > 0 else torch.zeros_like(ramp)
    return (0.2 + 0.8 * ramp).to(dtype)


def synth_haze(
    x: torch.Tensor,
    beta: float,
    airlight: float,
    seed: int,
    depth: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    大气散射模型 y = x·t + A·(1−t)，t = exp(−β·d)

    Args:
        x: 清晰图像 [3,H,W]
        beta: 散射系数 (>0)
        airlight: 大气光 A ∈ [0,1]
        seed: 深度斜坡方向种子
        depth: 可选的深度图 [H,W]（覆盖合成斜坡）
    """
    _require(beta > 0, f"雾 beta={beta} 必须为正", "beta")
    _require(0.0 <= airlight <= 1.0, f"大气光 airlight={airlight} 超出 [0,1]", "airlight")
    if depth is None:
        depth = depth_ramp(x.shape[-2], x.shape[-1], seed, x.dtype)
    transmission = torch.exp(-beta * depth.to(x.dtype))
    return (x * transmission + airlight * (1.0 - transmission)).clamp(0.0, 1.0)


def rain_mask(
    height: int,
    width: int,
    streaks: int,
    length: float,
    angle: float,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """斜向雨线掩码 [H,W]，取值 [0,1]"""
    generator = _generator(seed)
    mask = torch.zeros(height, width, dtype=dtype)
    if streaks == 0:
        return mask
    starts_y = torch.rand(streaks, generator=generator, dtype=torch.float64) * height
    starts_x = torch.rand(streaks, generator=generator, dtype=torch.float64) * width
    # 每条雨线的长度在 [0.5, 1.0]·length 间抖动
    lengths = (0.5 + 0.5 * torch.rand(streaks, generator=generator, dtype=torch.float64)) * length
    theta = math.radians(90.0 - angle)
    steps = torch.arange(int(math.ceil(length)), dtype=torch.float64)
    along = torch.minimum(steps.view(1, -1), lengths.view(-1, 1))
    rows = (starts_y.view(-1, 1) + along * math.sin(theta)).round().long().clamp(0, height - 1)
    cols = (starts_x.view(-1, 1) + along * math.cos(theta)).round().long().clamp(0, width - 1)
    mask.index_put_((rows.reshape(-1), cols.reshape(-1)), torch.ones(rows.numel(), dtype=dtype))
    # 轻微模糊，使雨线边缘柔和
    soft = kornia.filters.gaussian_blur2d(mask.view(1, 1, height, width), (3, 3), (0.6, 0.6), border_type="reflect")
    return (soft.view(height, width) / soft.max().clamp_min(1e-12)).clamp(0.0, 1.0)


def synth_rain(
    x: torch.Tensor,
    streaks: float,
    length: float,
    angle: float,
    intensity: float,
    seed: int,
) -> torch.Tensor:
    """雨线以 alpha 混合叠加为亮白色"""
    _require(streaks >= 0 and float(streaks).is_integer(), f"雨线数 streaks={streaks} 必须为非负整数", "streaks")
    _require(length >= 1, f"雨线长度 length={length} 必须 ≥ 1", "length")
    _require(-90.0 <= angle <= 90.0, f"雨线角度 angle={angle} 超出 [-90,90]", "angle")
    _require(0.0 <= intensity <= 1.0, f"雨线强度 intensity={intensity} 超出 [0,1]", "intensity")
    alpha = intensity * rain_mask(x.shape[-2], x.shape[-1], int(streaks), length, angle, seed, x.dtype)
    return (x * (1.0 - alpha) + alpha).clamp(0.0, 1.0)


def synth_blur(x: torch.Tensor, sigma_b: float) -> torch.Tensor:
    """高斯模糊（reflect 边界），σ_b = 0 为恒等"""
    _require(sigma_b >= 0, f"模糊 sigma_b={sigma_b} 不能为负", "sigma_b")
    if sigma_b == 0:
        return x.clone()
    ksize = 2 * int(math.ceil(3 * sigma_b)) + 1
    height, width = x.shape[-2:]
    if ksize // 2 >= min(height, width):
        raise DimensionError(f"模糊核 {ksize} 相对图像 {height}×{width} 过大")
    batch = x.unsqueeze(0) if x.dim() == 3 else x
    out = kornia.filters.gaussian_blur2d(batch, (ksize, ksize), (sigma_b, sigma_b), border_type="reflect")
    out = out.clamp(0.0, 1.0)
    return out.squeeze(0) if x.dim() == 3 else out


def synth_lowlight(x: torch.Tensor, gamma: float, gain: float) -> torch.Tensor:
    """y = gain · x^gamma"""
    _require(gamma >= 1.0, f"低照度 gamma={gamma} 必须 ≥ 1", "gamma")
    _require(0.0 < gain <= 1.0, f"低照度 gain={gain} 超出 (0,1]", "gain")
    return (gain * x.pow(gamma)).clamp(0.0, 1.0)


# ========== 统一入口 ==========
def apply_degradation(x: torch.Tensor, spec: DegradationSpec) -> torch.Tensor:
    """
    按退化描述合成退化图像

    Args:
        x: 清晰图像 [3,H,W]，取值 [0,1]
        spec: 退化描述（类型 + 参数 + 种子）

    Returns:
        退化图像，形状同 x
    """
    params = spec.resolved_params()
    if spec.kind == DegradationKind.NOISE:
        return add_gaussian_noise(x, params["sigma"], spec.seed)
    if spec.kind == DegradationKind.HAZE:
        return synth_haze(x, params["beta"], params["airlight"], spec.seed)
    if spec.kind == DegradationKind.RAIN:
        return synth_rain(x, params["streaks"], params["length"], params["angle"], params["intensity"], spec.seed)
    if spec.kind == DegradationKind.BLUR:
        return synth_blur(x, params["sigma_b"])
    return synth_lowlight(x, params["gamma"], params["gain"])


def synthesize_pair(clean: torch.Tensor, spec: DegradationSpec) -> ImagePair:
    """合成一个样本对"""
    return ImagePair(clean=clean, degraded=apply_degradation(clean, spec), spec=spec)
