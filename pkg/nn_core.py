"""
基础可微算子与特征提取块
Restormer 风格的 MDTA + GDFN 特征块，编码器、瓶颈、解码器共用同一结构
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from exceptions import ConfigurationError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5


def as_batch(f: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    """[C,H,W] 补成 [1,C,H,W]，返回 (张量, 是否需要还原)"""
    if f.dim() == 3:
        return f.unsqueeze(0), True
    if f.dim() == 4:
        return f, False
    raise DimensionError(f"特征图需要 [C,H,W] 或 [B,C,H,W]，实际形状 {tuple(f.shape)}")


def restore_batch(out: torch.Tensor, squeezed: bool) -> torch.Tensor:
    return out.squeeze(0) if squeezed else out


def ensure_finite(tensor: torch.Tensor, where: str) -> torch.Tensor:
    """NaN/Inf 视为错误状态"""
    if not torch.isfinite(tensor).all():
        raise NumericalError(f"{where} 出现非有限值", where)
    return tensor


# ========== 函数式算子 ==========
def conv2d(
    f: torch.Tensor,
    weight: torch.Tensor,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> torch.Tensor:
    """
    无偏置二维互相关

    Args:
        f: 输入 [C_in,H,W] 或 [B,C_in,H,W]
        weight: 卷积核 [C_out, C_in/groups, k, k]
        stride: 步长
        padding: 零填充
        groups: 分组数

    Returns:
        输出，H' = (H + 2·pad − k)/stride + 1

    Raises:
        ConfigurationError: 形状不匹配
    """
    batch, squeezed = as_batch(f)
    c_in, height, width = batch.shape[1:]
    c_out, c_per_group, kh, kw = weight.shape
    if groups < 1 or c_in % groups != 0 or c_out % groups != 0:
        raise ConfigurationError(
            f"groups={groups} 必须同时整除 C_in={c_in} 与 C_out={c_out}", "groups divides C_in and C_out")
    if c_per_group * groups != c_in:
        raise ConfigurationError(
            f"卷积核输入通道 {c_per_group}×{groups} 与输入通道 {c_in} 不符", "weight.shape[1] * groups == C_in")
    if height + 2 * padding < kh or width + 2 * padding < kw:
        raise ConfigurationError(
            f"卷积核 {kh}×{kw} 在 padding={padding} 下超出输入 {height}×{width}", "kernel fits with padding")
    out = F.conv2d(batch, weight, stride=stride, padding=padding, groups=groups)
    return restore_batch(out, squeezed)


def layer_norm_channel(
    f: torch.Tensor,
    scale: torch.Tensor,
    shift: torch.Tensor,
    eps: float = LAYER_NORM_EPS,
) -> torch.Tensor:
    """逐像素在通道维做归一化（零均值、单位方差），再做仿射"""
    batch, squeezed = as_batch(f)
    channels = batch.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ConfigurationError(
            f"scale/shift 形状 {tuple(scale.shape)}/{tuple(shift.shape)} 与通道数 {channels} 不符",
            "scale.shape == shift.shape == (C,)")
    mu = batch.mean(dim=1, keepdim=True)
    var = batch.var(dim=1, keepdim=True, unbiased=False)
    out = (batch - mu) / torch.sqrt(var + eps)
    out = out * scale.view(1, -1, 1, 1) + shift.view(1, -1, 1, 1)
    return restore_batch(out, squeezed)


def mdta(
    f: torch.Tensor,
    qkv_weight: torch.Tensor,
    qkv_dw_weight: torch.Tensor,
    temperature: torch.Tensor,
    proj_weight: torch.Tensor,
    heads: int,
    return_attention: bool = False,
):
    """
    多头转置（通道维）注意力

    Q、K、V 由逐点卷积 + 深度卷积得到；每个头的注意力矩阵为 (C/heads)×(C/heads)，
    Q、K 行向量先做 L2 归一化，再乘可学习温度，最后 softmax。

    Args:
        f: 输入 [C,H,W] 或 [B,C,H,W]
        qkv_weight: [3C, C, 1, 1]
        qkv_dw_weight: [3C, 1, 3, 3]
        temperature: 长度为 heads 的温度
        proj_weight: [C, C, 1, 1]
        heads: 头数
        return_attention: 同时返回注意力矩阵 [B, heads, C/heads, C/heads]
    """
    batch, squeezed = as_batch(f)
    _, channels, height, width = batch.shape
    if heads < 1 or channels % heads != 0:
        raise ConfigurationError(f"通道数 {channels} 不能被头数 {heads} 整除", "C % heads == 0")
    if temperature.numel() != heads:
        raise ConfigurationError(
            f"温度长度 {temperature.numel()} 与头数 {heads} 不符", "len(temperature) == heads")

    qkv = conv2d(batch, qkv_weight)
    qkv = conv2d(qkv, qkv_dw_weight, padding=1, groups=3 * channels)
    q, k, v = qkv.chunk(3, dim=1)

    q = rearrange(q, "b (head c) h w -> b head c (h w)", head=heads)
    k = rearrange(k, "b (head c) h w -> b head c (h w)", head=heads)
    v = rearrange(v, "b (head c) h w -> b head c (h w)", head=heads)

    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)

    attn = (q @ k.transpose(-2, -1)) * temperature.reshape(1, heads, 1, 1)
    attn = attn.softmax(dim=-1)

    out = attn @ v
    out = rearrange(out, "b head c (h w) -> b (head c) h w", head=heads, h=height, w=width)
    out = restore_batch(conv2d(out, proj_weight), squeezed)
    if return_attention:
        return out, attn
    return out


def gdfn(
    f: torch.Tensor,
    in_weight: torch.Tensor,
    dw_weight: torch.Tensor,
    out_weight: torch.Tensor,
) -> torch.Tensor:
    """门控深度卷积前馈：逐点扩展到 2·hidden，深度 3×3，拆分后 GELU 门控，逐点投影回 C"""
    batch, squeezed = as_batch(f)
    x = conv2d(batch, in_weight)
    x = conv2d(x, dw_weight, padding=1, groups=x.shape[1])
    x1, x2 = x.chunk(2, dim=1)
    x = F.gelu(x1) * x2
    return restore_batch(conv2d(x, out_weight), squeezed)


# ========== 计算量统计 ==========
def conv_macs(conv: nn.Conv2d, height: int, width: int) -> int:
    """卷积层的乘加次数（输入分辨率 height×width）"""
    kh, kw = conv.kernel_size
    out_h = (height + 2 * conv.padding[0] - kh) // conv.stride[0] + 1
    out_w = (width + 2 * conv.padding[1] - kw) // conv.stride[1] + 1
    return out_h * out_w * (conv.in_channels // conv.groups) * kh * kw * conv.out_channels


def module_macs(module: nn.Module, height: int, width: int) -> int:
    """统计单个模块的乘加次数"""
    if isinstance(module, nn.Conv2d):
        return conv_macs(module, height, width)
    if hasattr(module, "macs"):
        return module.macs(height, width)
    raise ConfigurationError(f"{type(module).__name__} 不支持计算量统计", "module supports macs")


# ========== 模块 ==========
class LayerNorm(nn.Module):
    """带偏置的通道层归一化"""

    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.dim = dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm_channel(x, self.weight, self.bias)

    def macs(self, height: int, width: int) -> int:
        # 归一化与仿射各计一次
        return 2 * self.dim * height * width


class MDTA(nn.Module):
    """Multi-Dconv Head Transposed Attention"""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigurationError(f"通道数 {dim} 不能被头数 {num_heads} 整除", "C % heads == 0")
        self.dim = dim
        self.num_heads = num_heads
        self.temperature = nn.Parameter(torch.ones(num_heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, kernel_size=1, bias=False)
        self.qkv_dwconv = nn.Conv2d(dim * 3, dim * 3, kernel_size=3, padding=1, groups=dim * 3, bias=False)
        self.project_out = nn.Conv2d(dim, dim, kernel_size=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mdta(x, self.qkv.weight, self.qkv_dwconv.weight, self.temperature,
                    self.project_out.weight, self.num_heads)

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        """返回 softmax 后的通道注意力矩阵"""
        _, attn = mdta(x, self.qkv.weight, self.qkv_dwconv.weight, self.temperature,
                       self.project_out.weight, self.num_heads, return_attention=True)
        return attn

    def macs(self, height: int, width: int) -> int:
        pixels = height * width
        head_dim = self.dim // self.num_heads
        # Q·K^T 与 attn·V 各 heads·(C/heads)²·HW
        attention = 2 * self.num_heads * head_dim * head_dim * pixels
        return (conv_macs(self.qkv, height, width) + conv_macs(self.qkv_dwconv, height, width)
                + attention + conv_macs(self.project_out, height, width))


class GDFN(nn.Module):
    """Gated-Dconv Feed-Forward Network"""

    def __init__(self, dim: int, expansion: float):
        super().__init__()
        if expansion <= 0:
            raise ConfigurationError(f"扩展系数 {expansion} 必须为正", "expansion > 0")
        hidden = int(dim * expansion)
        self.hidden = hidden
        self.project_in = nn.Conv2d(dim, hidden * 2, kernel_size=1, bias=False)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, kernel_size=3, padding=1, groups=hidden * 2, bias=False)
        self.project_out = nn.Conv2d(hidden, dim, kernel_size=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gdfn(x, self.project_in.weight, self.dwconv.weight, self.project_out.weight)

    def macs(self, height: int, width: int) -> int:
        return (conv_macs(self.project_in, height, width) + conv_macs(self.dwconv, height, width)
                + conv_macs(self.project_out, height, width))


class FeatureBlock(nn.Module):
    """特征提取块：f → f + MDTA(LN(f)) → f + GDFN(LN(f))"""

    def __init__(self, dim: int, num_heads: int, expansion: float = 2.66):
        super().__init__()
        self.dim = dim
        self.norm1 = LayerNorm(dim)
        self.attn = MDTA(dim, num_heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = GDFN(dim, expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.ffn(self.norm2(x))
        return x

    def residual_projections(self) -> List[nn.Parameter]:
        """残差分支的输出投影（置零即恒等映射）"""
        return [self.attn.project_out.weight, self.ffn.project_out.weight]

    def macs(self, height: int, width: int) -> int:
        return (self.norm1.macs(height, width) + self.attn.macs(height, width)
                + self.norm2.macs(height, width) + self.ffn.macs(height, width))


class Downsample(nn.Module):
    """DOWN：3×3 卷积 C→C/2，再 pixel-unshuffle(2)，输出 2C 通道、空间减半"""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigurationError(f"下采样通道数 {dim} 必须为偶数", "C % 2 == 0")
        self.body = nn.Conv2d(dim, dim // 2, kernel_size=3, padding=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        height, width = x.shape[-2:]
        if height % 2 != 0 or width % 2 != 0:
            raise DimensionError(f"下采样需要偶数尺寸，实际 {height}×{width}（请先填充）", required_multiple=2)
        batch, squeezed = as_batch(x)
        return restore_batch(F.pixel_unshuffle(self.body(batch), 2), squeezed)

    def macs(self, height: int, width: int) -> int:
        return conv_macs(self.body, height, width)


class Upsample(nn.Module):
    """UP：k×k 卷积 C→2C，再 pixel-shuffle(2)，输出 C/2 通道、空间加倍"""

    def __init__(self, dim: int, kernel_size: int = 3):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigurationError(f"上采样通道数 {dim} 必须为偶数", "C % 2 == 0")
        if kernel_size % 2 != 1:
            raise ConfigurationError(f"上采样卷积核 {kernel_size} 必须为奇数", "upsample_kernel is odd")
        self.body = nn.Conv2d(dim, dim * 2, kernel_size=kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] % 2 != 0:
            raise ConfigurationError(f"上采样输入通道 {x.shape[-3]} 必须为偶数", "C % 2 == 0")
        batch, squeezed = as_batch(x)
        return restore_batch(F.pixel_shuffle(self.body(batch), 2), squeezed)

    def macs(self, height: int, width: int) -> int:
        return conv_macs(self.body, height, width)


def feature_block(f: torch.Tensor, block: FeatureBlock) -> torch.Tensor:
    """函数式入口：运行一个特征块"""
    return block(f)


def downsample(f: torch.Tensor, op: Downsample) -> torch.Tensor:
    """函数式入口：[C,H,W] → [2C,H/2,W/2]"""
    return op(f)


def upsample(f: torch.Tensor, op: Upsample) -> torch.Tensor:
    """函数式入口：[C,H,W] → [C/2,2H,2W]"""
    return op(f)


# ========== 梯度检查 ==========
def grad_check(
    op: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor] = (),
    eps: float = 1e-4,
    params: Sequence[torch.Tensor] = (),
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """
    中心差分梯度检查（float64）

    非标量输出用固定随机权重加权求和得到标量。

    Args:
        op: 可微算子，op(*inputs) → 张量
        inputs: 输入张量（会复制为 float64 叶子节点）
        eps: 差分步长
        params: 额外检查的参数（需已是 float64，如 module.double() 之后的参数）
        max_entries: 每个张量最多检查的元素数，None 表示全部
        seed: 采样与投影权重的随机种子
        floor: 相对误差分母下限

    Returns:
        max |analytic − numeric| / max(|analytic|, |numeric|, floor)

    Raises:
        NumericalError: 前向出现非有限值
    """
    if eps <= 0:
        raise ConfigurationError(f"eps={eps} 必须为正", "eps > 0")
    leaves = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    for p in params:
        if p.dtype != torch.float64:
            raise ConfigurationError("梯度检查的参数必须为 float64", "params.dtype == float64")
    targets = leaves + list(params)
    if not targets:
        raise ConfigurationError("没有需要检查的张量", "inputs or params non-empty")

    generator = torch.Generator().manual_seed(seed)
    reference = op(*leaves)
    weights = torch.randn(reference.shape, generator=generator, dtype=torch.float64)

    def scalar() -> torch.Tensor:
        out = op(*leaves)
        if not torch.isfinite(out).all():
            raise NumericalError("梯度检查中前向输出出现非有限值", "grad_check")
        return (out * weights).sum()

    analytic = torch.autograd.grad(scalar(), targets, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for target, grad in zip(targets, analytic):
            grad = torch.zeros_like(target) if grad is None else grad
            flat = target.view(-1)
            numel = flat.numel()
            if max_entries is not None and numel > max_entries:
                indices = torch.randperm(numel, generator=generator)[:max_entries].tolist()
            else:
                indices = range(numel)
            flat_grad = grad.reshape(-1)
            for idx in indices:
                original = flat[idx].item()
                flat[idx] = original + eps
                plus = scalar().item()
                flat[idx] = original - eps
                minus = scalar().item()
                flat[idx] = original
                numeric = (plus - minus) / (2 * eps)
                exact = flat_grad[idx].item()
                rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                worst = max(worst, rel)
    logger.debug(f"梯度检查完成: {len(targets)} 个张量, 最大相对误差 {worst:.3e}")
    return worst
