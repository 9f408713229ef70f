"""
语义引导模块
上下文提取（冻结编码器）、patch 化、交叉注意力、SemanticGuidance / SemanticRefine 以及 SE-SymUNet 解码循环
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from config import get_settings
from exceptions import ConfigurationError, ContractError, DimensionError, FormatError
from nn_core import as_batch, restore_batch, ensure_finite
from schemas import GuidanceMode, ModelConfig
from tensor_io import load_tensor, save_tensor

logger = logging.getLogger(__name__)

CONTEXT_SUFFIX = ".ctx.symt"
STUB_PATCH = 14
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class SemanticContext:
    """语义上下文 Z：tokens 为 [N_z, D_z] 或 [B, N_z, D_z]，level_tag 为产生它的解码层"""
    tokens: torch.Tensor
    level_tag: int

    @property
    def shape(self):
        return tuple(self.tokens.shape[-2:])

    def validate(self, tokens: int, dim: int) -> "SemanticContext":
        if self.shape != (tokens, dim):
            raise DimensionError(f"语义上下文形状 {self.shape} 与配置 ({tokens}, {dim}) 不符")
        ensure_finite(self.tokens, "semantic_context")
        return self


# ========== 冻结编码器 ==========
class StubEncoder(nn.Module):
    """
    冻结的随机特征编码器

    与 ViT-L/14 输出形状一致：固定尺寸缩放 + 归一化，14×14 patch 投影得到网格 token，
    前置一个类别 token，再做无仿射层归一化。权重由种子决定且不参与训练。
    """

    def __init__(self, seed: int = 0, tokens: int = 257, dim: int = 1024):
        super().__init__()
        grid = math.isqrt(tokens - 1)
        if grid * grid + 1 != tokens:
            raise ConfigurationError(f"token 数 {tokens} 不是 网格² + 1", "context_tokens == grid^2 + 1")
        self.grid = grid
        self.input_size = grid * STUB_PATCH
        self.tokens = tokens
        self.dim = dim
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_embed = nn.Conv2d(3, dim, kernel_size=STUB_PATCH, stride=STUB_PATCH, bias=False)
            self.class_embedding = nn.Parameter(torch.randn(dim))
        self.register_buffer("mean", torch.tensor(CLIP_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(CLIP_STD).view(1, 3, 1, 1), persistent=False)
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, image: torch.Tensor) -> torch.Tensor:
        batch, squeezed = as_batch(image)
        if batch.shape[1] != 3:
            raise DimensionError(f"语义编码器需要 RGB 输入，实际 {batch.shape[1]} 通道")
        x = F.interpolate(batch.float(), size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        x = (x - self.mean) / self.std
        x = rearrange(self.patch_embed(x), "b d h w -> b (h w) d")
        cls = self.class_embedding.view(1, 1, -1).expand(x.shape[0], -1, -1)
        x = F.layer_norm(torch.cat([cls, x], dim=1), (self.dim,))
        return restore_batch(x, squeezed)


class FileContextEncoder:
    """预计算上下文适配器：<stem>.ctx.symt，形状 (N_z, D_z)"""

    def __init__(self, context_dir: Union[str, Path], tokens: int = 257, dim: int = 1024):
        self.context_dir = Path(context_dir)
        self.tokens = tokens
        self.dim = dim

    def path_for(self, stem: str) -> Path:
        return self.context_dir / f"{stem}{CONTEXT_SUFFIX}"

    def load(self, stem: str) -> torch.Tensor:
        path = self.path_for(stem)
        if not path.exists():
            raise FormatError(f"缺少预计算上下文文件 {path}", str(path))
        return load_tensor(path, expected_shape=(self.tokens, self.dim))

    def save(self, stem: str, tokens: torch.Tensor) -> Path:
        if tuple(tokens.shape) != (self.tokens, self.dim):
            raise FormatError(f"上下文形状 {tuple(tokens.shape)} 与 ({self.tokens}, {self.dim}) 不符", stem)
        return save_tensor(self.path_for(stem), tokens)


ContextEncoder = Union[StubEncoder, FileContextEncoder]


@lru_cache(maxsize=4)
def _cached_encoder(kind: str, seed: int, context_dir: Optional[str], tokens: int, dim: int) -> ContextEncoder:
    if kind == "stub":
        return StubEncoder(seed, tokens, dim)
    if kind == "file":
        if not context_dir:
            raise ConfigurationError("file 编码器需要设置 SYMUNET_CONTEXT_DIR", "context_dir set for file encoder")
        return FileContextEncoder(context_dir, tokens, dim)
    raise ConfigurationError(f"未知编码器 {kind!r}，可选 stub / file", "encoder in {stub, file}")


def get_context_encoder(
    config: Optional[ModelConfig] = None,
    kind: Optional[str] = None,
    seed: Optional[int] = None,
) -> ContextEncoder:
    """按运行配置获取编码器（相同设置复用同一实例）；kind / seed 覆盖 SYMUNET_ENCODER / SYMUNET_ENCODER_SEED"""
    settings = get_settings()
    tokens = config.context_tokens if config else 257
    dim = config.context_dim if config else 1024
    kind = kind if kind is not None else settings.encoder
    seed = seed if seed is not None else settings.encoder_seed
    return _cached_encoder(kind, seed, settings.context_dir, tokens, dim)


def encoder_record(encoder: Optional[ContextEncoder] = None) -> Dict[str, Any]:
    """写入检查点的编码器描述；未给出编码器时按运行配置"""
    if encoder is None:
        settings = get_settings()
        kind, seed = settings.encoder, settings.encoder_seed
    elif isinstance(encoder, StubEncoder):
        kind, seed = "stub", encoder.seed
    else:
        kind, seed = "file", None
    return {"kind": kind, "seed": seed} if kind == "stub" else {"kind": kind}


def extract_context(
    image: torch.Tensor,
    encoder: ContextEncoder,
    stem: Optional[Union[str, Sequence[str]]] = None,
    level_tag: int = 0,
) -> SemanticContext:
    """
    从退化图像提取语义上下文

    Args:
        image: [3,H,W] 或 [B,3,H,W]
        encoder: StubEncoder 或 FileContextEncoder
        stem: 文件适配器需要的图像文件名主干（批量时为列表）
        level_tag: 上下文所属层级

    Returns:
        SemanticContext，tokens 形状 (N_z, D_z)（批量时带 B 维）
    """
    if isinstance(encoder, StubEncoder):
        tokens = encoder(image)
    elif isinstance(encoder, FileContextEncoder):
        if stem is None:
            raise ContractError("文件编码器需要图像文件名主干", "extract_context")
        if isinstance(stem, str):
            tokens = encoder.load(stem)
            if image.dim() == 4:
                tokens = tokens.unsqueeze(0).expand(image.shape[0], -1, -1)
        else:
            tokens = torch.stack([encoder.load(s) for s in stem])
    else:
        raise ConfigurationError(f"不支持的编码器 {type(encoder).__name__}", "encoder in {stub, file}")
    return SemanticContext(tokens.to(image.dtype), level_tag)


# ========== patch 化 ==========
def patchify(f: torch.Tensor, p: int) -> torch.Tensor:
    """[C,H,W] → [(H/p)·(W/p), p²·C]（批量输入保留 B 维）"""
    batch, squeezed = as_batch(f)
    height, width = batch.shape[-2:]
    if p < 1 or height % p != 0 or width % p != 0:
        raise DimensionError(f"特征尺寸 {height}×{width} 不能被 patch={p} 整除", required_multiple=p)
    tokens = rearrange(batch, "b c (h p1) (w p2) -> b (h w) (p1 p2 c)", p1=p, p2=p)
    return tokens.squeeze(0) if squeezed else tokens


def unpatchify(tokens: torch.Tensor, p: int, channels: int, height: int, width: int) -> torch.Tensor:
    """patchify 的逆变换"""
    squeezed = tokens.dim() == 2
    batch = tokens.unsqueeze(0) if squeezed else tokens
    if height % p != 0 or width % p != 0:
        raise DimensionError(f"目标尺寸 {height}×{width} 不能被 patch={p} 整除", required_multiple=p)
    expected = ((height // p) * (width // p), p * p * channels)
    if tuple(batch.shape[-2:]) != expected:
        raise DimensionError(f"token 形状 {tuple(batch.shape[-2:])} 与期望 {expected} 不符")
    f = rearrange(batch, "b (h w) (p1 p2 c) -> b c (h p1) (w p2)", h=height // p, w=width // p, p1=p, p2=p)
    return f.squeeze(0) if squeezed else f


# ========== 交叉注意力 ==========
class CrossAttention(nn.Module):
    """多头交叉注意力：查询来自 x，键值来自 context"""

    def __init__(self, query_dim: int, context_dim: int, heads: int = 8, inner_dim: Optional[int] = None):
        super().__init__()
        inner_dim = inner_dim or query_dim
        if heads < 1 or inner_dim % heads != 0:
            raise ConfigurationError(f"内部维度 {inner_dim} 不能被头数 {heads} 整除", "inner_dim % heads == 0")
        self.query_dim = query_dim
        self.context_dim = context_dim
        self.inner_dim = inner_dim
        self.heads = heads
        self.scale = (inner_dim // heads) ** -0.5
        self.to_q = nn.Linear(query_dim, inner_dim, bias=False)
        self.to_k = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_v = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_out = nn.Linear(inner_dim, query_dim, bias=False)

    def zero_init(self) -> None:
        nn.init.zeros_(self.to_out.weight)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.query_dim or context.shape[-1] != self.context_dim:
            raise ConfigurationError(
                f"交叉注意力维度不符: query {x.shape[-1]}/{self.query_dim}, context {context.shape[-1]}/{self.context_dim}",
                "token dims match attention params")
        squeezed = x.dim() == 2
        if squeezed:
            x = x.unsqueeze(0)
        if context.dim() == 2:
            context = context.unsqueeze(0).expand(x.shape[0], -1, -1)

        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.to_k(context), "b n (h d) -> b h n d", h=self.heads)
        v = rearrange(self.to_v(context), "b n (h d) -> b h n d", h=self.heads)

        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = rearrange(attn @ v, "b h n d -> b n (h d)")
        out = self.to_out(out)
        return out.squeeze(0) if squeezed else out

    def macs(self, queries: int, keys: int) -> int:
        return (queries * self.query_dim * self.inner_dim
                + 2 * keys * self.context_dim * self.inner_dim
                + 2 * queries * keys * self.inner_dim
                + queries * self.inner_dim * self.query_dim)


def cross_attention(q_in: torch.Tensor, kv_in: torch.Tensor, params: CrossAttention) -> torch.Tensor:
    """函数式入口：tokens[Nq,Dq] × tokens[Nk,Dk] → tokens[Nq,Dq]"""
    return params(q_in, kv_in)


def _match_batch(tokens: torch.Tensor, batch: int) -> torch.Tensor:
    if tokens.dim() == 2:
        return tokens.unsqueeze(0).expand(batch, -1, -1)
    if tokens.shape[0] != batch:
        raise DimensionError(f"上下文批量 {tokens.shape[0]} 与特征批量 {batch} 不符")
    return tokens


class SemanticGuidance(nn.Module):
    """f + unpatchify(CA(patchify(f), proj(Z)))"""

    def __init__(self, channels: int, patch: int, context_dim: int = 1024, heads: int = 8):
        super().__init__()
        self.channels = channels
        self.patch = patch
        self.token_dim = patch * patch * channels
        self.context_dim = context_dim
        self.context_proj = nn.Linear(context_dim, self.token_dim, bias=False)
        self.attn = CrossAttention(self.token_dim, self.token_dim, heads)

    def forward(self, f: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        batch, squeezed = as_batch(f)
        _, channels, height, width = batch.shape
        if channels != self.channels:
            raise ConfigurationError(f"引导输入通道 {channels} 与参数 {self.channels} 不符", "channels match guidance params")
        tokens = patchify(batch, self.patch)
        context = self.context_proj(_match_batch(z, batch.shape[0]))
        out = batch + unpatchify(self.attn(tokens, context), self.patch, channels, height, width)
        return restore_batch(out, squeezed)

    def macs(self, height: int, width: int, context_tokens: int) -> int:
        queries = (height // self.patch) * (width // self.patch)
        return context_tokens * self.context_dim * self.token_dim + self.attn.macs(queries, context_tokens)


class SemanticRefine(nn.Module):
    """Z + CA(Z, proj(patchify(f)))"""

    def __init__(self, channels: int, patch: int, context_dim: int = 1024, heads: int = 8):
        super().__init__()
        self.channels = channels
        self.patch = patch
        self.token_dim = patch * patch * channels
        self.feature_proj = nn.Linear(self.token_dim, context_dim, bias=False)
        self.attn = CrossAttention(context_dim, context_dim, heads)

    def forward(self, f: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        batch, squeezed = as_batch(f)
        if batch.shape[1] != self.channels:
            raise ConfigurationError(f"细化输入通道 {batch.shape[1]} 与参数 {self.channels} 不符", "channels match refine params")
        features = self.feature_proj(patchify(batch, self.patch))
        if squeezed and z.dim() == 2:
            return z + self.attn(z, features.squeeze(0))
        z = _match_batch(z, batch.shape[0])
        return z + self.attn(z, features)

    def macs(self, height: int, width: int, context_tokens: int) -> int:
        keys = (height // self.patch) * (width // self.patch)
        return keys * self.token_dim * self.attn.context_dim + self.attn.macs(context_tokens, keys)


def semantic_guidance(f: torch.Tensor, z: SemanticContext, params: SemanticGuidance, p: Optional[int] = None) -> torch.Tensor:
    """函数式入口：语义引导，输出形状同 f"""
    if p is not None and p != params.patch:
        raise ConfigurationError(f"patch={p} 与参数 patch={params.patch} 不符", "patch matches guidance params")
    return params(f, z.tokens)


def semantic_refine(f: torch.Tensor, z: SemanticContext, params: SemanticRefine, p: Optional[int] = None) -> SemanticContext:
    """函数式入口：语义细化，返回下一层的上下文"""
    if p is not None and p != params.patch:
        raise ConfigurationError(f"patch={p} 与参数 patch={params.patch} 不符", "patch matches refine params")
    return SemanticContext(params(f, z.tokens), z.level_tag - 1)


class SemanticGuidanceStack(nn.Module):
    """各层（含瓶颈）的引导/细化模块，按层级 0..L 索引"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.mode = config.guidance_mode
        self.levels = config.levels
        self.context_tokens = config.context_tokens
        self.guide = nn.ModuleList([
            SemanticGuidance(config.decoder_channels(i), config.patch_at(i), config.context_dim, config.guidance_heads)
            for i in range(config.levels + 1)
        ])
        if self.mode == GuidanceMode.BIDIRECTIONAL:
            self.refine = nn.ModuleList([
                SemanticRefine(config.decoder_channels(i), config.patch_at(i), config.context_dim, config.guidance_heads)
                for i in range(config.levels + 1)
            ])
        else:
            self.refine = None

    def macs(self, height: int, width: int) -> int:
        total = 0
        for level, module in enumerate(self.guide):
            total += module.macs(height >> level, width >> level, self.context_tokens)
        if self.refine is not None:
            for level, module in enumerate(self.refine):
                total += module.macs(height >> level, width >> level, self.context_tokens)
        return total


def _no_taps(name: str, tensor: torch.Tensor) -> None:
    return None


def forward_se_symunet(
    model,
    y: torch.Tensor,
    encoder: Optional[ContextEncoder] = None,
    context: Optional[Union[SemanticContext, torch.Tensor]] = None,
    stem: Optional[Union[str, Sequence[str]]] = None,
    tap: Callable = _no_taps,
) -> torch.Tensor:
    """
    SE-SymUNet 前向

    对 i = L..0：解码输入先经语义引导，再过解码块（i = L 为瓶颈）；
    双向模式下每层解码输出再细化上下文，单向模式全程使用初始上下文。

    Args:
        model: 带 guidance 模块的 SymUNet
        y: 退化图像 [3,H,W] 或 [B,3,H,W]
        encoder: 上下文编码器，默认取运行配置
        context: 预先提取的上下文（优先于 encoder）
        stem: 文件编码器使用的文件名主干
        tap: 特征抽头回调

    Returns:
        复原图像，形状同 y

    Raises:
        ContractError: 模型未启用语义引导
    """
    config = model.config
    if config.guidance_mode == GuidanceMode.NONE or model.guidance is None:
        raise ContractError("guidance_mode=none 的模型请使用 forward_symunet", "forward_se_symunet")
    batch, squeezed = as_batch(y)
    model.check_input(batch, config.required_multiple())
    L = config.levels

    if context is None:
        context = extract_context(batch, encoder or get_context_encoder(config), stem, level_tag=L)
    elif isinstance(context, torch.Tensor):
        context = SemanticContext(context, L)
    context.validate(config.context_tokens, config.context_dim)
    z = _match_batch(context.tokens, batch.shape[0])

    guidance = model.guidance
    bidirectional = guidance.refine is not None

    f, skips = model.encode(batch, tap)
    f = model.bottleneck(guidance.guide[L](f, z))
    tap("bottleneck", f)
    if bidirectional:
        z = guidance.refine[L](f, z)
    for level in reversed(range(L)):
        f_in = guidance.guide[level](model.fuse(level, f, skips[level]), z)
        f = model.decoders[level](f_in)
        tap(f"f_dec_{level}", f)
        if bidirectional:
            z = guidance.refine[level](f, z)
    out = restore_batch(model.head(f, batch), squeezed)
    return ensure_finite(out, "forward_se_symunet")
