"""
SYMT 张量文件读写
格式: 魔数 "SYMT"，u32 LE 维数，维数个 u32 LE 尺寸，float32 LE 行优先数据
"""

import logging
import struct
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from exceptions import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"SYMT"


def encode_tensor(tensor: torch.Tensor) -> bytes:
    """张量 → SYMT 字节串"""
    array = tensor.detach().to("cpu", torch.float32).contiguous().numpy()
    header = MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.astype("<f4", copy=False).tobytes(order="C")


def decode_tensor(payload: bytes, source: str = "<bytes>") -> torch.Tensor:
    """SYMT 字节串 → float32 张量"""
    if len(payload) < 8 or payload[:4] != MAGIC:
        raise FormatError(f"{source} 不是 SYMT 文件（魔数不符）", source)
    (rank,) = struct.unpack_from("<I", payload, 4)
    offset = 8 + 4 * rank
    if len(payload) < offset:
        raise FormatError(f"{source} 头部被截断", source)
    shape = struct.unpack_from(f"<{rank}I", payload, 8)
    count = int(np.prod(shape)) if rank else 1
    if len(payload) != offset + 4 * count:
        raise FormatError(
            f"{source} 数据长度 {len(payload) - offset} 与形状 {tuple(shape)} 不符", source)
    array = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
    return torch.from_numpy(array.astype(np.float32))


def save_tensor(path: Union[str, Path], tensor: torch.Tensor) -> Path:
    """写入 SYMT 文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(tensor))
    return path


def load_tensor(path: Union[str, Path], expected_shape: Optional[Sequence[int]] = None) -> torch.Tensor:
    """
    读取 SYMT 文件

    Args:
        path: 文件路径
        expected_shape: 期望形状，不符时抛出 FormatError

    Returns:
        float32 张量
    """
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise FormatError(f"无法读取 {path}: {e}", str(path))
    tensor = decode_tensor(payload, str(path))
    if expected_shape is not None and tuple(tensor.shape) != tuple(expected_shape):
        raise FormatError(
            f"{path} 形状 {tuple(tensor.shape)} 与期望 {tuple(expected_shape)} 不符", str(path))
    return tensor
