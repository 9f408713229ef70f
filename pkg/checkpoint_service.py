"""
检查点服务
目录格式: meta.json + manifest.txt/params.bin（参数）+ optimizer_manifest.txt/optimizer.bin（AdamW 状态）+ rng.bin
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from exceptions import CheckpointError, SymUNetError, handle_checkpoint_error
from models import SymUNet, build_model
from config import get_settings
from schemas import ModelConfig, TrainConfig
from semantic import ContextEncoder, encoder_record, get_context_encoder

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
META_FILE = "meta.json"
PARAMS_MANIFEST = "manifest.txt"
PARAMS_BLOB = "params.bin"
OPTIMIZER_MANIFEST = "optimizer_manifest.txt"
OPTIMIZER_BLOB = "optimizer.bin"
RNG_FILE = "rng.bin"


@dataclass
class CheckpointState:
    """load_checkpoint 的返回值"""
    model: SymUNet
    step: int
    model_config: ModelConfig
    train_config: Optional[TrainConfig]
    path: Path
    context_encoder: Optional[Dict[str, Any]] = None


# ========== 张量打包 ==========
def _pack(tensors: List[Tuple[str, torch.Tensor]]) -> Tuple[str, bytes]:
    """name\tshape\toffset 清单 + float32 LE 拼接"""
    lines, chunks, offset = [], [], 0
    for name, tensor in tensors:
        data = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()
        shape = ",".join(str(d) for d in tensor.shape)
        lines.append(f"{name}\t{shape}\t{offset}")
        chunks.append(data)
        offset += len(data)
    return "".join(line + "\n" for line in lines), b"".join(chunks)


def _unpack(manifest: str, blob: bytes, source: str) -> Dict[str, torch.Tensor]:
    tensors: Dict[str, torch.Tensor] = {}
    for lineno, line in enumerate(manifest.splitlines(), start=1):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise CheckpointError(f"{source}:{lineno} 清单行格式错误", source)
        name, shape_text, offset_text = fields
        shape = tuple(int(d) for d in shape_text.split(",") if d)
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset_text)
        if offset + 4 * count > len(blob):
            raise CheckpointError(f"{source}: 张量 {name} 超出数据文件范围", source, name)
        array = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[name] = torch.from_numpy(array.astype(np.float32))
    return tensors


def _write_atomic(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _optimizer_tensors(model: nn.Module, optimizer: torch.optim.Optimizer) -> List[Tuple[str, torch.Tensor]]:
    tensors = []
    for name, param in model.named_parameters():
        state = optimizer.state.get(param)
        if not state:
            continue
        step = state["step"]
        step = step if isinstance(step, torch.Tensor) else torch.tensor(float(step))
        tensors.append((f"exp_avg/{name}", state["exp_avg"]))
        tensors.append((f"exp_avg_sq/{name}", state["exp_avg_sq"]))
        tensors.append((f"step/{name}", step.reshape(())))
    return tensors


# ========== 保存 / 读取 ==========
def save_checkpoint(
    path: Union[str, Path],
    model: SymUNet,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
    train_config: Optional[TrainConfig] = None,
    encoder: Optional[ContextEncoder] = None,
) -> Path:
    """
    保存检查点（相同内容得到逐字节相同的文件）

    Args:
        path: 检查点目录
        model: 模型
        optimizer: AdamW 优化器（可选）
        step: 已完成的训练步数
        train_config: 训练配置（可选）
        encoder: SE 变体使用的上下文编码器，记入 meta（默认按运行配置）

    Returns:
        检查点目录
    """
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        manifest, blob = _pack(list(model.named_parameters()))
        opt_manifest, opt_blob = _pack(_optimizer_tensors(model, optimizer) if optimizer else [])
        meta = {
            "version": CHECKPOINT_VERSION,
            "step": int(step),
            "model_config": model.config.model_dump(mode="json"),
            "train_config": train_config.model_dump(mode="json") if train_config else None,
            "context_encoder": encoder_record(encoder) if model.guidance is not None else None,
        }
        _write_atomic(path / PARAMS_MANIFEST, manifest.encode("utf-8"))
        _write_atomic(path / PARAMS_BLOB, blob)
        _write_atomic(path / OPTIMIZER_MANIFEST, opt_manifest.encode("utf-8"))
        _write_atomic(path / OPTIMIZER_BLOB, opt_blob)
        _write_atomic(path / RNG_FILE, torch.get_rng_state().numpy().tobytes())
        # meta 最后写入，存在即表示检查点完整
        _write_atomic(path / META_FILE, (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode("utf-8"))
    except OSError as e:
        raise handle_checkpoint_error("保存", str(path), e)
    logger.info(f"检查点已保存: {path} (step={step})")
    return path


def read_meta(path: Union[str, Path]) -> dict:
    """读取并校验 meta.json"""
    path = Path(path)
    meta_path = path / META_FILE
    if not meta_path.exists():
        raise CheckpointError(f"检查点不存在或不完整: {path}", str(path))
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise handle_checkpoint_error("读取", str(path), e)
    version = meta.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"检查点版本 {version} 与当前版本 {CHECKPOINT_VERSION} 不符", str(path), "version")
    return meta


def load_checkpoint(
    path: Union[str, Path],
    model: Optional[SymUNet] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    restore_rng: bool = True,
) -> CheckpointState:
    """
    读取检查点

    Args:
        path: 检查点目录
        model: 目标模型；为空时按 meta 中的配置新建
        optimizer: 需要恢复状态的优化器（可选）
        restore_rng: 是否恢复全局随机数状态

    Returns:
        CheckpointState

    Raises:
        CheckpointError: 目录缺失、版本不符、张量缺失或形状不符
    """
    path = Path(path)
    meta = read_meta(path)
    try:
        model_config = ModelConfig(**meta["model_config"])
        train_config = TrainConfig(**meta["train_config"]) if meta.get("train_config") else None
    except (SymUNetError, ValueError, TypeError) as e:
        raise handle_checkpoint_error("解析配置", str(path), e)
    if model is None:
        model = build_model(model_config)

    try:
        params = _unpack((path / PARAMS_MANIFEST).read_text(encoding="utf-8"),
                         (path / PARAMS_BLOB).read_bytes(), str(path / PARAMS_BLOB))
    except OSError as e:
        raise handle_checkpoint_error("读取", str(path), e)

    expected = dict(model.named_parameters())
    for name, param in expected.items():
        if name not in params:
            raise CheckpointError(f"检查点缺少张量 {name}", str(path), name)
        if tuple(params[name].shape) != tuple(param.shape):
            raise CheckpointError(
                f"张量 {name} 形状 {tuple(params[name].shape)} 与模型 {tuple(param.shape)} 不符", str(path), name)
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointError(f"检查点含有模型中不存在的张量 {extra[0]}", str(path), extra[0])
    with torch.no_grad():
        for name, param in expected.items():
            param.copy_(params[name].to(param.dtype))

    if optimizer is not None:
        _load_optimizer(path, model, optimizer)
    if restore_rng and (path / RNG_FILE).exists():
        torch.set_rng_state(torch.from_numpy(np.frombuffer((path / RNG_FILE).read_bytes(), dtype=np.uint8).copy()))

    step = int(meta.get("step", 0))
    logger.info(f"检查点已读取: {path} (step={step})")
    return CheckpointState(model, step, model_config, train_config, path, meta.get("context_encoder"))


def checkpoint_encoder(state: CheckpointState) -> Optional[ContextEncoder]:
    """
    SE 检查点的上下文编码器：按 meta 记录的类型与种子重建

    Raises:
        CheckpointError: 记录的编码器类型与 SYMUNET_ENCODER 不符
    """
    if state.model.guidance is None:
        return None
    record = state.context_encoder
    if record is None:
        return get_context_encoder(state.model_config)
    settings = get_settings()
    kind = record.get("kind")
    if kind != settings.encoder:
        raise CheckpointError(
            f"检查点记录的编码器为 {kind}，当前配置为 {settings.encoder}", str(state.path), "context_encoder")
    seed = record.get("seed")
    if kind == "stub" and seed != settings.encoder_seed:
        logger.warning(f"编码器种子按检查点记录取 {seed}（当前配置 {settings.encoder_seed}）")
    return get_context_encoder(state.model_config, kind=kind, seed=seed)


def _load_optimizer(path: Path, model: nn.Module, optimizer: torch.optim.Optimizer) -> None:
    try:
        tensors = _unpack((path / OPTIMIZER_MANIFEST).read_text(encoding="utf-8"),
                          (path / OPTIMIZER_BLOB).read_bytes(), str(path / OPTIMIZER_BLOB))
    except OSError as e:
        raise handle_checkpoint_error("读取优化器状态", str(path), e)
    optimizer.state.clear()
    for name, param in model.named_parameters():
        if f"step/{name}" not in tensors:
            continue
        for key in ("exp_avg", "exp_avg_sq"):
            if f"{key}/{name}" not in tensors:
                raise CheckpointError(f"优化器状态缺少 {key}/{name}", str(path), f"{key}/{name}")
        optimizer.state[param] = {
            "step": tensors[f"step/{name}"].reshape(()),
            "exp_avg": tensors[f"exp_avg/{name}"].to(param.dtype).reshape(param.shape),
            "exp_avg_sq": tensors[f"exp_avg_sq/{name}"].to(param.dtype).reshape(param.shape),
        }


def parameter_checksum(model: nn.Module) -> str:
    """按参数名排序后 float32 字节的 SHA-256"""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters(), key=lambda item: item[0]):
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes())
    return digest.hexdigest()
