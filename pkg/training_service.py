"""
训练服务
余弦退火 + AdamW，L1 + λ·FFT 损失；定期写检查点与 CSV 训练日志，支持逐位一致的断点续训
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import torch
import torch.nn as nn

from checkpoint_service import checkpoint_encoder, load_checkpoint, save_checkpoint
from dataset_service import BatchStream
from exceptions import ConfigurationError, NumericalError, TrainingError
from metrics import batch_psnr, total_loss
from models import SymUNet, forward_symunet
from schemas import TrainConfig
from semantic import FileContextEncoder, forward_se_symunet, get_context_encoder

logger = logging.getLogger(__name__)

LOG_HEADER = ["step", "lr", "loss", "psnr_val"]
CHECKPOINT_DIR = "checkpoint"
LOG_FILE = "train_log.csv"


@dataclass
class TrainLogRecord:
    """训练日志的一行"""
    step: int
    lr: float
    loss: float
    psnr_val: Optional[float] = None

    def to_row(self) -> List[str]:
        return [
            str(self.step),
            f"{self.lr:.10g}",
            f"{self.loss:.8f}",
            "" if self.psnr_val is None else f"{self.psnr_val:.4f}",
        ]


@dataclass
class TrainResult:
    model: SymUNet
    records: List[TrainLogRecord] = field(default_factory=list)
    final_step: int = 0
    checkpoint: Optional[Path] = None


# ========== 学习率与优化器 ==========
def cosine_lr(step: int, total: int, lr0: float, lr_min: float) -> float:
    """lr = lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))，两端精确返回 lr0 / lr_min"""
    if step <= 0:
        return lr0
    if step >= total:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total))


def build_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    """解耦权重衰减的 AdamW"""
    return torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=config.lr0,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
        weight_decay=config.weight_decay,
    )


def adamw_step(
    named_params: Iterable[Tuple[str, torch.Tensor]],
    optimizer: torch.optim.Optimizer,
    lr: float,
    step: Optional[int] = None,
) -> None:
    """
    检查梯度后执行一步 AdamW

    Args:
        named_params: (参数名, 参数) 序列，用于定位非有限梯度
        optimizer: AdamW 优化器
        lr: 本步学习率
        step: 当前训练步（写入错误信息）

    Raises:
        TrainingError: 梯度出现 NaN/Inf
    """
    for name, param in named_params:
        if param.grad is not None and not torch.isfinite(param.grad).all():
            raise TrainingError(f"参数 {name} 的梯度出现非有限值", parameter=name, step=step)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


# ========== 前向 ==========
def model_forward(model: SymUNet, degraded: torch.Tensor, encoder=None) -> torch.Tensor:
    """按模型类型选择主干或语义引导前向"""
    if model.guidance is not None:
        return forward_se_symunet(model, degraded, encoder=encoder)
    return forward_symunet(model, degraded)


def evaluate_batch(model: SymUNet, degraded: torch.Tensor, clean: torch.Tensor, encoder=None) -> float:
    """验证批的平均 PSNR"""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        restored = model_forward(model, degraded, encoder).clamp(0.0, 1.0)
    model.train(was_training)
    return batch_psnr(restored, clean)


def _write_log(path: Path, records: List[TrainLogRecord]) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for record in records:
            writer.writerow(record.to_row())


def read_log(path: Union[str, Path]) -> List[TrainLogRecord]:
    """读取 CSV 训练日志"""
    records = []
    with Path(path).open(encoding="utf-8", newline="") as handle:
        for row in csv.DictReader(handle):
            records.append(TrainLogRecord(
                step=int(row["step"]),
                lr=float(row["lr"]),
                loss=float(row["loss"]),
                psnr_val=float(row["psnr_val"]) if row["psnr_val"] else None,
            ))
    return records


# ========== 训练循环 ==========
def train_loop(
    model: SymUNet,
    stream: BatchStream,
    config: TrainConfig,
    out_dir: Union[str, Path],
    resume: Optional[Union[str, Path]] = None,
    encoder=None,
    stop_at: Optional[int] = None,
) -> TrainResult:
    """
    训练主循环

    Args:
        model: 已构建的模型
        stream: 确定性批数据流
        config: 训练配置
        out_dir: 输出目录（checkpoint/ 与 train_log.csv）
        resume: 续训的检查点目录
        encoder: SE 变体的上下文编码器，默认取运行配置
        stop_at: 提前停止的步数（学习率仍按 total_steps 排程，用于分段训练）

    Returns:
        TrainResult

    Raises:
        TrainingError: 损失或梯度出现非有限值（已写出的检查点保留不动）
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_dir = out_dir / CHECKPOINT_DIR
    log_path = out_dir / LOG_FILE

    optimizer = build_optimizer(model, config)
    records: List[TrainLogRecord] = []
    start = 0
    state = None
    if resume:
        state = load_checkpoint(resume, model, optimizer)
        start = state.step
        if (Path(resume).parent / LOG_FILE).exists():
            records = [r for r in read_log(Path(resume).parent / LOG_FILE) if r.step <= start]
        logger.info(f"从检查点续训: {resume} (step={start})")

    if model.guidance is not None:
        encoder = encoder or (checkpoint_encoder(state) if state else get_context_encoder(model.config))
        if isinstance(encoder, FileContextEncoder):
            raise ConfigurationError("训练时随机裁剪无法使用预计算上下文，请使用 stub 编码器", "train encoder is stub")

    end = min(config.total_steps, stop_at) if stop_at else config.total_steps
    validation = stream.validation_batch()
    model.train()
    last_checkpoint = None
    for step, degraded, clean in stream.batches(start, end):
        lr = cosine_lr(step, config.total_steps, config.lr0, config.lr_min)

        optimizer.zero_grad(set_to_none=True)
        try:
            loss = total_loss(model_forward(model, degraded, encoder), clean, config.lambda_fft)
        except NumericalError:
            loss = torch.tensor(float("nan"))
        if not torch.isfinite(loss):
            _write_log(log_path, records)
            raise TrainingError(f"第 {step} 步损失为非有限值，训练中止（保留最近检查点）", step=step)
        loss.backward()
        adamw_step(model.named_parameters(), optimizer, lr, step)

        done = step + 1
        record = TrainLogRecord(done, lr, loss.item())
        if done % config.val_every == 0 or done == config.total_steps:
            record.psnr_val = evaluate_batch(model, *validation, encoder=encoder)
            logger.info(f"step {done}/{config.total_steps} lr={lr:.3e} loss={record.loss:.5f} psnr_val={record.psnr_val:.2f}dB")
        records.append(record)

        if done % config.checkpoint_every == 0 or done == end:
            last_checkpoint = save_checkpoint(checkpoint_dir, model, optimizer, done, config, encoder)
            _write_log(log_path, records)

    _write_log(log_path, records)
    return TrainResult(model, records, max(start, end), last_checkpoint or (checkpoint_dir if resume else None))
