"""
图像复原服务
读取检查点，对任意尺寸图像做 填充 → 前向 → 裁剪回原尺寸；命令行与 HTTP 接口共用
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import torch

from checkpoint_service import checkpoint_encoder, load_checkpoint
from dataset_service import ManifestEntry, crop_back, load_pair, load_png, pad_to_multiple, save_png
from exceptions import ConfigurationError
from metrics import psnr, ssim
from models import SymUNet, count_parameters
from semantic import FileContextEncoder, forward_se_symunet, get_context_encoder

logger = logging.getLogger(__name__)


@dataclass
class TaskScore:
    """单个任务的评测汇总"""
    task: str
    count: int
    psnr: float
    ssim: float


class Restorer:
    """推理封装：模型 + 检查点信息 + 上下文编码器"""

    def __init__(self, model: SymUNet, step: int = 0, checkpoint: Optional[str] = None, encoder=None):
        self.model = model.eval()
        self.step = step
        self.checkpoint = checkpoint
        self.encoder = encoder
        if model.guidance is not None and encoder is None:
            self.encoder = get_context_encoder(model.config)

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], encoder=None) -> "Restorer":
        state = load_checkpoint(path, restore_rng=False)
        return cls(state.model, state.step, str(path), encoder or checkpoint_encoder(state))

    @property
    def required_multiple(self) -> int:
        return self.model.config.required_multiple()

    def restore(self, image: torch.Tensor, stem: Optional[str] = None) -> torch.Tensor:
        """
        复原单张图像

        Args:
            image: [3,H,W]，取值 [0,1]，尺寸任意
            stem: 文件名主干（文件编码器按此查找上下文）

        Returns:
            复原图像 [3,H,W]，裁剪到 [0,1]
        """
        padded, dims = pad_to_multiple(image, self.required_multiple)
        with torch.no_grad():
            if self.model.guidance is not None:
                if isinstance(self.encoder, FileContextEncoder) and stem is None:
                    raise ConfigurationError("文件编码器需要图像文件名", "stem given for file encoder")
                out = forward_se_symunet(self.model, padded, encoder=self.encoder, stem=stem)
            else:
                out = self.model(padded)
        return crop_back(out, dims).clamp(0.0, 1.0)

    def restore_file(self, image_in: Union[str, Path], image_out: Union[str, Path]) -> Path:
        image_in = Path(image_in)
        restored = self.restore(load_png(image_in), stem=image_in.stem)
        return save_png(image_out, restored)

    def evaluate(self, entries: Sequence[ManifestEntry]) -> List[TaskScore]:
        """
        按任务汇总 PSNR / SSIM（任务按清单中首次出现的顺序排列）

        Raises:
            ConfigurationError: 清单为空
        """
        if not entries:
            raise ConfigurationError("评测清单为空", "manifest non-empty")
        scores: "OrderedDict[str, List[tuple]]" = OrderedDict()
        for entry in entries:
            pair = load_pair(entry)
            stem = Path(entry.degraded_path or entry.clean_path).stem
            restored = self.restore(pair.degraded, stem=stem)
            scores.setdefault(entry.task, []).append((psnr(restored, pair.clean), ssim(restored, pair.clean)))
        results = [
            TaskScore(task, len(values), sum(v[0] for v in values) / len(values), sum(v[1] for v in values) / len(values))
            for task, values in scores.items()
        ]
        logger.info("评测完成: " + ", ".join(f"{r.task}={r.psnr:.2f}dB/{r.ssim:.4f}" for r in results))
        return results

    def info(self) -> Dict:
        return {
            "config": self.model.config.model_dump(mode="json"),
            "parameters": count_parameters(self.model),
            "step": self.step,
            "required_multiple": self.required_multiple,
        }


def average_scores(results: Sequence[TaskScore]) -> TaskScore:
    """各任务 PSNR / SSIM 的算术平均"""
    return TaskScore(
        "average",
        sum(r.count for r in results),
        sum(r.psnr for r in results) / len(results),
        sum(r.ssim for r in results) / len(results),
    )


def format_table(results: Sequence[TaskScore]) -> str:
    """按任务列排版的文本表（PSNR / SSIM）"""
    columns = list(results) + [average_scores(results)]
    cells = [f"{r.psnr:.2f}/{r.ssim:.4f}" for r in columns]
    widths = [max(len(r.task), len(cell)) for r, cell in zip(columns, cells)]
    header = "  ".join(r.task.ljust(w) for r, w in zip(columns, widths))
    values = "  ".join(cell.ljust(w) for cell, w in zip(cells, widths))
    return f"{'Method'.ljust(8)}  {header}\n{'SymUNet'.ljust(8)}  {values}\n"


def format_csv(results: Sequence[TaskScore]) -> str:
    """task,count,psnr,ssim；末行为 average"""
    lines = ["task,count,psnr,ssim"]
    for r in list(results) + [average_scores(results)]:
        lines.append(f"{r.task},{r.count},{r.psnr:.6f},{r.ssim:.6f}")
    return "\n".join(lines) + "\n"
