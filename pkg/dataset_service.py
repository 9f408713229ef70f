"""
数据集服务
PNG 读写、样本清单、裁剪/翻转增强、尺寸填充，以及训练用的确定性批数据流
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset, Sampler
from PIL import Image

from config import get_settings
from degradation_service import ImagePair, apply_degradation, derive_seed
from exceptions import ConfigurationError, DimensionError, FormatError, ParameterError, handle_format_error
from schemas import DegradationKind, DegradationSpec

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"

PRESETS: Dict[str, List[str]] = {
    "three": ["noise:sigma=15", "noise:sigma=25", "noise:sigma=50", "haze", "rain"],
    "five": ["noise:sigma=25", "haze", "rain", "blur", "lowlight"],
}


# ========== 图像读写 ==========
def load_png(path: Union[str, Path]) -> torch.Tensor:
    """8 位 PNG → [3,H,W] float32，取值 [0,1]"""
    path = Path(path)
    try:
        with Image.open(path) as image:
            array = np.asarray(image.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise handle_format_error(str(path), e)
    return torch.from_numpy(array.copy()).permute(2, 0, 1).float() / 255.0


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """[C,H,W] ∈ [0,1] → HWC uint8"""
    scaled = (x.detach().cpu().float().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    if scaled.dim() == 2:
        return scaled.numpy()
    return scaled.permute(1, 2, 0).contiguous().numpy()


def save_png(path: Union[str, Path], x: torch.Tensor) -> Path:
    """[3,H,W] 或 [H,W] 写为 8 位 PNG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = to_uint8(x)
    Image.fromarray(array).save(path, format="PNG")
    return path


def list_images(directory: Union[str, Path]) -> List[Path]:
    """目录下的 PNG 文件（按文件名排序）"""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"图像目录不存在: {directory}", str(directory))
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


# ========== 增强 ==========
def random_crop_pair(pair: ImagePair, size: int, seed: int) -> ImagePair:
    """对 clean / degraded 施加同一裁剪窗口"""
    height, width = pair.clean.shape[-2:]
    if height < size or width < size:
        raise DimensionError(f"图像 {height}×{width} 小于裁剪尺寸 {size}")
    generator = torch.Generator().manual_seed(seed)
    top = int(torch.randint(0, height - size + 1, (1,), generator=generator))
    left = int(torch.randint(0, width - size + 1, (1,), generator=generator))
    window = (slice(None), slice(top, top + size), slice(left, left + size))
    return replace(pair, clean=pair.clean[window], degraded=pair.degraded[window])


def random_flips(pair: ImagePair, seed: int) -> ImagePair:
    """随机水平/垂直翻转（同一种子重复施加即还原）"""
    generator = torch.Generator().manual_seed(seed)
    horizontal, vertical = torch.randint(0, 2, (2,), generator=generator).tolist()
    dims = [d for d, flag in ((-1, horizontal), (-2, vertical)) if flag]
    if not dims:
        return pair
    return replace(pair, clean=pair.clean.flip(dims), degraded=pair.degraded.flip(dims))


def center_crop_pair(pair: ImagePair, size: int) -> ImagePair:
    height, width = pair.clean.shape[-2:]
    if height < size or width < size:
        raise DimensionError(f"图像 {height}×{width} 小于裁剪尺寸 {size}")
    top, left = (height - size) // 2, (width - size) // 2
    window = (slice(None), slice(top, top + size), slice(left, left + size))
    return replace(pair, clean=pair.clean[window], degraded=pair.degraded[window])


# ========== 填充 ==========
def pad_to_multiple(x: torch.Tensor, m: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """
    在下/右两侧 reflect 填充到 m 的整数倍

    Args:
        x: [C,H,W] 或 [B,C,H,W]
        m: 2 的幂

    Returns:
        (填充后张量, 原始 (H, W))
    """
    if m < 1 or m & (m - 1):
        raise ParameterError(f"填充倍数 m={m} 不是 2 的幂", "m")
    height, width = x.shape[-2:]
    pad_h, pad_w = (-height) % m, (-width) % m
    if pad_h == 0 and pad_w == 0:
        return x, (height, width)
    batch = x.unsqueeze(0) if x.dim() == 3 else x
    # reflect 要求填充量小于边长
    mode = "reflect" if pad_h < height and pad_w < width else "replicate"
    padded = F.pad(batch, (0, pad_w, 0, pad_h), mode=mode)
    return (padded.squeeze(0) if x.dim() == 3 else padded), (height, width)


def crop_back(padded: torch.Tensor, original_dims: Tuple[int, int]) -> torch.Tensor:
    height, width = original_dims
    return padded[..., :height, :width]


# ========== 样本清单 ==========
def parse_kind_token(token: str) -> Tuple[DegradationKind, Dict[str, float]]:
    """
    解析退化类型记号，如 "noise:sigma=15" 或 "haze:beta=1.5,airlight=0.9"

    Raises:
        ConfigurationError: 未知类型
        ParameterError: 参数格式错误
    """
    name, _, params_text = token.strip().partition(":")
    try:
        kind = DegradationKind(name.strip().lower())
    except ValueError:
        valid = [k.value for k in DegradationKind]
        raise ConfigurationError(f"未知退化类型 {name!r}，可用类型: {valid}", "kind in {noise,haze,rain,blur,lowlight}")
    return kind, parse_params(params_text)


def parse_params(text: str) -> Dict[str, float]:
    """param=val,... → 字典"""
    params: Dict[str, float] = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ParameterError(f"参数 {item!r} 缺少 '='", item)
        try:
            params[key.strip()] = float(value)
        except ValueError:
            raise ParameterError(f"参数 {key.strip()}={value!r} 不是数值", key.strip())
    return params


def resolve_kinds(tokens: Sequence[str] = (), preset: Optional[str] = None) -> List[DegradationSpec]:
    """
    由类型记号或预设得到退化描述列表（种子稍后按样本派生）

    Raises:
        ConfigurationError: 类型列表为空或预设未知
    """
    tokens = list(tokens)
    if preset:
        if preset not in PRESETS:
            raise ConfigurationError(f"未知预设 {preset!r}，可用预设: {sorted(PRESETS)}", "preset in {three, five}")
        tokens = PRESETS[preset] + tokens
    if not tokens:
        valid = [k.value for k in DegradationKind]
        raise ConfigurationError(f"退化类型列表为空，可用类型: {valid}", "kinds non-empty")
    specs = []
    for token in tokens:
        kind, params = parse_kind_token(token)
        spec = DegradationSpec(kind=kind, params=params)
        spec.resolved_params()
        specs.append(spec)
    return specs


@dataclass
class ManifestEntry:
    """清单行：<clean>\t<kind>\t<param=val,...>\t<seed>[\t<degraded>]"""
    clean_path: str
    spec: DegradationSpec
    degraded_path: Optional[str] = None

    @property
    def task(self) -> str:
        return self.spec.task_name()

    def to_line(self) -> str:
        fields = [self.clean_path, self.spec.kind.value, self.spec.params_text(), str(self.spec.seed)]
        if self.degraded_path:
            fields.append(self.degraded_path)
        return "\t".join(fields)

    @classmethod
    def from_line(cls, line: str, source: str = "<manifest>") -> "ManifestEntry":
        fields = line.rstrip("\n").split("\t")
        if len(fields) not in (4, 5):
            raise FormatError(f"{source}: 清单行需要 4 或 5 列，实际 {len(fields)} 列", source)
        clean_path, kind_text, params_text, seed_text = fields[:4]
        kind, _ = parse_kind_token(kind_text)
        try:
            seed = int(seed_text)
        except ValueError:
            raise FormatError(f"{source}: 种子 {seed_text!r} 不是整数", source)
        spec = DegradationSpec(kind=kind, params=parse_params(params_text), seed=seed)
        spec.resolved_params()
        return cls(clean_path, spec, fields[4] if len(fields) == 5 and fields[4] else None)


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """读取清单；相对路径按清单所在目录解析"""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise handle_format_error(str(path), e)
    entries = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        entry = ManifestEntry.from_line(line, f"{path}:{lineno}")
        entry.clean_path = str(_resolve(path.parent, entry.clean_path))
        if entry.degraded_path:
            entry.degraded_path = str(_resolve(path.parent, entry.degraded_path))
        entries.append(entry)
    return entries


def _resolve(base: Path, value: str) -> Path:
    candidate = Path(value)
    return candidate if candidate.is_absolute() else base / candidate


def write_manifest(path: Union[str, Path], entries: Iterable[ManifestEntry]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(entry.to_line() + "\n" for entry in entries), encoding="utf-8")
    return path


def load_pair(entry: ManifestEntry) -> ImagePair:
    """读取样本对；无退化路径时按描述重新合成"""
    clean = load_png(entry.clean_path)
    if entry.degraded_path:
        degraded = load_png(entry.degraded_path)
    else:
        degraded = apply_degradation(clean, entry.spec)
    return ImagePair(clean=clean, degraded=degraded, spec=entry.spec)


# ========== 并行读取 ==========
def _as_is(item: Any) -> Any:
    return item


def _loader_workers(workers: Optional[int], jobs: int) -> int:
    """DataLoader 子进程数：单线程或单任务时在主进程执行"""
    workers = min(workers or get_settings().worker_count, jobs)
    return workers if workers > 1 else 0


def _run_in_order(dataset: Dataset, count: int, workers: Optional[int]) -> List[Any]:
    """逐个取出 dataset[0..count)，结果按序号排列，与子进程数无关"""
    loader = DataLoader(dataset, batch_size=None, shuffle=False,
                        num_workers=_loader_workers(workers, count), collate_fn=_as_is)
    return list(loader)


class PairDataset(Dataset):
    """清单样本对：第 i 项为 load_pair(entries[i])"""

    def __init__(self, entries: Sequence[ManifestEntry]):
        self.entries = list(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> ImagePair:
        return load_pair(self.entries[index])


class SynthesisDataset(Dataset):
    """合成任务：第 i 项读取清晰图像、施加退化、写出 PNG，返回清单行"""

    def __init__(self, jobs: Sequence[Tuple[Path, DegradationSpec, Path]], out_dir: Path):
        self.jobs = list(jobs)
        self.out_dir = out_dir

    def __len__(self) -> int:
        return len(self.jobs)

    def __getitem__(self, index: int) -> ManifestEntry:
        image_path, spec, target = self.jobs[index]
        save_png(target, apply_degradation(load_png(image_path), spec))
        return ManifestEntry(str(image_path.resolve()), spec, str(target.relative_to(self.out_dir)))


def synthesize_dataset(
    clean_dir: Union[str, Path],
    specs: Sequence[DegradationSpec],
    out_dir: Union[str, Path],
    seed: int = 0,
    workers: Optional[int] = None,
) -> Path:
    """
    为目录下每张清晰图像合成每种退化，写出退化 PNG 与清单

    样本种子为 derive_seed(seed, 图像序号·类型数 + 类型序号)，并行与串行结果逐位一致。

    Args:
        clean_dir: 清晰图像目录
        specs: 退化描述列表
        out_dir: 输出目录
        seed: 全局种子
        workers: DataLoader 子进程数，默认取 SYMUNET_THREADS

    Returns:
        清单路径
    """
    images = list_images(clean_dir)
    if not images:
        raise FormatError(f"目录 {clean_dir} 中没有 PNG 图像", str(clean_dir))
    out_dir = Path(out_dir)
    degraded_dir = out_dir / "degraded"
    degraded_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for i, image_path in enumerate(images):
        for k, base in enumerate(specs):
            spec = base.model_copy(update={"seed": derive_seed(seed, i * len(specs) + k)})
            target = degraded_dir / f"{image_path.stem}_{k:02d}_{spec.task_name()}.png"
            jobs.append((image_path, spec, target))

    entries = _run_in_order(SynthesisDataset(jobs, out_dir), len(jobs), workers)
    manifest = write_manifest(out_dir / MANIFEST_NAME, entries)
    logger.info(f"合成完成: {len(images)} 张图像 × {len(specs)} 种退化 = {len(entries)} 个样本 → {manifest}")
    return manifest


def paired_folder_manifest(root: Union[str, Path], kind: Union[str, DegradationKind] = "noise") -> List[ManifestEntry]:
    """
    读取预配对目录 root/clean 与 root/degraded（同名文件配对）

    Args:
        root: 数据根目录
        kind: 标注的退化类型（仅用于按任务统计）
    """
    root = Path(root)
    kind_value, params = parse_kind_token(kind.value if isinstance(kind, DegradationKind) else kind)
    entries = []
    for clean_path in list_images(root / "clean"):
        degraded_path = root / "degraded" / clean_path.name
        if not degraded_path.exists():
            raise FormatError(f"缺少配对的退化图像 {degraded_path}", str(degraded_path))
        spec = DegradationSpec(kind=kind_value, params=params)
        entries.append(ManifestEntry(str(clean_path), spec, str(degraded_path)))
    return entries


# ========== 训练数据流 ==========
class TrainSampleDataset(Dataset):
    """
    训练样本：第 index 项（全局序号 step·B + j）只由 (seed, index) 决定

    先均匀抽取退化任务，再在该任务内均匀抽取样本；裁剪与翻转种子由 derive_seed(seed, index) 派生。
    """

    def __init__(self, pairs: Sequence[ImagePair], tasks: Sequence[str], by_task: Dict[str, List[int]],
                 crop: int, seed: int):
        self.pairs = list(pairs)
        self.tasks = list(tasks)
        self.by_task = by_task
        self.crop = crop
        self.seed = seed

    def sample(self, index: int) -> ImagePair:
        sample_seed = derive_seed(self.seed, index)
        generator = torch.Generator().manual_seed(sample_seed)
        task = self.tasks[int(torch.randint(0, len(self.tasks), (1,), generator=generator))]
        candidates = self.by_task[task]
        pair = self.pairs[candidates[int(torch.randint(0, len(candidates), (1,), generator=generator))]]
        pair = random_crop_pair(pair, self.crop, derive_seed(sample_seed, 0))
        return random_flips(pair, derive_seed(sample_seed, 1))

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        pair = self.sample(index)
        return pair.degraded, pair.clean


class StepBatchSampler(Sampler[List[int]]):
    """第 step 步产出样本序号 [step·B, step·B + B)，从 start 步开始（续训跳过已消费的步）"""

    def __init__(self, batch_size: int, start: int, stop: int):
        self.batch_size = batch_size
        self.start = start
        self.stop = stop

    def __iter__(self) -> Iterator[List[int]]:
        for step in range(self.start, self.stop):
            yield list(range(step * self.batch_size, (step + 1) * self.batch_size))

    def __len__(self) -> int:
        return max(0, self.stop - self.start)


class BatchStream:
    """
    确定性批数据流：第 step 步的批内容只由 (seed, step) 决定，与 DataLoader 子进程数无关
    """

    def __init__(
        self,
        entries: Sequence[ManifestEntry],
        batch_size: int,
        crop: int,
        seed: int = 0,
        workers: Optional[int] = None,
    ):
        if not entries:
            raise ConfigurationError("训练清单为空", "manifest non-empty")
        self.entries = list(entries)
        self.batch_size = batch_size
        self.crop = crop
        self.seed = seed
        self.workers = workers
        self.pairs: List[ImagePair] = _run_in_order(PairDataset(self.entries), len(self.entries), workers)

        self.tasks: List[str] = []
        self.by_task: Dict[str, List[int]] = {}
        for index, entry in enumerate(self.entries):
            if entry.task not in self.by_task:
                self.tasks.append(entry.task)
                self.by_task[entry.task] = []
            self.by_task[entry.task].append(index)
        self.samples = TrainSampleDataset(self.pairs, self.tasks, self.by_task, crop, seed)
        logger.info(f"数据流就绪: {len(self.pairs)} 个样本, 任务 {self.tasks}, batch={batch_size}, crop={crop}")

    def sample(self, index: int) -> ImagePair:
        """第 index 个训练样本（全局序号 step·B + j）"""
        return self.samples.sample(index)

    def batch_at(self, step: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """返回 (degraded, clean)，形状 [B,3,crop,crop]"""
        items = [self.samples[step * self.batch_size + j] for j in range(self.batch_size)]
        return torch.stack([d for d, _ in items]), torch.stack([c for _, c in items])

    def loader(self, start: int, stop: int) -> DataLoader:
        """第 start..stop-1 步的 DataLoader"""
        return DataLoader(
            self.samples,
            batch_sampler=StepBatchSampler(self.batch_size, start, stop),
            num_workers=_loader_workers(self.workers, stop - start),
            generator=torch.Generator().manual_seed(self.seed),
        )

    def batches(self, start: int, stop: int) -> Iterator[Tuple[int, torch.Tensor, torch.Tensor]]:
        """依次产出 (step, degraded, clean)"""
        for step, (degraded, clean) in zip(range(start, stop), self.loader(start, stop)):
            yield step, degraded, clean

    def validation_batch(self, count: int = 8) -> Tuple[torch.Tensor, torch.Tensor]:
        """按清单顺序取前 count 个样本的中心裁剪"""
        pairs = [center_crop_pair(pair, self.crop) for pair in self.pairs[:count]]
        return torch.stack([p.degraded for p in pairs]), torch.stack([p.clean for p in pairs])
