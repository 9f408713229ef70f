"""
命令行入口
子命令: synth / train / infer / eval / count / dump-features / serve
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from checkpoint_service import checkpoint_encoder, load_checkpoint
from config import dump_model_config, load_run_config, parse_key_values, reload_settings, setup_logging
from dataset_service import (
    BatchStream, load_png, pad_to_multiple, read_manifest, resolve_kinds, save_png, synthesize_dataset,
)
from exceptions import ErrorHandler, SymUNetError
from models import FLOPS_RESOLUTION, REFERENCE_FLOPS, REFERENCE_PARAMETERS, build_model, extract_features, parameter_report
from restoration_service import Restorer, format_csv, format_table
from schemas import GuidanceMode, RunSpec
from tensor_io import save_tensor
from training_service import TrainResult, train_loop

logger = logging.getLogger("symunet_cli")


# ========== 子命令实现 ==========
def collect_overrides(
    pairs: Sequence[str] = (),
    seed: Optional[int] = None,
    steps: Optional[int] = None,
    guidance_mode: Optional[str] = None,
    asymmetric: bool = False,
) -> Dict[str, str]:
    """--set 与专用参数合并为覆盖项（专用参数优先）"""
    overrides = parse_key_values(pairs, "--set")
    if seed is not None:
        overrides["seed"] = str(seed)
    if steps is not None:
        overrides["total_steps"] = str(steps)
    if guidance_mode is not None:
        overrides["guidance_mode"] = guidance_mode
    if asymmetric:
        overrides["symmetric"] = "false"
    return overrides


def cmd_synth(
    clean_dir: str,
    kinds: Sequence[str],
    out_dir: str,
    seed: int = 0,
    preset: Optional[str] = None,
    workers: Optional[int] = None,
) -> Path:
    """合成退化数据集，返回清单路径"""
    specs = resolve_kinds(kinds, preset)
    return synthesize_dataset(clean_dir, specs, out_dir, seed, workers)


def cmd_train(
    config_path: Optional[str],
    manifest: str,
    out_dir: str,
    overrides: Optional[Dict[str, str]] = None,
    resume: Optional[str] = None,
) -> TrainResult:
    """按配置训练，输出检查点与训练日志"""
    model_config, train_config = load_run_config(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(
        dump_model_config(model_config)
        + "".join(f"{k}={v}\n" for k, v in train_config.model_dump(mode="json").items()),
        encoding="utf-8",
    )
    stream = BatchStream(read_manifest(manifest), train_config.batch_size, train_config.crop, train_config.seed)
    model = build_model(model_config, train_config.seed)
    return train_loop(model, stream, train_config, out, resume=resume)


def cmd_infer(checkpoint: str, image_in: str, image_out: str) -> Path:
    """复原单张 PNG"""
    return Restorer.from_checkpoint(checkpoint).restore_file(image_in, image_out)


def cmd_eval(checkpoint: str, manifest: str, csv_out: Optional[str] = None) -> Tuple[str, str]:
    """
    评测清单中的样本对

    Returns:
        (文本表, CSV 文本)
    """
    results = Restorer.from_checkpoint(checkpoint).evaluate(read_manifest(manifest))
    table, csv_text = format_table(results), format_csv(results)
    if csv_out:
        Path(csv_out).parent.mkdir(parents=True, exist_ok=True)
        Path(csv_out).write_text(csv_text, encoding="utf-8")
    return table, csv_text


def cmd_count(
    config_path: Optional[str] = None,
    overrides: Optional[Dict[str, str]] = None,
    resolution: int = FLOPS_RESOLUTION,
) -> str:
    """参数量与计算量报告"""
    model_config, _ = load_run_config(config_path, overrides)
    report = parameter_report(build_model(model_config), resolution, resolution)
    lines = [
        f"variant: {'symmetric' if model_config.symmetric else 'asymmetric'}",
        f"parameters: {report['trunk_parameters']} ({report['trunk_parameters'] / 1e6:.2f}M)",
        f"reference: {REFERENCE_PARAMETERS / 1e6:.2f}M, deviation {report['parameter_deviation_pct']:+.2f}%",
        f"macs@{resolution}x{resolution}: {report['trunk_macs']} ({report['trunk_macs'] / 1e9:.2f}G)",
        f"reference: {REFERENCE_FLOPS / 1e9:.2f}G, ratio {report['flops_ratio']:.3f} (resolution of reference unstated)",
    ]
    if model_config.guidance_mode != GuidanceMode.NONE:
        lines += [
            f"guidance: {model_config.guidance_mode.value}",
            f"guidance parameters: {report['guidance_parameters']} ({report['guidance_parameters'] / 1e6:.2f}M)",
            f"total parameters: {report['parameters']} ({report['parameters'] / 1e6:.2f}M)",
            f"total macs@{resolution}x{resolution}: {report['macs']} ({report['macs'] / 1e9:.2f}G)",
        ]
    return "\n".join(lines) + "\n"


def cmd_dump_features(checkpoint: str, image: str, taps: Sequence[str], out_dir: str) -> List[Path]:
    """
    导出中间特征：通道均值灰度 PNG（min-max 归一化）+ SYMT 张量

    Returns:
        写出的文件列表
    """
    state = load_checkpoint(checkpoint, restore_rng=False)
    model = state.model.eval()
    padded, _ = pad_to_multiple(load_png(image), model.config.required_multiple())
    features = extract_features(model, padded, list(taps), encoder=checkpoint_encoder(state))
    out = Path(out_dir)
    written = []
    for name in taps:
        feature = features[name]
        written.append(save_tensor(out / f"{name}.symt", feature))
        mean_map = feature.mean(dim=0)
        low, high = mean_map.min(), mean_map.max()
        normalized = (mean_map - low) / (high - low) if high > low else torch.zeros_like(mean_map)
        written.append(save_png(out / f"{name}.png", normalized))
    logger.info(f"特征导出完成: {list(taps)} → {out}")
    return written


# ========== 参数解析 ==========
def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value 配置文件")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="覆盖配置项（可重复）")
    parser.add_argument("--guidance-mode", choices=[m.value for m in GuidanceMode])
    parser.add_argument("--asymmetric", action="store_true", help="非对称消融变体")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symunet", description="SymUNet / SE-SymUNet 全能图像复原工具")
    parser.add_argument("--log-level", default=None, help="日志级别（默认取 SYMUNET_LOG_LEVEL）")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="合成退化数据集")
    p.add_argument("--clean", required=True, help="清晰 PNG 目录")
    p.add_argument("--out", required=True, help="输出目录")
    p.add_argument("--kinds", nargs="*", default=[], help="退化记号，如 noise:sigma=15 haze rain")
    p.add_argument("--preset", choices=["three", "five"])
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="训练")
    _add_model_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="续训的检查点目录")

    p = sub.add_parser("infer", help="复原单张图像")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("eval", help="按任务评测 PSNR / SSIM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--csv", help="CSV 输出路径")

    p = sub.add_parser("count", help="参数量与计算量")
    _add_model_flags(p)
    p.add_argument("--resolution", type=int, default=FLOPS_RESOLUTION)

    p = sub.add_parser("dump-features", help="导出中间特征")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--taps", default="f_enc_0,f_dec_0", help="逗号分隔的抽头名")
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="启动 HTTP 复原服务")
    p.add_argument("--checkpoint")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    return parser


def _run_spec(args: argparse.Namespace) -> RunSpec:
    inputs = [getattr(args, name) for name in ("clean", "manifest", "input", "checkpoint") if getattr(args, name, None)]
    outputs = [getattr(args, name) for name in ("out", "output", "csv") if getattr(args, name, None)]
    overrides = parse_key_values(getattr(args, "set", []) or [], "--set")
    return RunSpec(subcommand=args.command, config_path=getattr(args, "config", None),
                   inputs=inputs, outputs=outputs, overrides=overrides)


def dispatch(args: argparse.Namespace) -> None:
    command = args.command
    if command == "synth":
        manifest = cmd_synth(args.clean, args.kinds, args.out, args.seed, args.preset)
        print(manifest)
    elif command == "train":
        overrides = collect_overrides(args.set, args.seed, args.steps, args.guidance_mode, args.asymmetric)
        result = cmd_train(args.config, args.manifest, args.out, overrides, args.resume)
        print(f"trained to step {result.final_step}: {result.checkpoint}")
    elif command == "infer":
        print(cmd_infer(args.checkpoint, args.input, args.output))
    elif command == "eval":
        table, _ = cmd_eval(args.checkpoint, args.manifest, args.csv)
        print(table, end="")
    elif command == "count":
        overrides = collect_overrides(args.set, guidance_mode=args.guidance_mode, asymmetric=args.asymmetric)
        print(cmd_count(args.config, overrides, args.resolution), end="")
    elif command == "dump-features":
        taps = [t.strip() for t in args.taps.split(",") if t.strip()]
        for path in cmd_dump_features(args.checkpoint, args.input, taps, args.out):
            print(path)
    elif command == "serve":
        if args.checkpoint:
            os.environ["SYMUNET_CHECKPOINT"] = args.checkpoint
            reload_settings()
        from api import run_server
        run_server(args.host, args.port)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    命令行主函数

    Returns:
        退出码：0 成功；领域异常按类型映射（配置 2、尺寸 3、参数 4、格式 5、检查点 6、训练 7、约定 8、数值 9）
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        logger.info(f"运行: {_run_spec(args).model_dump()}")
        dispatch(args)
    except SymUNetError as e:
        constraint = e.details.get("constraint") or e.details.get("tensor") or e.details.get("field") or ""
        suffix = f" [{constraint}]" if constraint else ""
        print(f"error[{e.error_code}]: {e.message}{suffix}", file=sys.stderr)
        logger.error(f"{e.error_code}: {e.message}")
        return ErrorHandler.exit_code_for(e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
