"""
配置管理模块
运行时配置从环境变量/.env读取；实验配置从扁平 key=value 文本文件读取
"""

import os
import logging
from pathlib import Path
from typing import Optional, Dict, Iterable, Tuple, Union

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import load_dotenv

from exceptions import ConfigurationError, handle_format_error
from schemas import ModelConfig, TrainConfig

# 确保加载.env文件
load_dotenv(override=False)


class Settings(BaseSettings):
    """进程级运行配置 - 扁平化结构，环境变量前缀 SYMUNET_"""

    model_config = SettingsConfigDict(
        env_prefix="SYMUNET_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # ========== 应用基本信息 ==========
    title: str = "SymUNet 全能图像复原"
    version: str = "1.0.0"
    environment: str = Field(default="development")

    # ========== 计算资源 ==========
    # 0 表示使用全部 CPU
    threads: int = Field(default=0, ge=0)

    # ========== 日志配置 ==========
    log_level: str = Field(default="INFO")
    log_file: Optional[str] = Field(default=None)

    # ========== 语义编码器 ==========
    encoder: str = Field(default="stub")
    context_dir: Optional[str] = Field(default=None)
    encoder_seed: int = Field(default=0)

    # ========== 服务配置 ==========
    checkpoint: Optional[str] = Field(default=None)
    host: str = Field(default="0.0.0.0")
    port: int = Field(default=7700)

    @property
    def worker_count(self) -> int:
        """数据合成并行度"""
        if self.threads > 0:
            return self.threads
        return os.cpu_count() or 1


# 创建全局配置实例
def create_settings() -> Settings:
    """创建配置实例"""
    return Settings()


settings = create_settings()


def get_settings() -> Settings:
    """获取运行配置（用于依赖注入）"""
    return settings


def reload_settings() -> Settings:
    """重新读取环境变量（测试或子命令修改环境后使用）"""
    global settings
    settings = create_settings()
    return settings


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """
    配置日志

    Args:
        level: 日志级别，默认取 settings.log_level
        log_file: 日志文件，默认取 settings.log_file
    """
    handlers: list = [logging.StreamHandler()]
    log_file = log_file or settings.log_file
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


# ========== 实验配置文件 ==========
def parse_key_values(lines: Iterable[str], source: str = "<overrides>") -> Dict[str, str]:
    """
    解析 key=value 行

    Args:
        lines: 文本行（# 开头为注释）
        source: 来源描述，用于错误信息

    Returns:
        键值字典（后出现的覆盖先出现的）
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno} 缺少 '='：{line!r}", "key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """读取 UTF-8 key=value 配置文件"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise handle_format_error(str(path), e)
    return parse_key_values(text.splitlines(), str(path))


def build_run_config(
    values: Dict[str, str],
    overrides: Optional[Dict[str, str]] = None,
) -> Tuple[ModelConfig, TrainConfig]:
    """
    将扁平键值分配到 ModelConfig / TrainConfig，覆盖项在文件配置之后生效

    Args:
        values: 配置文件中的键值
        overrides: 命令行覆盖项

    Returns:
        (模型配置, 训练配置)

    Raises:
        ConfigurationError: 出现未知键或取值非法
    """
    merged = dict(values)
    merged.update(overrides or {})

    model_keys = set(ModelConfig.model_fields)
    train_keys = set(TrainConfig.model_fields)
    unknown = sorted(set(merged) - model_keys - train_keys)
    if unknown:
        raise ConfigurationError(
            f"未知配置键: {unknown}；可用键: {sorted(model_keys | train_keys)}", f"unknown key {unknown[0]}")

    try:
        model_cfg = ModelConfig(**{k: v for k, v in merged.items() if k in model_keys})
        train_cfg = TrainConfig(**{k: v for k, v in merged.items() if k in train_keys})
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(loc) for loc in first["loc"])
        raise ConfigurationError(f"配置项 {key} 取值非法: {first['msg']}", key)

    model_cfg.validate_invariants()
    train_cfg.validate_invariants()
    return model_cfg, train_cfg


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, str]] = None,
) -> Tuple[ModelConfig, TrainConfig]:
    """读取配置文件并应用覆盖项；path 为空时从默认值出发"""
    values = read_config_file(path) if path else {}
    return build_run_config(values, overrides)


def dump_model_config(config: ModelConfig) -> str:
    """将模型配置写回 key=value 文本"""
    lines = []
    for key, value in config.model_dump(mode="json").items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


# 配置摘要函数（用于健康检查）
def get_config_summary() -> dict:
    """获取运行配置摘要"""
    return {
        "application": {
            "title": settings.title,
            "version": settings.version,
            "environment": settings.environment,
        },
        "compute": {"threads": settings.worker_count},
        "encoder": {"kind": settings.encoder, "context_dir": settings.context_dir},
        "server": {"host": settings.host, "port": settings.port, "checkpoint": settings.checkpoint},
    }
