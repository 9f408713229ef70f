"""
单例模式管理模块
管理服务进程中共享的复原模型（推理期间只读，可被多个请求并发使用）
"""

import logging
import threading
from typing import Optional, Dict, Any

from config import get_settings
from exceptions import CheckpointError
from restoration_service import Restorer

logger = logging.getLogger(__name__)


class RestorerManager:
    """复原模型管理器 - 单例模式"""

    _instance: Optional['RestorerManager'] = None
    _lock = threading.Lock()

    def __new__(cls) -> 'RestorerManager':
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super().__new__(cls)
                    cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self._restorer: Optional[Restorer] = None
        self._load_lock = threading.Lock()
        self._initialized = True

    def load(self, checkpoint: Optional[str] = None) -> Restorer:
        """
        读取检查点（默认取 SYMUNET_CHECKPOINT）

        Raises:
            CheckpointError: 未配置检查点或读取失败
        """
        checkpoint = checkpoint or get_settings().checkpoint
        if not checkpoint:
            raise CheckpointError("未配置检查点，请设置 SYMUNET_CHECKPOINT")
        with self._load_lock:
            try:
                self._restorer = Restorer.from_checkpoint(checkpoint)
                logger.info(f"复原模型加载完成 - 检查点: {checkpoint}, step: {self._restorer.step}")
            except Exception as e:
                logger.error(f"复原模型加载失败: {e}")
                raise
        return self._restorer

    def get_restorer(self) -> Restorer:
        """获取已加载的复原模型（未加载时按配置加载）"""
        if self._restorer is None:
            return self.load()
        return self._restorer

    def set_restorer(self, restorer: Restorer) -> None:
        with self._load_lock:
            self._restorer = restorer

    def reset(self) -> None:
        with self._load_lock:
            self._restorer = None

    @property
    def is_loaded(self) -> bool:
        return self._restorer is not None

    def get_model_info(self) -> Dict[str, Any]:
        """获取模型信息（用于健康检查）"""
        if self._restorer is None:
            return {"loaded": False}
        return {"loaded": True, "checkpoint": self._restorer.checkpoint, "step": self._restorer.step}


# 全局单例实例
restorer_manager = RestorerManager()


# 便捷函数
def get_restorer() -> Restorer:
    """获取复原模型的便捷函数"""
    return restorer_manager.get_restorer()
