"""
统一的异常处理模块
定义所有自定义异常和错误处理策略
"""

import logging
from typing import Optional, Dict, Any
from datetime import datetime, timezone

logger = logging.getLogger(__name__)


class SymUNetError(Exception):
    """图像复原工具链基础异常"""

    def __init__(self, message: str, error_code: str = "UNKNOWN_ERROR", details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.error_code = error_code
        self.details = details or {}
        self.timestamp = datetime.now(timezone.utc)
        super().__init__(self.message)


class ConfigurationError(SymUNetError):
    """配置/结构约束异常"""

    def __init__(self, message: str, constraint: str = "unknown"):
        super().__init__(message, "CONFIG_ERROR", {"constraint": constraint})
        self.constraint = constraint


class DimensionError(SymUNetError):
    """张量尺寸异常"""

    def __init__(self, message: str, required_multiple: Optional[int] = None):
        details = {"required_multiple": required_multiple} if required_multiple else {}
        super().__init__(message, "DIMENSION_ERROR", details)
        self.required_multiple = required_multiple


class ParameterError(SymUNetError):
    """参数取值异常"""

    def __init__(self, message: str, field_name: str = "unknown"):
        super().__init__(message, "PARAMETER_ERROR", {"field": field_name})
        self.field_name = field_name


class FormatError(SymUNetError):
    """文件格式异常"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message, "FORMAT_ERROR", {"path": path} if path else {})
        self.path = path


class CheckpointError(SymUNetError):
    """检查点读写异常"""

    def __init__(self, message: str, path: Optional[str] = None, tensor_name: Optional[str] = None):
        details = {}
        if path:
            details["path"] = path
        if tensor_name:
            details["tensor"] = tensor_name
        super().__init__(message, "CHECKPOINT_ERROR", details)
        self.path = path
        self.tensor_name = tensor_name


class TrainingError(SymUNetError):
    """训练过程异常"""

    def __init__(self, message: str, parameter: Optional[str] = None, step: Optional[int] = None):
        details: Dict[str, Any] = {}
        if parameter:
            details["parameter"] = parameter
        if step is not None:
            details["step"] = step
        super().__init__(message, "TRAINING_ERROR", details)
        self.parameter = parameter
        self.step = step


class ContractError(SymUNetError):
    """调用约定异常（前置条件不满足）"""

    def __init__(self, message: str, operation: str = "unknown"):
        super().__init__(message, "CONTRACT_ERROR", {"operation": operation})
        self.operation = operation


class NumericalError(SymUNetError):
    """数值异常（NaN/Inf）"""

    def __init__(self, message: str, where: str = "unknown"):
        super().__init__(message, "NUMERICAL_ERROR", {"where": where})
        self.where = where


class ErrorHandler:
    """统一错误处理器"""

    EXIT_CODES = {
        "CONFIG_ERROR": 2,
        "DIMENSION_ERROR": 3,
        "PARAMETER_ERROR": 4,
        "FORMAT_ERROR": 5,
        "CHECKPOINT_ERROR": 6,
        "TRAINING_ERROR": 7,
        "CONTRACT_ERROR": 8,
        "NUMERICAL_ERROR": 9,
    }

    @staticmethod
    def exit_code_for(error: Exception) -> int:
        """
        命令行退出码映射

        Args:
            error: 异常对象

        Returns:
            非零退出码
        """
        if isinstance(error, SymUNetError):
            return ErrorHandler.EXIT_CODES.get(error.error_code, 1)
        return 1

    @staticmethod
    def create_error_response(error: Exception, default_message: str = "处理失败") -> Dict[str, Any]:
        """
        创建统一的错误响应格式

        Args:
            error: 异常对象
            default_message: 默认错误消息

        Returns:
            错误响应字典
        """
        logger.error(f"处理错误: {str(error)}", exc_info=not isinstance(error, SymUNetError))

        if isinstance(error, SymUNetError):
            error_code = error.error_code
            error_message = error.message
            details = error.details
        elif isinstance(error, ValueError):
            error_code = "VALIDATION_ERROR"
            error_message = str(error) or "数据格式错误"
            details = {}
        else:
            error_code = "INTERNAL_ERROR"
            error_message = default_message
            details = {}

        return {
            "error": error_message,
            "error_code": error_code,
            "details": details,
            "processed_at": datetime.now(timezone.utc).isoformat(),
        }

    @staticmethod
    def log_and_wrap_checkpoint_error(operation: str, path: str, error: Exception) -> CheckpointError:
        """
        记录并包装检查点读写错误

        Args:
            operation: 操作类型（save/load）
            path: 检查点路径
            error: 原始异常

        Returns:
            CheckpointError异常
        """
        error_msg = f"检查点{operation}失败: {str(error)}"
        logger.error(f"检查点错误 - 路径: {path}, 操作: {operation}, 错误: {error_msg}")
        return CheckpointError(error_msg, path)

    @staticmethod
    def log_and_wrap_format_error(path: str, error: Exception) -> FormatError:
        """记录并包装文件格式错误"""
        error_msg = f"文件解析失败 {path}: {str(error)}"
        logger.error(error_msg)
        return FormatError(error_msg, path)


# 便捷函数
def handle_checkpoint_error(operation: str, path: str, error: Exception) -> CheckpointError:
    """便捷的检查点错误处理函数"""
    return ErrorHandler.log_and_wrap_checkpoint_error(operation, path, error)


def handle_format_error(path: str, error: Exception) -> FormatError:
    """便捷的文件格式错误处理函数"""
    return ErrorHandler.log_and_wrap_format_error(path, error)


def create_error_response(error: Exception, default_message: str = "处理失败") -> Dict[str, Any]:
    """便捷的错误响应创建函数"""
    return ErrorHandler.create_error_response(error, default_message)
