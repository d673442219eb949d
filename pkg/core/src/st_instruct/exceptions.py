"""
异常处理模块

这个模块定义了系统的异常体系，包括：
1. 错误码定义
2. 基础异常类
3. 按领域划分的业务异常（配置、数据、形状、数值、分词、检查点、评估）
4. 异常处理装饰器

每个异常类都带有一个 CLI 退出码：
- 1: 用法/配置错误
- 2: 数据错误（含切分、分词、检查点、评估前置条件）
- 3: 数值错误（NaN/Inf、损失不收敛为有限值）

作者：ST-Instruct
版本：0.1.0
"""

import logging
import traceback
from enum import Enum
from functools import wraps
from typing import Any, Dict, Optional, Sequence

# ==================== 日志配置 ====================
logger = logging.getLogger(__name__)


class ErrorCode(Enum):
    """
    错误码枚举

    错误码格式：<领域>_<类型>_<序号>
    """

    # 通用错误 (1000-1099)
    UNKNOWN_ERROR = "COMMON_UNKNOWN_1000"
    INVALID_PARAMETER = "COMMON_INVALID_1001"

    # 配置错误 (1100-1199)
    CONFIGURATION_ERROR = "CONFIG_INVALID_1100"
    CONFIG_FILE_ERROR = "CONFIG_FILE_1101"

    # 数据错误 (2000-2099)
    DATA_ERROR = "DATA_INVALID_2000"
    CSV_FORMAT_ERROR = "DATA_CSV_2001"
    GRID_ERROR = "DATA_GRID_2002"
    WINDOW_ERROR = "DATA_WINDOW_2003"
    SPLIT_ERROR = "DATA_SPLIT_2004"
    TENSOR_FILE_ERROR = "DATA_TENSOR_FILE_2005"

    # 形状错误 (3000-3099)
    SHAPE_MISMATCH = "SHAPE_MISMATCH_3000"
    RECEPTIVE_FIELD_ERROR = "SHAPE_RECEPTIVE_3001"

    # 数值错误 (4000-4099)
    NON_FINITE = "NUMERIC_NONFINITE_4000"
    GRADIENT_ERROR = "NUMERIC_GRADIENT_4001"

    # 分词与模型错误 (5000-5099)
    TOKENIZER_ERROR = "TOKENIZER_INVALID_5000"
    CONTEXT_OVERFLOW = "TOKENIZER_CONTEXT_5001"
    SUBSTITUTION_ERROR = "TOKENIZER_SUBSTITUTION_5002"

    # 检查点错误 (6000-6099)
    CHECKPOINT_ERROR = "CHECKPOINT_INVALID_6000"
    CHECKPOINT_VERSION = "CHECKPOINT_VERSION_6001"
    CHECKPOINT_TRUNCATED = "CHECKPOINT_TRUNCATED_6002"
    CHECKPOINT_CHECKSUM = "CHECKPOINT_CHECKSUM_6003"

    # 评估错误 (7000-7099)
    EVALUATION_ERROR = "EVAL_INVALID_7000"
    REGION_OVERLAP = "EVAL_OVERLAP_7001"


class STInstructException(Exception):
    """
    系统基础异常类

    所有系统异常的基类，提供统一的异常处理接口。
    """

    exit_code: int = 2

    def __init__(
        self,
        message: str,
        error_code: ErrorCode = ErrorCode.UNKNOWN_ERROR,
        details: Optional[Dict[str, Any]] = None,
        cause: Optional[Exception] = None,
    ):
        """
        初始化异常

        Args:
            message: 错误消息
            error_code: 错误码
            details: 错误详情
            cause: 原始异常
        """
        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.details = details or {}
        self.cause = cause

        self._log_exception()

    def _log_exception(self):
        """记录异常日志"""
        log_data = {
            "error_code": self.error_code.value,
            "message": self.message,
            "details": self.details,
        }
        if self.cause:
            log_data["cause"] = str(self.cause)

        logger.debug(f"❌ 异常发生: {log_data}")

    def to_dict(self) -> Dict[str, Any]:
        """
        将异常转换为字典格式

        Returns:
            Dict[str, Any]: 异常信息字典
        """
        result = {
            "error_code": self.error_code.value,
            "message": self.message,
            "details": self.details,
            "exit_code": self.exit_code,
            "exception_type": self.__class__.__name__,
        }
        if self.cause:
            result["cause"] = str(self.cause)
            result["cause_type"] = self.cause.__class__.__name__
        return result

    def __str__(self) -> str:
        return f"[{self.error_code.value}] {self.message}"


class ConfigurationException(STInstructException):
    """配置相关异常（用法错误，退出码 1）"""

    exit_code = 1

    def __init__(self, message: str, config_key: Optional[str] = None, **kwargs):
        details = kwargs.pop("details", {})
        if config_key:
            details["config_key"] = config_key
        kwargs.setdefault("error_code", ErrorCode.CONFIGURATION_ERROR)
        super().__init__(message=message, details=details, **kwargs)


class DataException(STInstructException):
    """数据相关异常"""

    def __init__(self, message: str, **kwargs):
        kwargs.setdefault("error_code", ErrorCode.DATA_ERROR)
        super().__init__(message=message, **kwargs)


class CSVFormatException(DataException):
    """CSV 行格式错误，携带行号"""

    def __init__(self, message: str, line_number: int, **kwargs):
        details = kwargs.pop("details", {})
        details["line_number"] = line_number
        self.line_number = line_number
        super().__init__(
            message=f"第 {line_number} 行: {message}",
            error_code=ErrorCode.CSV_FORMAT_ERROR,
            details=details,
            **kwargs,
        )


class RegionSplitException(DataException):
    """区域切分错误（区域不足、训练/零样本区域重叠）"""

    def __init__(self, message: str, **kwargs):
        kwargs.setdefault("error_code", ErrorCode.SPLIT_ERROR)
        super().__init__(message=message, **kwargs)


class ShapeMismatchException(STInstructException):
    """算子形状不匹配，消息中包含算子名与两侧形状"""

    def __init__(
        self,
        operator: str,
        left_shape: Sequence[int],
        right_shape: Optional[Sequence[int]] = None,
        reason: str = "",
        **kwargs,
    ):
        self.operator = operator
        details = {"operator": operator, "left_shape": list(left_shape)}
        message = f"{operator}: 形状不匹配 {tuple(left_shape)}"
        if right_shape is not None:
            details["right_shape"] = list(right_shape)
            message += f" 与 {tuple(right_shape)}"
        if reason:
            message += f" ({reason})"
        kwargs.setdefault("error_code", ErrorCode.SHAPE_MISMATCH)
        super().__init__(message=message, details=details, **kwargs)


class NumericalException(STInstructException):
    """数值异常：出现 NaN/Inf（退出码 3）"""

    exit_code = 3

    def __init__(self, message: str, operator: Optional[str] = None, **kwargs):
        details = kwargs.pop("details", {})
        if operator:
            details["operator"] = operator
        kwargs.setdefault("error_code", ErrorCode.NON_FINITE)
        super().__init__(message=message, details=details, **kwargs)


class TokenizerException(STInstructException):
    """分词器、词表扩展与上下文长度相关异常"""

    def __init__(self, message: str, token: Optional[str] = None, **kwargs):
        details = kwargs.pop("details", {})
        if token is not None:
            details["token"] = token
        kwargs.setdefault("error_code", ErrorCode.TOKENIZER_ERROR)
        super().__init__(message=message, details=details, **kwargs)


class CheckpointException(STInstructException):
    """检查点读写异常"""

    def __init__(self, message: str, path: Optional[str] = None, **kwargs):
        details = kwargs.pop("details", {})
        if path:
            details["path"] = str(path)
        kwargs.setdefault("error_code", ErrorCode.CHECKPOINT_ERROR)
        super().__init__(message=message, details=details, **kwargs)


class CheckpointVersionException(CheckpointException):
    """检查点格式版本不匹配"""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, error_code=ErrorCode.CHECKPOINT_VERSION, **kwargs)


class CheckpointTruncatedException(CheckpointException):
    """检查点文件被截断"""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, error_code=ErrorCode.CHECKPOINT_TRUNCATED, **kwargs)


class CheckpointChecksumException(CheckpointException):
    """检查点 CRC-32 校验失败"""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, error_code=ErrorCode.CHECKPOINT_CHECKSUM, **kwargs)


class EvaluationException(STInstructException):
    """评估协议相关异常"""

    def __init__(self, message: str, protocol: Optional[str] = None, **kwargs):
        details = kwargs.pop("details", {})
        if protocol:
            details["protocol"] = protocol
        kwargs.setdefault("error_code", ErrorCode.EVALUATION_ERROR)
        super().__init__(message=message, details=details, **kwargs)


# ==================== 异常处理装饰器 ====================

def handle_exceptions(default_return: Any = None, reraise: bool = True, log_traceback: bool = True):
    """
    异常处理装饰器

    系统异常原样抛出；其它异常包装为 STInstructException。

    Args:
        default_return: 异常时的默认返回值
        reraise: 是否重新抛出异常
        log_traceback: 是否记录堆栈跟踪
    """

    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except STInstructException:
                raise
            except Exception as e:
                if log_traceback:
                    logger.error(f"💥 函数 {func.__name__} 发生未处理异常: {traceback.format_exc()}")

                wrapped_exception = STInstructException(
                    message=f"函数 {func.__name__} 执行失败: {str(e)}",
                    error_code=ErrorCode.UNKNOWN_ERROR,
                    cause=e,
                    details={"function": func.__name__},
                )
                if reraise:
                    raise wrapped_exception from e
                return default_return

        return wrapper

    return decorator
