"""
统一异常处理模块
"""
import functools
import logging
from typing import Any, Callable, Optional
from enum import Enum


class ErrorCode(Enum):
    """错误码枚举"""
    # 通用错误
    UNKNOWN_ERROR = "E0001"
    VALIDATION_ERROR = "E0002"
    CONFIGURATION_ERROR = "E0003"
    USAGE_ERROR = "E0004"

    # 几何相关错误
    GEOMETRY_ERROR = "E1001"

    # 文档图相关错误
    NO_CORRESPONDENCE = "E2001"
    EMPTY_FIELDS = "E2002"
    GRAPH_ERROR = "E2003"

    # 张量计算错误
    SHAPE_MISMATCH = "E3001"
    NUMERIC_ERROR = "E3002"

    # 训练相关错误
    TRAINING_DIVERGED = "E4001"
    CHECKPOINT_ERROR = "E4002"
    SAMPLING_ERROR = "E4003"

    # 数据集相关错误
    DATASET_ERROR = "E5001"
    SYNTHESIS_ERROR = "E5002"

    # 评估相关错误
    EVALUATION_ERROR = "E6001"


class BaseLabelingError(Exception):
    """基础异常类"""

    def __init__(
        self,
        message: str,
        error_code: ErrorCode = ErrorCode.UNKNOWN_ERROR,
        details: Optional[dict] = None,
        cause: Optional[Exception] = None
    ):
        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.details = details or {}
        self.cause = cause

    def to_dict(self) -> dict:
        """转换为字典格式"""
        return {
            "error_code": self.error_code.value,
            "message": self.message,
            "details": self.details,
            "cause": str(self.cause) if self.cause else None
        }


class ValidationError(BaseLabelingError):
    """参数验证错误"""

    def __init__(self, message: str, field: str = None, **kwargs):
        super().__init__(message, ErrorCode.VALIDATION_ERROR, **kwargs)
        if field:
            self.details["field"] = field


class ConfigurationError(BaseLabelingError):
    """配置错误"""

    def __init__(self, message: str, config_key: str = None, **kwargs):
        super().__init__(message, ErrorCode.CONFIGURATION_ERROR, **kwargs)
        if config_key:
            self.details["config_key"] = config_key


class UsageError(BaseLabelingError):
    """命令行用法错误"""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, ErrorCode.USAGE_ERROR, **kwargs)


class GeometryError(BaseLabelingError):
    """几何输入错误（非有限坐标、非法框）"""

    def __init__(self, message: str, region_id: str = None, **kwargs):
        super().__init__(message, ErrorCode.GEOMETRY_ERROR, **kwargs)
        if region_id:
            self.details["region_id"] = region_id


class GraphError(BaseLabelingError):
    """文档图构建错误"""

    def __init__(self, message: str, doc_id: str = None,
                 error_code: ErrorCode = ErrorCode.GRAPH_ERROR, **kwargs):
        super().__init__(message, error_code, **kwargs)
        if doc_id:
            self.details["doc_id"] = doc_id


class NoCorrespondenceError(GraphError):
    """支持文档与查询文档之间没有可匹配的landmark"""

    def __init__(self, message: str = "no correspondence", **kwargs):
        super().__init__(message, error_code=ErrorCode.NO_CORRESPONDENCE, **kwargs)


class EmptyFieldsError(GraphError):
    """文档中没有field区域"""

    def __init__(self, message: str = "empty F", **kwargs):
        super().__init__(message, error_code=ErrorCode.EMPTY_FIELDS, **kwargs)


class ShapeMismatchError(BaseLabelingError):
    """张量形状不匹配"""

    def __init__(self, message: str, shapes: tuple = None, **kwargs):
        super().__init__(message, ErrorCode.SHAPE_MISMATCH, **kwargs)
        if shapes:
            self.details["shapes"] = [list(s) for s in shapes]


class NumericError(BaseLabelingError):
    """出现NaN/Inf等数值错误"""

    def __init__(self, message: str, op: str = None, **kwargs):
        super().__init__(message, ErrorCode.NUMERIC_ERROR, **kwargs)
        if op:
            self.details["op"] = op


class TrainingError(BaseLabelingError):
    """训练过程错误"""

    def __init__(self, message: str, iteration: int = None,
                 error_code: ErrorCode = ErrorCode.TRAINING_DIVERGED, **kwargs):
        super().__init__(message, error_code, **kwargs)
        if iteration is not None:
            self.details["iteration"] = iteration


class SamplingError(TrainingError):
    """批次采样错误（模板或文档数量不足）"""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, error_code=ErrorCode.SAMPLING_ERROR, **kwargs)


class CheckpointError(BaseLabelingError):
    """检查点读写错误"""

    def __init__(self, message: str, path: str = None, **kwargs):
        super().__init__(message, ErrorCode.CHECKPOINT_ERROR, **kwargs)
        if path:
            self.details["path"] = str(path)


class DatasetError(BaseLabelingError):
    """数据集加载或校验错误"""

    def __init__(self, message: str, doc_id: str = None, region_id: str = None, **kwargs):
        super().__init__(message, ErrorCode.DATASET_ERROR, **kwargs)
        if doc_id:
            self.details["doc_id"] = doc_id
        if region_id:
            self.details["region_id"] = region_id


class SynthesisError(BaseLabelingError):
    """合成数据生成错误"""

    def __init__(self, message: str, template: str = None, **kwargs):
        super().__init__(message, ErrorCode.SYNTHESIS_ERROR, **kwargs)
        if template:
            self.details["template"] = template


class EvaluationError(BaseLabelingError):
    """评估过程错误"""

    def __init__(self, message: str, type_id: str = None, **kwargs):
        super().__init__(message, ErrorCode.EVALUATION_ERROR, **kwargs)
        if type_id:
            self.details["type_id"] = type_id


def exception_handler(
    logger: Optional[logging.Logger] = None,
    reraise: bool = True,
    default_return: Any = None,
    handled_exceptions: tuple = (Exception,)
):
    """
    异常处理装饰器

    Args:
        logger: 日志记录器
        reraise: 是否重新抛出异常
        default_return: 异常时的默认返回值
        handled_exceptions: 要处理的异常类型
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except handled_exceptions as e:
                error_msg = f"Error in {func.__name__}: {str(e)}"

                if logger:
                    if isinstance(e, BaseLabelingError):
                        logger.error(error_msg, extra={"error_details": e.to_dict()})
                    else:
                        logger.error(error_msg, exc_info=True)

                if reraise:
                    raise
                return default_return

        return wrapper

    return decorator
