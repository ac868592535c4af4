"""
错误类型模块

定义规划器与模拟器共用的异常层次，以及异常到退出码的分类逻辑
"""

from enum import Enum
from typing import Optional


class MoePlanError(Exception):
    """所有业务异常的基类"""


class ConfigParseError(MoePlanError):
    """配置文件无法解析（格式错误、空文件、文件不存在）"""


class ConfigValidationError(MoePlanError):
    """配置违反不变量，携带出错字段的点分路径"""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        self.message = message
        super().__init__(f"{field_path}: {message}")


class DomainError(MoePlanError, ValueError):
    """公式或算子的前置条件不满足（例如 n = 0）"""


class SchedulingError(MoePlanError):
    """计算图存在环、融合模式不匹配或重复融合"""


class UnknownAxisError(MoePlanError):
    """扫描参数轴不被识别"""


class ErrorCategory(Enum):
    """错误类别枚举"""
    PARSE = "parse"                 # 配置解析失败
    VALIDATION = "validation"       # 配置校验失败
    DOMAIN = "domain"               # 参数越界
    USAGE = "usage"                 # 命令行用法错误
    FILE_NOT_FOUND = "file_not_found"
    INTERNAL = "internal"           # 内部错误


class ErrorClassifier:
    """错误分类器 - 将异常映射为类别与进程退出码"""

    # 用户侧错误返回 2，其余返回 1
    USER_CATEGORIES = {
        ErrorCategory.PARSE,
        ErrorCategory.VALIDATION,
        ErrorCategory.DOMAIN,
        ErrorCategory.USAGE,
        ErrorCategory.FILE_NOT_FOUND,
    }

    def classify_error(self, error: BaseException) -> ErrorCategory:
        """分类错误类型"""
        if isinstance(error, ConfigParseError):
            return ErrorCategory.PARSE
        if isinstance(error, ConfigValidationError):
            return ErrorCategory.VALIDATION
        if isinstance(error, UnknownAxisError):
            return ErrorCategory.USAGE
        if isinstance(error, DomainError):
            return ErrorCategory.DOMAIN
        if isinstance(error, FileNotFoundError):
            return ErrorCategory.FILE_NOT_FOUND

        error_str = str(error).lower()
        if "no such file" in error_str or "file not found" in error_str:
            return ErrorCategory.FILE_NOT_FOUND
        return ErrorCategory.INTERNAL

    def exit_code(self, error: Optional[BaseException]) -> int:
        """根据异常得出退出码：0 成功，2 用户错误，1 内部错误"""
        if error is None:
            return 0
        if self.classify_error(error) in self.USER_CATEGORIES:
            return 2
        return 1
