#!/usr/bin/env python3
"""
异常定义
所有模块抛出的错误都继承自 HierMILError，命令行据 exit_code 返回退出码
"""

from typing import Optional


EXIT_OK = 0
EXIT_USAGE = 2      # 用法/配置错误
EXIT_RUNTIME = 3    # 运行时中止


class HierMILError(Exception):
    """基础异常"""
    exit_code: int = EXIT_RUNTIME


class ConfigError(HierMILError, ValueError):
    """配置错误"""
    exit_code = EXIT_USAGE


class InvalidArgumentError(HierMILError, ValueError):
    """参数不合法"""
    exit_code = EXIT_USAGE


class ShapeError(HierMILError, ValueError):
    """张量形状不匹配"""
    exit_code = EXIT_USAGE


class StratificationError(ConfigError):
    """分层划分失败（某类样本过少）"""


class InputError(HierMILError, ValueError):
    """输入数据缺少必要信息"""
    exit_code = EXIT_USAGE


class BagSizeError(InvalidArgumentError):
    """包内实例数不足"""


class FormatError(HierMILError, ValueError):
    """二进制文件格式错误，offset 为出错的字节位置"""

    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = f"{path} " if path else ""
        super().__init__(f"{where}@{offset}: {message}")


class TapeStateError(HierMILError, RuntimeError):
    """梯度带状态错误"""


class NumericError(HierMILError, ArithmeticError):
    """数值错误（非有限值、零归一化等）"""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        self.sample_id = sample_id
        super().__init__(message if sample_id is None else f"{message} (sample={sample_id})")
