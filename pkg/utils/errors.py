#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
异常定义模块，各模块抛出的错误类型
"""


class RjepaError(Exception):
    """所有引擎错误的基类"""


class ShapeError(RjepaError, ValueError):
    """矩阵或向量维度不匹配"""


class ContractError(RjepaError, ValueError):
    """输入违反函数前置条件（如矩阵不对称）"""


class SingularMatrixError(RjepaError, ArithmeticError):
    """矩阵奇异或条件数过大"""


class NumericError(RjepaError, ArithmeticError):
    """出现非有限数值（NaN/Inf）或零范数"""


class SequencingError(RjepaError, RuntimeError):
    """时间步顺序错误"""


class CapacityError(RjepaError, ValueError):
    """超出规模保护上限"""


class ValidationError(RjepaError, ValueError):
    """参数校验失败"""


class ConfigError(RjepaError, ValueError):
    """配置错误，key 为出错的配置项"""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class FormatError(RjepaError, ValueError):
    """文件格式错误，offset 为出错位置（字节）"""

    def __init__(self, message, offset):
        super().__init__(f"{message} (偏移量 {offset})")
        self.offset = offset


class DivergenceError(RjepaError, RuntimeError):
    """训练发散（损失过大或非有限）"""

    def __init__(self, message, epoch=None, loss=None):
        super().__init__(message)
        self.epoch = epoch
        self.loss = loss


class ToleranceError(RjepaError, AssertionError):
    """验证结果超出容差"""
