#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
数值计算模块，提供稠密线性代数、随机数生成与谱分解
"""
import logging

import numpy as np

from utils.errors import ContractError, NumericError, ShapeError, SingularMatrixError
from utils.logger import setup_logger

logger = setup_logger("numerics", logging.INFO)

# 全部计算默认使用64位浮点数，32位只在基准测试中按需开启
DEFAULT_DTYPE = np.float64

# 求解线性方程时允许的最大条件数
MAX_CONDITION = 1e12

# 对称性检查的相对容差
SYMMETRY_TOL = 1e-9


def as_matrix(data, name="matrix", dtype=DEFAULT_DTYPE):
    """转换为二维矩阵并检查数值有限

    Args:
        data: 数组或嵌套列表，一维输入视为列向量
        name: 名称，用于报错
        dtype: 数据类型

    Returns:
        np.ndarray: 二维矩阵
    """
    m = np.asarray(data, dtype=dtype)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(-1, 1)
    elif m.ndim != 2:
        raise ShapeError(f"{name} 必须是二维矩阵，实际维度 {m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} 含有非有限数值")
    return m


def as_vector(data, name="vector", size=None, dtype=DEFAULT_DTYPE):
    """转换为一维向量，可选检查长度

    Args:
        data: 数组
        name: 名称，用于报错
        size: 期望长度
        dtype: 数据类型

    Returns:
        np.ndarray: 一维向量
    """
    v = np.asarray(data, dtype=dtype).reshape(-1)
    if size is not None and v.shape[0] != size:
        raise ShapeError(f"{name} 长度应为 {size}，实际为 {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{name} 含有非有限数值")
    return v


def frobenius(m):
    """Frobenius 范数"""
    return float(np.sqrt(np.sum(np.square(m))))


def matmul(a, b):
    """矩阵乘法

    Args:
        a: 左矩阵
        b: 右矩阵

    Returns:
        np.ndarray: 乘积 a·b
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"矩阵乘法维度不匹配: {a.shape} × {b.shape}")
    return a @ b


def kron(a, b):
    """Kronecker 积，第 (i,j) 块等于 a[i][j]·b"""
    return np.kron(as_matrix(a, "a"), as_matrix(b, "b"))


def kron_chain(*factors):
    """多个矩阵的连续 Kronecker 积 a⊗b⊗c⊗..."""
    if not factors:
        raise ShapeError("kron_chain 至少需要一个因子")
    result = as_matrix(factors[0])
    for factor in factors[1:]:
        result = kron(result, factor)
    return result


def solve_linear(a, b):
    """求解线性方程组 a·x = b（不显式求逆）

    Args:
        a: 方阵
        b: 右端项，向量或矩阵

    Returns:
        np.ndarray: 解 x，形状与 b 相同
    """
    a = as_matrix(a, "a")
    b_arr = np.asarray(b, dtype=DEFAULT_DTYPE)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"系数矩阵必须是方阵，实际 {a.shape}")
    if b_arr.shape[0] != a.shape[0]:
        raise ShapeError(f"右端项行数 {b_arr.shape[0]} 与系数矩阵 {a.shape} 不匹配")
    if not np.all(np.isfinite(b_arr)):
        raise NumericError("右端项含有非有限数值")

    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularMatrixError(f"矩阵奇异或病态，条件数 {cond:.3e} 超过 {MAX_CONDITION:.0e}")
    return np.linalg.solve(a, b_arr)


def check_symmetric(m, tol=SYMMETRY_TOL):
    """检查矩阵对称（相对容差）

    Raises:
        ContractError: 矩阵非方阵或不对称
    """
    if m.shape[0] != m.shape[1]:
        raise ContractError(f"矩阵必须是方阵，实际 {m.shape}")
    scale = max(frobenius(m), 1e-300)
    asym = frobenius(m - m.T)
    if asym > tol * scale:
        raise ContractError(f"矩阵不对称，相对非对称度 {asym / scale:.3e}")


def _jacobi_eig(a, tol=1e-14, max_sweeps=100):
    """循环 Jacobi 旋转求对称矩阵特征分解"""
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = max(frobenius(a), 1e-300)

    for sweep in range(max_sweeps):
        off = np.sqrt(max(np.sum(np.square(a)) - np.sum(np.square(np.diag(a))), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q

                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q

                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        logger.warning(f"Jacobi 迭代达到最大轮数 {max_sweeps}，可能未完全收敛")

    return np.diag(a).copy(), v


def sym_eig(m, method="eigh"):
    """对称矩阵特征分解

    Args:
        m: 对称方阵
        method: "jacobi" 使用循环 Jacobi 旋转，"eigh" 使用 LAPACK

    Returns:
        tuple: (降序特征值, 特征向量矩阵，第 i 列对应第 i 个特征值)
    """
    m = as_matrix(m, "m")
    check_symmetric(m)
    sym = 0.5 * (m + m.T)

    if method == "jacobi":
        values, vectors = _jacobi_eig(sym)
    elif method == "eigh":
        values, vectors = np.linalg.eigh(sym)
    else:
        raise ContractError(f"未知的特征分解方法: {method}")

    order = np.argsort(values)[::-1]
    return values[order], vectors[:, order]


def spectral_radius(m):
    """一般方阵的谱半径"""
    m = as_matrix(m, "m")
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"谱半径需要方阵，实际 {m.shape}")
    if m.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def random_orthonormal(rows, cols, generator):
    """生成行或列正交归一的随机矩阵

    rows <= cols 时各行正交归一，否则各列正交归一。

    Args:
        rows: 行数
        cols: 列数
        generator: numpy 随机数生成器

    Returns:
        np.ndarray: 随机正交矩阵
    """
    big, small = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(generator.standard_normal((big, small)))
    # 固定符号，保证分布均匀
    q = q * np.sign(np.diag(r))
    return q.T if rows <= cols and rows != cols else q


class Rng:
    """可复现的随机数生成器

    底层使用 numpy 的 Philox4x64 计数器型生成器，种子经 SeedSequence 展开。
    子流的派生规则：Rng(seed, key=(k1, k2, ...)) 等价于
    SeedSequence(seed, spawn_key=(k1, k2, ...))，同一 (seed, key) 在任何平台上产生相同序列。
    实例只供单一使用者持有，不在线程间共享。
    """

    def __init__(self, seed, key=()):
        """初始化生成器

        Args:
            seed: 64位整数种子
            key: 派生子流的键（整数元组）
        """
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, *key):
        """按派生规则生成独立子流"""
        return Rng(self.seed, self.key + tuple(key))

    def normal(self, size=None, scale=1.0):
        return self.generator.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random_raw(self, count):
        """原始64位输出，用于复现性检查"""
        return self.generator.bit_generator.random_raw(count)
