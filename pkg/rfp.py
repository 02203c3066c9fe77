#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
循环前向传播(RFP)模块，维护前向敏感度矩阵并组装 O(n²) 梯度
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from numerics import as_matrix, as_vector
from utils.errors import NumericError, SequencingError, ShapeError, ValidationError
from utils.logger import setup_logger

logger = setup_logger("rfp", logging.INFO)

# 源项路由：权重块 k 的源项进入 Γ^(k//2, k)，取 J^(k//2, k%2)
SOURCE_ROUTES = tuple((k // 2, k, k % 2) for k in range(4))


class OpCounter:
    """浮点运算与存储计数器，用于检查复杂度"""

    def __init__(self):
        self.flops = 0
        self.updates = 0
        self.peak_reals = 0

    def add(self, flops, reals=0):
        self.flops += int(flops)
        self.updates += 1
        self.peak_reals = max(self.peak_reals, int(reals))

    def reset(self):
        self.flops = 0
        self.updates = 0
        self.peak_reals = 0

    @property
    def flops_per_update(self):
        return self.flops / self.updates if self.updates else 0.0


@dataclass(frozen=True)
class SensitivityState:
    """RGC 的折叠敏感度 Γ^(ν,k)，gamma 形状为 (2, 4, n, n)"""
    gamma: np.ndarray
    t: int = 0

    @property
    def n(self):
        return self.gamma.shape[-1]

    @property
    def memory_reals(self):
        """敏感度存储的实数个数，恒为 8n²"""
        return int(self.gamma.size)

    def block(self, nu, k):
        return self.gamma[nu, k]


@dataclass(frozen=True)
class GenericSensitivity:
    """两点交互单元的敏感度 Γ_ij"""
    gamma: np.ndarray
    t: int = 0

    @property
    def memory_reals(self):
        return int(self.gamma.size)


def rfp_init(n, dtype=np.float64):
    """初始化敏感度，八个 Γ 矩阵全为零

    Args:
        n: 单元数
        dtype: 存储精度，默认64位

    Returns:
        SensitivityState: t=0 的敏感度
    """
    if n < 1:
        raise ValidationError(f"单元数必须 ≥ 1，实际 {n}")
    return SensitivityState(np.zeros((2, 4, n, n), dtype=dtype), 0)


def rfp_update(sens, mu0, mu1, j0, j1, t=None, counter=None):
    """敏感度递推一步

    Γ^(ν,k)(t) = μ^(ν,0) ⊙ Γ^(ν,k)(t-1) + μ^(ν,1) ⊙ Γ^(1-ν,k)(t-1) + δ_{k//2,ν} J^(ν,k%2)
    μ 向量按行缩放 Γ。

    Args:
        sens: t-1 时刻的 SensitivityState
        mu0, mu1: 对角因子，形状 (2, n)
        j0, j1: 源项，形状 (2, n, n)
        t: 因子所属的时间步，给定时必须等于 sens.t + 1
        counter: 可选的 OpCounter

    Returns:
        SensitivityState: t 时刻的敏感度
    """
    n = sens.n
    if t is not None and t != sens.t + 1:
        raise SequencingError(f"敏感度处于 t={sens.t}，无法使用第 {t} 步的因子")
    for name, arr, shape in (("mu0", mu0, (2, n)), ("mu1", mu1, (2, n)),
                             ("j0", j0, (2, n, n)), ("j1", j1, (2, n, n))):
        if np.shape(arr) != shape:
            raise ShapeError(f"{name} 形状应为 {shape}，实际 {np.shape(arr)}")

    g = sens.gamma
    new = mu0[:, None, :, None] * g + mu1[:, None, :, None] * g[::-1]
    sources = (j0, j1)
    for nu, k, half in SOURCE_ROUTES:
        new[nu, k] += sources[half][nu]

    if not np.all(np.isfinite(new)):
        raise NumericError(f"第 {sens.t + 1} 步敏感度出现非有限数值")
    if counter is not None:
        # 每个元素两次乘法、一次加法，另有 4n² 次源项加法
        counter.add(3 * g.size + 4 * n * n, new.size)
    return SensitivityState(new, sens.t + 1)


def assemble_gradient(dl_ds, sens):
    """由敏感度组装 RGC 权重梯度

    grad[k][p][q] = dL/ds_p · Γ^(0,k)_pq，只有 s 分支 (ν=0) 参与。

    Args:
        dl_ds: 损失对 s 的导数
        sens: 与 dl_ds 同一时刻的 SensitivityState

    Returns:
        np.ndarray: 形状 (4, n, n) 的梯度
    """
    dl_ds = as_vector(dl_ds, "dl_ds", size=sens.n)
    return dl_ds[None, :, None] * sens.gamma[0]


def generic_init(rows, cols):
    """两点交互单元敏感度初始化"""
    return GenericSensitivity(np.zeros((rows, cols)), 0)


def generic_two_point_update(sens, j_diag, r_hat, counter=None):
    """两点交互单元的敏感度递推

    Γ_ij(t) = J_ii(t) Γ_ij(t-1) + R̂_ij(t)

    Args:
        sens: GenericSensitivity
        j_diag: 状态雅可比对角，长度为行数
        r_hat: 即时敏感度源项

    Returns:
        GenericSensitivity: 新敏感度
    """
    rows, cols = sens.gamma.shape
    j_diag = as_vector(j_diag, "j_diag", size=rows)
    r_hat = as_matrix(r_hat, "r_hat")
    if r_hat.shape != (rows, cols):
        raise ShapeError(f"r_hat 形状应为 {(rows, cols)}，实际 {r_hat.shape}")
    new = j_diag[:, None] * sens.gamma + r_hat
    if counter is not None:
        counter.add(2 * new.size, new.size)
    return GenericSensitivity(new, sens.t + 1)


def generic_assemble(dl_dc, sens):
    """两点交互单元梯度 ∂L/∂w_ij = dL/dc_i · Γ_ij"""
    dl_dc = as_vector(dl_dc, "dl_dc", size=sens.gamma.shape[0])
    return dl_dc[:, None] * sens.gamma


def rfp_memory_reals(n):
    """RFP 敏感度存储量"""
    return 8 * n * n


def rtrl_memory_reals(n):
    """完整 RTRL 敏感度存储量"""
    return 8 * n ** 3


@dataclass
class RfpRun:
    """逐步推进的 RFP 计算记录"""
    sens: SensitivityState
    counter: OpCounter = field(default_factory=OpCounter)
    history: list = field(default_factory=list)

    def advance(self, factors, keep_history=False):
        """使用 cells.GateFactors 推进一步"""
        self.sens = rfp_update(self.sens, factors.mu0, factors.mu1, factors.j0, factors.j1,
                               t=factors.t, counter=self.counter)
        if keep_history:
            self.history.append(self.sens.gamma.copy())
        logger.debug(f"RFP 推进到 t={self.sens.t}")
        return self.sens
