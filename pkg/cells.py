#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
循环单元模块，实现往复门控电路(RGC)、时间衰减单元与两点交互单元接口
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from numerics import as_matrix, as_vector
from utils.errors import ContractError, NumericError, ShapeError, ValidationError
from utils.logger import setup_logger

logger = setup_logger("cells", logging.INFO)

# 权重块编号：k=0,1,2,3 依次对应 ss, ms, mm, sm
BLOCK_NAMES = ("ss", "ms", "mm", "sm")


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


# 门控激活函数及其导数（以输出值表示）
GATE_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "logistic": (_logistic, lambda y: y * (1.0 - y)),
}


def _activation(name):
    if name not in GATE_ACTIVATIONS:
        raise ValidationError(f"不支持的门控激活函数: {name}，可选 {list(GATE_ACTIVATIONS)}")
    return GATE_ACTIVATIONS[name]


def _frozen(m):
    m = np.array(m, dtype=np.float64)
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class RgcWeights:
    """RGC 的四个门控权重矩阵 W^(k)

    diagonal_gates 为真时要求非对角元素严格为零（RFP 精确性条件），
    不满足时直接拒绝而不是静默置零。
    """
    w: tuple
    diagonal_gates: bool = False
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.w) != 4:
            raise ShapeError(f"RGC 需要4个权重矩阵，实际 {len(self.w)} 个")
        mats = tuple(_frozen(as_matrix(m, f"W{k}")) for k, m in enumerate(self.w))
        n = mats[0].shape[0]
        for k, m in enumerate(mats):
            if m.shape != (n, n):
                raise ShapeError(f"W{k} 形状应为 ({n}, {n})，实际 {m.shape}")
        if self.diagonal_gates:
            for k, m in enumerate(mats):
                off = m - np.diag(np.diag(m))
                if np.any(off != 0.0):
                    raise ContractError(f"diagonal_gates 已设置，但 W{k} 含有非零非对角元素")
        _activation(self.activation)
        object.__setattr__(self, "w", mats)

    @property
    def n(self):
        return self.w[0].shape[0]

    @classmethod
    def zeros(cls, n, diagonal_gates=False, activation="tanh"):
        """全零权重（无时间动态）"""
        return cls(tuple(np.zeros((n, n)) for _ in range(4)), diagonal_gates, activation)

    @classmethod
    def random(cls, n, generator, scale=0.5, diagonal_gates=False, activation="tanh"):
        """随机权重，diagonal_gates 时只生成对角元素

        Args:
            n: 单元数
            generator: numpy 随机数生成器
            scale: 标准差
            diagonal_gates: 是否只保留对角
            activation: 门控激活函数

        Returns:
            RgcWeights: 随机权重
        """
        mats = []
        for _ in range(4):
            if diagonal_gates:
                mats.append(np.diag(generator.normal(0.0, scale, n)))
            else:
                mats.append(generator.normal(0.0, scale / np.sqrt(n), (n, n)))
        return cls(tuple(mats), diagonal_gates, activation)

    def stacked(self):
        """四个矩阵堆叠为 (4, n, n) 数组"""
        return np.stack(self.w)

    def replace(self, w=None, diagonal_gates=None):
        """返回替换部分字段后的新权重"""
        return RgcWeights(
            tuple(w) if w is not None else self.w,
            self.diagonal_gates if diagonal_gates is None else diagonal_gates,
            self.activation,
        )


@dataclass(frozen=True)
class RgcState:
    """RGC 状态 c = (s, m)，即 c^(0) 与 c^(1)"""
    s: np.ndarray
    m: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def components(self):
        """按 ν 索引的状态分量 (c^(0), c^(1))"""
        return (self.s, self.m)


@dataclass(frozen=True)
class GateCache:
    """单步门控缓存，a、b 形状均为 (2, n)，第一维为 ν"""
    a: np.ndarray
    b: np.ndarray
    s_prev: np.ndarray
    m_prev: np.ndarray
    x: np.ndarray


@dataclass(frozen=True)
class GateFactors:
    """时间步 t 的 RFP 递推因子"""
    t: int
    mu0: np.ndarray
    mu1: np.ndarray
    j0: np.ndarray
    j1: np.ndarray


def _check_inputs(state, x, w):
    n = w.n
    if state.s.shape != (n,) or state.m.shape != (n,):
        raise ShapeError(f"状态维度应为 {n}，实际 s={state.s.shape}, m={state.m.shape}")
    return as_vector(x, "x", size=n)


def rgc_gates(state_prev, x, w):
    """计算门控值 a^(ν)、b^(ν)

    a^(ν) = f(W^(2ν+1) c^(1-ν)(t-1))，b^(ν) = f(W^(2ν) c^(ν)(t-1))

    Returns:
        GateCache: 门控缓存
    """
    x = _check_inputs(state_prev, x, w)
    f, _ = _activation(w.activation)
    c = state_prev.components()
    a = np.stack([f(w.w[2 * nu + 1] @ c[1 - nu]) for nu in (0, 1)])
    b = np.stack([f(w.w[2 * nu] @ c[nu]) for nu in (0, 1)])
    return GateCache(a, b, state_prev.s, state_prev.m, x)


def rgc_step(state, x, w):
    """RGC 单步更新

    c^(ν)_i(t) = (1 - a^(ν)_i) x_i(t) + b^(ν)_i c^(ν)_i(t-1)

    Args:
        state: 上一时刻状态 RgcState
        x: 输入向量
        w: RgcWeights

    Returns:
        tuple: (新状态 RgcState, 门控缓存 GateCache)
    """
    cache = rgc_gates(state, x, w)
    c = state.components()
    new = [(1.0 - cache.a[nu]) * cache.x + cache.b[nu] * c[nu] for nu in (0, 1)]
    if not (np.all(np.isfinite(new[0])) and np.all(np.isfinite(new[1]))):
        raise NumericError("RGC 输出出现非有限数值")
    return RgcState(new[0], new[1]), cache


def rgc_gate_factors(state_prev, x, w, cache=None):
    """RFP 递推中的对角因子 μ^(ν,0)、μ^(ν,1)

    μ^(ν,0) = f'(b^(ν)) ⊙ c^(ν)(t-1) ⊙ diag(W^(2ν)) + b^(ν)
    μ^(ν,1) = -f'(a^(ν)) ⊙ x(t) ⊙ diag(W^(2ν+1))

    Args:
        state_prev: 上一时刻状态
        x: 当前输入
        w: RgcWeights
        cache: 可选的门控缓存，缺省时重新计算

    Returns:
        tuple: (mu0, mu1)，形状均为 (2, n)
    """
    if cache is None:
        cache = rgc_gates(state_prev, x, w)
    _, df = _activation(w.activation)
    c = (cache.s_prev, cache.m_prev)
    mu0 = np.stack([df(cache.b[nu]) * c[nu] * np.diag(w.w[2 * nu]) + cache.b[nu] for nu in (0, 1)])
    mu1 = np.stack([-df(cache.a[nu]) * cache.x * np.diag(w.w[2 * nu + 1]) for nu in (0, 1)])
    return mu0, mu1


def rgc_source_terms(state_prev, x, w, cache=None):
    """RFP 递推中的源项 J^(ν,0)、J^(ν,1)

    J^(ν,0) = [f'(b^(ν)) ⊙ c^(ν)(t-1)] c^(ν)(t-1)^T
    J^(ν,1) = -[f'(a^(ν)) ⊙ x(t)] c^(1-ν)(t-1)^T

    Returns:
        tuple: (j0, j1)，形状均为 (2, n, n)
    """
    if cache is None:
        cache = rgc_gates(state_prev, x, w)
    _, df = _activation(w.activation)
    c = (cache.s_prev, cache.m_prev)
    j0 = np.stack([np.outer(df(cache.b[nu]) * c[nu], c[nu]) for nu in (0, 1)])
    j1 = np.stack([np.outer(-df(cache.a[nu]) * cache.x, c[1 - nu]) for nu in (0, 1)])
    return j0, j1


def rgc_factors(state_prev, x, w, t, cache=None):
    """打包时间步 t 的全部 RFP 因子"""
    if cache is None:
        cache = rgc_gates(state_prev, x, w)
    mu0, mu1 = rgc_gate_factors(state_prev, x, w, cache)
    j0, j1 = rgc_source_terms(state_prev, x, w, cache)
    return GateFactors(t, mu0, mu1, j0, j1)


@dataclass(frozen=True)
class TimeDecayParams:
    """时间衰减单元参数 c_l(t) = τ_l c_l(t-1) + P^(l) c_{l-1}(t)

    p[l-1] 为第 l 层的输入映射，形状 d_l × d_{l-1}；c_0 为外部输入。
    """
    taus: tuple
    p: tuple

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        mats = tuple(_frozen(as_matrix(m, f"P{l + 1}")) for l, m in enumerate(self.p))
        if len(taus) != len(mats):
            raise ShapeError(f"τ 数量 {len(taus)} 与层数 {len(mats)} 不一致")
        if not mats:
            raise ShapeError("时间衰减单元至少需要一层")
        for l, tau in enumerate(taus):
            if not abs(tau) < 1.0:
                raise ValidationError(f"第 {l + 1} 层 |τ|={abs(tau)} 不满足稳定条件 |τ|<1")
        for l in range(1, len(mats)):
            if mats[l].shape[1] != mats[l - 1].shape[0]:
                raise ShapeError(f"第 {l + 1} 层输入维度 {mats[l].shape[1]} 与上一层输出 {mats[l - 1].shape[0]} 不匹配")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "p", mats)

    @property
    def layer_count(self):
        return len(self.p)

    @property
    def dims(self):
        """各层维度 (d_0, d_1, ..., d_L)"""
        return (self.p[0].shape[1],) + tuple(m.shape[0] for m in self.p)

    def zero_state(self):
        return [np.zeros(d) for d in self.dims[1:]]


def time_decay_step(c_prev, x, params, normalize_layer=None):
    """时间衰减单元单步更新，各层自下而上依次更新

    Args:
        c_prev: 各层上一时刻状态列表
        x: 外部输入 c_0(t)
        params: TimeDecayParams
        normalize_layer: 若给定层号 l（从1开始），该层输出归一化为单位范数后再送入上一层

    Returns:
        list: 各层新状态
    """
    if len(c_prev) != params.layer_count:
        raise ShapeError(f"状态层数 {len(c_prev)} 与参数层数 {params.layer_count} 不一致")
    below = as_vector(x, "x", size=params.dims[0])
    new = []
    for l, (tau, p_map) in enumerate(zip(params.taus, params.p), start=1):
        prev = np.asarray(c_prev[l - 1], dtype=np.float64)
        if prev.shape != (p_map.shape[0],):
            raise ShapeError(f"第 {l} 层状态维度应为 {p_map.shape[0]}，实际 {prev.shape}")
        c = tau * prev + p_map @ below
        if normalize_layer == l:
            norm = np.linalg.norm(c)
            if norm > 0:
                c = c / norm
        new.append(c)
        below = c
    return new


class TwoPointCell(ABC):
    """两点交互单元接口

    仅当参数到状态的映射满足 R_{k,p} = δ_{ki} R̂_{ij}，且递推中使用的状态雅可比为对角时，
    RFP 的 O(n²) 递推才是精确梯度。
    """

    @abstractmethod
    def step(self, state, x):
        """单步更新，返回 (新状态, 缓存)"""

    @abstractmethod
    def diag_jacobian(self, cache):
        """状态雅可比的对角因子（μ 项）"""

    @abstractmethod
    def local_sensitivity(self, cache):
        """参数的即时敏感度源项（R̂ / J 项）"""

    @property
    @abstractmethod
    def is_exact(self):
        """两点交互条件是否成立"""


class RgcCell(TwoPointCell):
    """RGC 的两点交互单元实现"""

    def __init__(self, weights):
        self.weights = weights

    def step(self, state, x):
        return rgc_step(state, x, self.weights)

    def diag_jacobian(self, cache):
        state_prev = RgcState(cache.s_prev, cache.m_prev)
        return rgc_gate_factors(state_prev, cache.x, self.weights, cache)

    def local_sensitivity(self, cache):
        state_prev = RgcState(cache.s_prev, cache.m_prev)
        return rgc_source_terms(state_prev, cache.x, self.weights, cache)

    @property
    def is_exact(self):
        return self.weights.diagonal_gates


@dataclass(frozen=True)
class TimeDecayCache:
    c_prev: np.ndarray
    u: np.ndarray


class TimeDecayCell(TwoPointCell):
    """单层时间衰减单元 c(t) = τ c(t-1) + P u(t)，参数为 P 的各元素

    J_ii = τ，R̂_ij(t) = u_j(t)。
    """

    def __init__(self, tau, p_map):
        if not abs(tau) < 1.0:
            raise ValidationError(f"|τ|={abs(tau)} 不满足稳定条件 |τ|<1")
        self.tau = float(tau)
        self.p_map = as_matrix(p_map, "P")

    def step(self, state, x):
        u = as_vector(x, "u", size=self.p_map.shape[1])
        c = self.tau * np.asarray(state) + self.p_map @ u
        return c, TimeDecayCache(np.asarray(state, dtype=np.float64), u)

    def diag_jacobian(self, cache):
        return np.full(self.p_map.shape[0], self.tau)

    def local_sensitivity(self, cache):
        return np.tile(cache.u, (self.p_map.shape[0], 1))

    @property
    def is_exact(self):
        return True
