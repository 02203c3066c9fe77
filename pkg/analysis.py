#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
分析模块：表示坍缩与谱诊断、四阶矩张量验证、复杂度扩展性测量
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from cells import RgcState, RgcWeights, rgc_factors, rgc_step
from jepa import EncodedSequence
from numerics import Rng, as_matrix, check_symmetric, kron_chain, solve_linear, spectral_radius, sym_eig
from oracles import RTRL_MAX_N, rgc_adjoint_sweep, rgc_dense_jacobian, rgc_immediate_sensitivity
from rfp import rfp_init, rfp_update
from utils.errors import CapacityError, ContractError, NumericError, ValidationError
from utils.logger import setup_logger

logger = setup_logger("analysis", logging.INFO)

# Kronecker 求解的规模上限（n⁴ 个未知数）
MOMENT_MAX_N = 4

# 蒙特卡洛最少样本数
MC_MIN_SAMPLES = 10_000

# 折刀法默认分块数
JACKKNIFE_BLOCKS = 400

# 三种时滞，T(Δ₁,Δ₂,Δ₃)_{ijmn} = E[c_i(t+Δ₃) c_j(t+Δ₃-Δ₁) c_m(t+Δ₃-Δ₂) c_n(t)]
LAGS = ((0, 0, 0), (0, 1, 1), (1, 2, 2))

BENCH_MODES = ("rfp", "full_rtrl", "bptt")


@dataclass
class SpectrumReport:
    """特征协方差谱"""
    eigenvalues: np.ndarray
    participation_ratio: float
    pca_coords: np.ndarray
    count_90: int

    def to_dataframe(self):
        return pd.DataFrame({"rank": np.arange(1, len(self.eigenvalues) + 1), "eigenvalue": self.eigenvalues})

    def pca_dataframe(self):
        return pd.DataFrame(self.pca_coords, columns=["pc1", "pc2"])


def participation_ratio(eigenvalues):
    """参与率 (Σλ)² / Σλ²"""
    lam = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    denom = float(np.sum(lam * lam))
    if denom <= 0.0:
        raise NumericError("协方差谱全为零，参与率无定义")
    return float(np.sum(lam)) ** 2 / denom


def covariance_spectrum(h, method="eigh"):
    """表示协方差 (1/T) Σ_t h(t)h(t)ᵀ 的谱

    Args:
        h: 表示矩阵，形状 (d, T)，每列为一个 h(t)
        method: 特征分解方法

    Returns:
        SpectrumReport: 谱报告，PCA 坐标为 h(t) 在前两个特征向量上的投影
    """
    h = as_matrix(h, "H")
    d, T = h.shape
    if T < 2:
        raise ValidationError(f"谱分析至少需要 2 个样本，实际 {T}")
    cov = h @ h.T / T
    values, vectors = sym_eig(cov, method=method)
    pr = participation_ratio(values)
    # 取整误差可能让 PR 略微越界
    pr = float(np.clip(pr, 1.0, d))
    coords = h.T @ vectors[:, :min(2, d)]
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((T, 2 - coords.shape[1]))])
    lam = np.clip(values, 0.0, None)
    cumulative = np.cumsum(lam) / np.sum(lam)
    count_90 = int(np.searchsorted(cumulative, 0.9 - 1e-12) + 1)
    return SpectrumReport(values, pr, coords, count_90)


def _check_moment_inputs(u, sigma):
    u = as_matrix(u, "U")
    sigma = as_matrix(sigma, "Sigma")
    n = u.shape[0]
    if n > MOMENT_MAX_N:
        raise CapacityError(f"四阶矩 Kronecker 求解限于 n ≤ {MOMENT_MAX_N}，实际 {n}")
    if u.shape != (n, n) or sigma.shape != (n, n):
        raise ValidationError(f"U 与 Σ 必须是 {n}×{n} 方阵")
    if spectral_radius(u) >= 1.0:
        raise ValidationError(f"U 的谱半径 {spectral_radius(u):.4f} ≥ 1")
    try:
        check_symmetric(sigma)
    except ContractError as e:
        raise ValidationError(f"Σ 不对称: {str(e)}")
    if np.linalg.eigvalsh(sigma).min() < -1e-12:
        raise ValidationError("Σ 不是半正定矩阵")
    return u, sigma


def stationary_covariance(u, sigma):
    """平稳协方差 P = U P Uᵀ + Σ，以 (I - U⊗U) vec P = vec Σ 求解"""
    u, sigma = _check_moment_inputs(u, sigma)
    n = u.shape[0]
    vec = solve_linear(np.eye(n * n) - kron_chain(u, u), sigma.reshape(-1))
    p = vec.reshape(n, n)
    return 0.5 * (p + p.T)


def gaussian_pairings(a, b):
    """四阶张量 Σ 两两配对项 a_ij b_mn + a_im b_jn + a_in b_jm"""
    return (np.einsum("ij,mn->ijmn", a, b)
            + np.einsum("im,jn->ijmn", a, b)
            + np.einsum("in,jm->ijmn", a, b))


@dataclass
class MomentReport:
    """四阶矩张量报告，各张量按 (i,j,m,n) 行优先展平，长度 n⁴"""
    n: int
    as_stated: dict = field(default_factory=dict)
    exact: dict = field(default_factory=dict)
    mc_mean: dict = field(default_factory=dict)
    mc_stderr: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)

    def to_dataframe(self):
        rows = []
        for lag in LAGS:
            for idx in range(self.n ** 4):
                row = {"lag": "".join(str(v) for v in lag), "index": idx}
                if lag in self.as_stated:
                    row["as_stated"] = float(self.as_stated[lag][idx])
                if lag in self.exact:
                    row["exact"] = float(self.exact[lag][idx])
                if lag in self.mc_mean:
                    row["mc_mean"] = float(self.mc_mean[lag][idx])
                    row["mc_stderr"] = float(self.mc_stderr[lag][idx])
                rows.append(row)
        return pd.DataFrame(rows)

    def z_scores(self, reference="exact"):
        """蒙特卡洛估计相对闭式值的标准化偏差"""
        ref = self.exact if reference == "exact" else self.as_stated
        out = {}
        for lag in LAGS:
            if lag in ref and lag in self.mc_mean:
                err = np.maximum(self.mc_stderr[lag], 1e-300)
                out[lag] = (self.mc_mean[lag] - ref[lag]) / err
        return out


def moment_closed_form(u, sigma):
    """四阶矩闭式解

    as_stated: vec T(0,0,0) = [I - U⊗U⊗U⊗U]⁻¹ vec(T^B)，
               T(0,1,1) = [U⊗U⊗I⊗I] T(0,0,0)，T(1,2,2) = [U²⊗U⊗I⊗I] T(0,0,0)。
    exact:     补上 U c(t-1) 与 b(t) 的交叉项：
               T(0,0,0) = [I - U⊗4]⁻¹ vec(T^B + pairings(K, Σ) + pairings(Σ, K))，K = U P Uᵀ，
               T(0,1,1) = [U⊗U⊗I⊗I] T(0,0,0) + vec(Σ ⊗ P)，T(1,2,2) = [U⊗I⊗I⊗I] T(0,1,1)。

    Args:
        u: 转移矩阵 (n ≤ 4)
        sigma: 噪声协方差

    Returns:
        MomentReport: 含 as_stated 与 exact 两组张量
    """
    u, sigma = _check_moment_inputs(u, sigma)
    n = u.shape[0]
    eye = np.eye(n)
    system = np.eye(n ** 4) - kron_chain(u, u, u, u)

    t_b = gaussian_pairings(sigma, sigma).reshape(-1)
    t000 = solve_linear(system, t_b)
    stated = {
        (0, 0, 0): t000,
        (0, 1, 1): kron_chain(u, u, eye, eye) @ t000,
        (1, 2, 2): kron_chain(u @ u, u, eye, eye) @ t000,
    }

    p = stationary_covariance(u, sigma)
    k = u @ p @ u.T
    cross = gaussian_pairings(k, sigma) + gaussian_pairings(sigma, k)
    e000 = solve_linear(system, t_b + cross.reshape(-1))
    e011 = kron_chain(u, u, eye, eye) @ e000 + np.einsum("ij,mn->ijmn", sigma, p).reshape(-1)
    e122 = kron_chain(u, eye, eye, eye) @ e011
    exact = {(0, 0, 0): e000, (0, 1, 1): e011, (1, 2, 2): e122}
    return MomentReport(n, as_stated=stated, exact=exact)


def _pair_products(a, b):
    """逐时刻外积 a(t)_i b(t)_j，形状 (L, n²)"""
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)


def _block_sums(c):
    """一段轨迹上三种时滞的四阶乘积之和，c 形状 (L+2, n)"""
    base = c[:-2]
    zero = _pair_products(base, base)
    s000 = _pair_products(base, base).T @ zero
    s011 = _pair_products(c[1:-1], c[1:-1]).T @ zero
    s122 = _pair_products(c[2:], c[1:-1]).T @ zero
    return {LAGS[0]: s000.reshape(-1), LAGS[1]: s011.reshape(-1), LAGS[2]: s122.reshape(-1)}


def moment_monte_carlo(u, sigma, samples, burn_in=1000, seed=0, blocks=JACKKNIFE_BLOCKS):
    """蒙特卡洛估计四阶矩及其折刀法标准误

    模拟单条链，预热后取 samples 个起点，分成 blocks 个等长块做删一块折刀。

    Returns:
        MomentReport: mc_mean 与 mc_stderr
    """
    u, sigma = _check_moment_inputs(u, sigma)
    if samples < MC_MIN_SAMPLES:
        raise ValidationError(f"蒙特卡洛样本数至少 {MC_MIN_SAMPLES}，实际 {samples}")
    n = u.shape[0]
    blocks = max(2, min(blocks, samples // 10))
    block_len = samples // blocks
    used = block_len * blocks

    values, vectors = np.linalg.eigh(sigma)
    noise = vectors * np.sqrt(np.clip(values, 0.0, None))
    rng = Rng(seed)

    c = np.zeros(n)
    for _ in range(burn_in):
        c = u @ c + noise @ rng.normal(n)
    chain = np.empty((used + 2, n))
    for t in range(used + 2):
        c = u @ c + noise @ rng.normal(n)
        chain[t] = c

    sums = {lag: np.zeros((blocks, n ** 4)) for lag in LAGS}
    for b in range(blocks):
        seg = chain[b * block_len:(b + 1) * block_len + 2]
        for lag, s in _block_sums(seg).items():
            sums[lag][b] = s

    report = MomentReport(n)
    for lag in LAGS:
        total = sums[lag].sum(axis=0)
        mean = total / used
        leave_out = (total[None, :] - sums[lag]) / (used - block_len)
        var = (blocks - 1) / blocks * np.sum((leave_out - leave_out.mean(axis=0)) ** 2, axis=0)
        report.mc_mean[lag] = mean
        report.mc_stderr[lag] = np.sqrt(var)
    logger.debug(f"蒙特卡洛四阶矩完成: n={n}, 样本 {used}, 分块 {blocks}")
    return report


def loglog_slope(x, y):
    """对数坐标下的最小二乘斜率"""
    x = np.log(np.asarray(x, dtype=np.float64))
    y = np.log(np.asarray(y, dtype=np.float64))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def tau_scaling_check(sigma, tau_grid):
    """闭式张量范数随 τ 的对数斜率（U = τI，as_stated 形式）

    Returns:
        dict: {"slope_011": ..., "slope_122": ..., "norms": DataFrame}
    """
    grid = np.asarray(tau_grid, dtype=np.float64)
    if grid.size < 4:
        raise ValidationError(f"τ 网格至少需要 4 个点，实际 {grid.size}")
    if np.any(grid <= 0.0) or np.any(grid > 0.5):
        raise ValidationError("τ 网格必须位于 (0, 0.5] 内")
    sigma = as_matrix(sigma, "Sigma")
    n = sigma.shape[0]
    rows = []
    for tau in grid:
        report = moment_closed_form(tau * np.eye(n), sigma)
        rows.append({
            "tau": tau,
            "norm_000": float(np.linalg.norm(report.as_stated[(0, 0, 0)])),
            "norm_011": float(np.linalg.norm(report.as_stated[(0, 1, 1)])),
            "norm_122": float(np.linalg.norm(report.as_stated[(1, 2, 2)])),
        })
    norms = pd.DataFrame(rows)
    return {
        "slope_011": loglog_slope(norms["tau"], norms["norm_011"]),
        "slope_122": loglog_slope(norms["tau"], norms["norm_122"]),
        "norms": norms,
    }


def _bench_rfp(n, T, rng, dtype):
    """只对 rfp_update 计时，状态推进与因子计算不计入"""
    w = RgcWeights.random(n, rng.generator, 0.5, diagonal_gates=True)
    xs = rng.normal((T, n)).astype(dtype)
    state = RgcState.zeros(n)
    sens = rfp_init(n, dtype)
    elapsed = 0.0
    for t in range(1, T + 1):
        new_state, cache = rgc_step(state, xs[t - 1], w)
        f = rgc_factors(state, xs[t - 1], w, t, cache)
        mu0, mu1 = f.mu0.astype(dtype), f.mu1.astype(dtype)
        j0, j1 = f.j0.astype(dtype), f.j1.astype(dtype)
        start = time.perf_counter()
        sens = rfp_update(sens, mu0, mu1, j0, j1, t=t)
        elapsed += time.perf_counter() - start
        state = new_state
    return elapsed, sens.memory_reals


def _bench_rtrl(n, T, rng, dtype):
    if n > RTRL_MAX_N:
        raise CapacityError(f"完整 RTRL 基准 n={n} 超过上限 {RTRL_MAX_N}")
    w = RgcWeights.random(n, rng.generator, 0.5)
    xs = rng.normal((T, n)).astype(dtype)
    state = RgcState.zeros(n)
    gamma = np.zeros((2 * n, 4 * n * n), dtype=dtype)
    start = time.perf_counter()
    for t in range(T):
        jac = rgc_dense_jacobian(state, xs[t], w)
        r = rgc_immediate_sensitivity(state, xs[t], w).reshape(2 * n, -1)
        gamma = jac.astype(dtype) @ gamma + r.astype(dtype)
        state, _ = rgc_step(state, xs[t], w)
    elapsed = time.perf_counter() - start
    return elapsed, int(gamma.size)


def _bench_bptt(n, T, rng, dtype):
    w = RgcWeights.random(n, rng.generator, 0.5)
    xs = rng.normal((T, n)).astype(dtype)
    start = time.perf_counter()
    state = RgcState.zeros(n)
    s = np.zeros((T + 1, n))
    m = np.zeros((T + 1, n))
    caches = []
    for t in range(1, T + 1):
        state, cache = rgc_step(state, xs[t - 1], w)
        s[t], m[t] = state.s, state.m
        caches.append(cache)
    enc = EncodedSequence(xs, s, m, s[1:], caches)
    d_s = np.zeros_like(s)
    d_s[1:] = rng.normal((T, n))
    rgc_adjoint_sweep(w, enc, d_s)
    elapsed = time.perf_counter() - start
    return elapsed, enc.memory_reals


BENCH_RUNNERS = {"rfp": _bench_rfp, "full_rtrl": _bench_rtrl, "bptt": _bench_bptt}


def scaling_bench(cell_sizes, T, mode, repeats=3, seed=0, use_float32=False):
    """测量不同规模下每步耗时与计数的状态存储

    Args:
        cell_sizes: 单元数列表
        T: 序列长度
        mode: "rfp" | "full_rtrl" | "bptt"
        repeats: 重复次数（取最小耗时）
        seed: 随机种子
        use_float32: 输入使用 32 位浮点

    Returns:
        tuple: (DataFrame[mode, n, T, wall_ms_per_step, state_memory_reals], 耗时对数斜率)
    """
    if mode not in BENCH_MODES:
        raise ValidationError(f"未知的基准模式: {mode}")
    dtype = np.float32 if use_float32 else np.float64
    runner = BENCH_RUNNERS[mode]
    rows = []
    for n in cell_sizes:
        best = None
        memory = 0
        for rep in range(repeats):
            elapsed, memory = runner(int(n), T, Rng(seed, (int(n), rep)), dtype)
            best = elapsed if best is None else min(best, elapsed)
        rows.append({
            "mode": mode,
            "n": int(n),
            "T": T,
            "wall_ms_per_step": best * 1000.0 / T,
            "state_memory_reals": int(memory),
        })
        logger.info(f"基准 {mode}: n={n}, 每步 {rows[-1]['wall_ms_per_step']:.4f} ms, 存储 {memory}")
    table = pd.DataFrame(rows)
    slope = loglog_slope(table["n"], table["wall_ms_per_step"]) if len(table) >= 2 else float("nan")
    return table, slope
