#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
梯度参照模块：中心有限差分、完整 O(n³) RTRL 与手工推导的 BPTT
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from cells import GATE_ACTIVATIONS, RgcState, TimeDecayCell, rgc_gates, rgc_source_terms, rgc_step
from jepa import RGC_KEYS, encode_sequence, model_loss, readout_backward
from numerics import frobenius
from rfp import generic_assemble, generic_init, generic_two_point_update
from utils.errors import CapacityError, NumericError, ShapeError, ValidationError
from utils.logger import setup_logger

logger = setup_logger("oracles", logging.INFO)

# 完整 RTRL 的规模上限（8n³ 存储）
RTRL_MAX_N = 64

# 有限差分默认步长
FD_EPS = 1e-5

# 两个梯度都小于该范数时视为一致
TINY_NORM = 1e-10

REPORT_COLUMNS = ["method_a", "method_b", "block", "rel_err_max", "rel_err_mean", "n", "T", "seed"]


def rel_error(g1, g2):
    """相对误差 ‖g1 - g2‖_F / max(‖g1‖_F, ‖g2‖_F, 1e-30)"""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ShapeError(f"梯度形状不一致: {g1.shape} vs {g2.shape}")
    return frobenius(g1 - g2) / max(frobenius(g1), frobenius(g2), 1e-30)


def finite_diff_grad(loss_fn, params, sequence=None, eps=FD_EPS):
    """中心有限差分梯度

    每个标量参数使用相对步长 h = ε·max(1, |w|)，梯度为 (L(w+h) - L(w-h)) / 2h。

    Args:
        loss_fn: 损失函数，sequence 为 None 时调用 loss_fn(params)，否则 loss_fn(params, sequence)
        params: 参数字典、数组或标量
        sequence: 可选的输入序列
        eps: 相对步长

    Returns:
        与 params 结构相同的梯度
    """
    if eps <= 0:
        raise ValidationError(f"有限差分步长必须为正: {eps}")

    def evaluate(p):
        value = loss_fn(p) if sequence is None else loss_fn(p, sequence)
        value = float(value)
        if not np.isfinite(value):
            raise NumericError("有限差分中损失出现非有限数值")
        return value

    if isinstance(params, dict):
        work = {key: np.array(val, dtype=np.float64) for key, val in params.items()}
        grads = {}
        for key in work:
            arr = work[key]
            grad = np.zeros_like(arr)
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                h = eps * max(1.0, abs(orig))
                flat[idx] = orig + h
                plus = evaluate(work)
                flat[idx] = orig - h
                minus = evaluate(work)
                flat[idx] = orig
                gflat[idx] = (plus - minus) / (2.0 * h)
            grads[key] = grad
        return grads

    scalar = np.ndim(params) == 0
    arr = np.array(params, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(arr)
    shape = np.shape(params)
    for idx in range(arr.size):
        orig = arr[idx]
        h = eps * max(1.0, abs(orig))
        arr[idx] = orig + h
        plus = evaluate(float(arr[0]) if scalar else arr.reshape(shape).copy())
        arr[idx] = orig - h
        minus = evaluate(float(arr[0]) if scalar else arr.reshape(shape).copy())
        arr[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * h)
    return float(grad[0]) if scalar else grad.reshape(shape)


def model_finite_diff(model, patches, psi=None, eps=FD_EPS, keys=None):
    """模型全部（或指定）参数的有限差分梯度

    扰动非对角元素需要关闭 diagonal_gates 约束。
    """
    base = model.with_params({}, diagonal_gates=False)
    params = base.params()
    if keys is not None:
        params = {key: params[key] for key in keys}

    def loss_fn(p):
        return model_loss(base.with_params(p), patches, psi)

    return finite_diff_grad(loss_fn, params, eps=eps)


def rgc_dense_jacobian(state_prev, x, w, cache=None):
    """RGC 单步映射 (s, m) → (s', m') 的完整雅可比，形状 (2n, 2n)

    ∂s'/∂s = diag(b⁰) + diag(s ⊙ f'(b⁰)) W⁰    ∂s'/∂m = -diag(x ⊙ f'(a⁰)) W¹
    ∂m'/∂s = -diag(x ⊙ f'(a¹)) W³              ∂m'/∂m = diag(b¹) + diag(m ⊙ f'(b¹)) W²
    """
    if cache is None:
        cache = rgc_gates(state_prev, x, w)
    _, df = GATE_ACTIVATIONS[w.activation]
    a0, a1 = cache.a
    b0, b1 = cache.b
    s, m, xv = cache.s_prev, cache.m_prev, cache.x
    w0, w1, w2, w3 = w.w
    j_ss = np.diag(b0) + (s * df(b0))[:, None] * w0
    j_sm = (-xv * df(a0))[:, None] * w1
    j_ms = (-xv * df(a1))[:, None] * w3
    j_mm = np.diag(b1) + (m * df(b1))[:, None] * w2
    return np.block([[j_ss, j_sm], [j_ms, j_mm]])


def rgc_immediate_sensitivity(state_prev, x, w, cache=None):
    """即时参数敏感度 R(t)，形状 (2n, 4, n, n)

    W^(k)_pq 只直接影响单元 p 的第 k//2 个状态分量。
    """
    if cache is None:
        cache = rgc_gates(state_prev, x, w)
    n = w.n
    j0, j1 = rgc_source_terms(state_prev, x, w, cache)
    sources = (j0, j1)
    r = np.zeros((2 * n, 4, n, n))
    idx = np.arange(n)
    for k in range(4):
        nu = k // 2
        r[nu * n + idx, k, idx, :] = sources[k % 2][nu]
    return r


def check_rgc_jacobian(w, state_prev, x, eps=1e-6):
    """用一步映射的有限差分检验解析雅可比

    Returns:
        float: 解析与数值雅可比的相对误差
    """
    n = w.n
    analytic = rgc_dense_jacobian(state_prev, x, w)
    z0 = np.concatenate([state_prev.s, state_prev.m])
    numeric = np.zeros((2 * n, 2 * n))
    for j in range(2 * n):
        h = eps * max(1.0, abs(z0[j]))
        zp = z0.copy()
        zm = z0.copy()
        zp[j] += h
        zm[j] -= h
        sp, _ = rgc_step(RgcState(zp[:n], zp[n:]), x, w)
        sm, _ = rgc_step(RgcState(zm[:n], zm[n:]), x, w)
        numeric[:, j] = (np.concatenate([sp.s, sp.m]) - np.concatenate([sm.s, sm.m])) / (2.0 * h)
    return rel_error(analytic, numeric)


def rtrl_slice(gamma):
    """从完整张量中取出 i = p 切片，对应折叠的 Γ^(ν,k)，形状 (2, 4, n, n)"""
    n = gamma.shape[-1]
    idx = np.arange(n)
    out = np.zeros((2, 4, n, n))
    for nu in range(2):
        out[nu] = np.transpose(gamma[nu * n + idx, :, idx, :], (1, 0, 2))
    return out


def _off_slice_mask(n):
    mask = np.ones((2 * n, 4, n, n), dtype=bool)
    idx = np.arange(n)
    for nu in range(2):
        mask[nu * n + idx, :, idx, :] = False
    return mask


@dataclass
class GradResult:
    """一种方法得到的梯度"""
    grads: dict
    losses: np.ndarray
    value: float
    memory_reals: int
    extras: dict = field(default_factory=dict)


def full_rtrl_grad(model, patches, psi=None, keep_history=False):
    """完整 RTRL 梯度

    维护完整张量 γ_{i,(k,p,q)} = ∂c_i(t)/∂W^(k)_pq，递推 γ(t) = J(t)γ(t-1) + R(t)，
    其中 J(t) 为单步映射的稠密雅可比。

    Args:
        model: JepaModel
        patches: 图像块序列
        psi: 损失聚合设置
        keep_history: 是否保存每一步的张量

    Returns:
        GradResult: extras 含 gamma（最终张量）、max_off_slice、可选的 history
    """
    n = model.n
    if n > RTRL_MAX_N:
        raise CapacityError(f"完整 RTRL 需要 8n³ 存储，n={n} 超过上限 {RTRL_MAX_N}")

    enc = encode_sequence(model, patches)
    readout = readout_backward(model, enc, psi)
    w = model.rgc

    gamma = np.zeros((2 * n, 4, n, n))
    mask = _off_slice_mask(n)
    grad = np.zeros((4, n, n))
    max_off = 0.0
    history = []
    for t in range(1, enc.T + 1):
        cache = enc.caches[t - 1]
        prev = RgcState(enc.s[t - 1], enc.m[t - 1])
        jac = rgc_dense_jacobian(prev, enc.x[t - 1], w, cache)
        r = rgc_immediate_sensitivity(prev, enc.x[t - 1], w, cache)
        gamma = (jac @ gamma.reshape(2 * n, -1)).reshape(gamma.shape) + r
        max_off = max(max_off, float(np.max(np.abs(gamma[mask]), initial=0.0)))
        grad += np.tensordot(readout.d_s[t], gamma[:n], axes=(0, 0))
        if keep_history:
            history.append(gamma.copy())

    grads = {key: grad[k] for k, key in enumerate(RGC_KEYS)}
    grads.update(readout.grads)
    extras = {"gamma": gamma, "max_off_slice": max_off}
    if keep_history:
        extras["history"] = history
    return GradResult(grads, readout.losses, readout.value, int(gamma.size), extras)


def rgc_adjoint_sweep(w, enc, d_s):
    """RGC 的反向伴随扫描

    Args:
        w: RgcWeights
        enc: EncodedSequence
        d_s: 损失对 s(t) 的直接导数，形状 (T+1, n)

    Returns:
        np.ndarray: 四个权重块的梯度 (4, n, n)
    """
    _, df = GATE_ACTIVATIONS[w.activation]
    w0, w1, w2, w3 = w.w
    n = w.n
    grad = np.zeros((4, n, n))
    gs = np.zeros(n)
    gm = np.zeros(n)
    for t in range(enc.T, 0, -1):
        gs = gs + d_s[t]
        cache = enc.caches[t - 1]
        a0, a1 = cache.a
        b0, b1 = cache.b
        s_prev, m_prev, x = cache.s_prev, cache.m_prev, cache.x

        pa0 = -gs * x * df(a0)
        pb0 = gs * s_prev * df(b0)
        pa1 = -gm * x * df(a1)
        pb1 = gm * m_prev * df(b1)

        grad[0] += np.outer(pb0, s_prev)
        grad[1] += np.outer(pa0, m_prev)
        grad[2] += np.outer(pb1, m_prev)
        grad[3] += np.outer(pa1, s_prev)

        gs, gm = (gs * b0 + w0.T @ pb0 + w3.T @ pa1,
                  gm * b1 + w1.T @ pa0 + w2.T @ pb1)
    return grad


def bptt_grad(model, patches, psi=None, fixed_targets=None):
    """BPTT 梯度：保存完整轨迹，空间反传后反向扫描

    停止梯度时目标分支不产生伴随。

    Args:
        model: JepaModel
        patches: 图像块序列
        psi: 损失聚合设置
        fixed_targets: 可选的常数目标

    Returns:
        GradResult: 全部可训练参数的梯度
    """
    enc = encode_sequence(model, patches)
    readout = readout_backward(model, enc, psi, fixed_targets)
    rgc = rgc_adjoint_sweep(model.rgc, enc, readout.d_s)
    grads = {key: rgc[k] for k, key in enumerate(RGC_KEYS)}
    grads.update(readout.grads)
    return GradResult(grads, readout.losses, readout.value, enc.memory_reals, {"encoded": enc})


# ---------------------------------------------------------------------------
# 单层时间衰减单元：二次读出损失 L = ½ Σ_t ‖c(t) - y(t)‖²
# ---------------------------------------------------------------------------

def time_decay_rollout(tau, p_map, inputs):
    """展开 c(t) = τ c(t-1) + P u(t)，返回 (T, n)"""
    cell = TimeDecayCell(tau, p_map)
    c = np.zeros(cell.p_map.shape[0])
    out = []
    for u in np.asarray(inputs, dtype=np.float64):
        c, _ = cell.step(c, u)
        out.append(c)
    return np.array(out)


def time_decay_loss(tau, p_map, inputs, targets):
    c = time_decay_rollout(tau, p_map, inputs)
    diff = c - np.asarray(targets, dtype=np.float64)
    return 0.5 * float(np.sum(diff * diff))


def time_decay_bptt_grad(tau, p_map, inputs, targets):
    """时间衰减单元对 P 的 BPTT 梯度"""
    inputs = np.asarray(inputs, dtype=np.float64)
    c = time_decay_rollout(tau, p_map, inputs)
    err = c - np.asarray(targets, dtype=np.float64)
    grad = np.zeros(np.shape(p_map))
    g = np.zeros(c.shape[1])
    for t in range(len(inputs) - 1, -1, -1):
        g = g + err[t]
        grad += np.outer(g, inputs[t])
        g = tau * g
    return grad


def time_decay_rfp_grad(tau, p_map, inputs, targets):
    """时间衰减单元对 P 的两点交互前向梯度

    J_ii = τ，R̂_ij(t) = u_j(t)。
    """
    cell = TimeDecayCell(tau, p_map)
    targets = np.asarray(targets, dtype=np.float64)
    rows, cols = cell.p_map.shape
    sens = generic_init(rows, cols)
    c = np.zeros(rows)
    grad = np.zeros((rows, cols))
    for t, u in enumerate(np.asarray(inputs, dtype=np.float64)):
        c, cache = cell.step(c, u)
        sens = generic_two_point_update(sens, cell.diag_jacobian(cache), cell.local_sensitivity(cache))
        grad += generic_assemble(c - targets[t], sens)
    return grad


# ---------------------------------------------------------------------------
# 梯度报告
# ---------------------------------------------------------------------------

class GradientReport:
    """梯度比较报告

    每次比较按参数块记录相对误差，导出时按 (方法对, 块, n, T, seed) 汇总最大值与平均值。
    """

    def __init__(self):
        self.records = []
        self.methods = []

    def compare(self, method_a, grads_a, method_b, grads_b, n, T, seed):
        """比较两种方法的梯度字典（只比较共同的块）"""
        for block in sorted(set(grads_a) & set(grads_b)):
            ga = np.asarray(grads_a[block])
            gb = np.asarray(grads_b[block])
            self.records.append({
                "method_a": method_a,
                "method_b": method_b,
                "block": block,
                "rel_err": rel_error(ga, gb),
                "tiny": max(frobenius(ga), frobenius(gb)) < TINY_NORM,
                "n": n,
                "T": T,
                "seed": seed,
            })

    def record_method(self, method, wall_ms, memory_reals):
        """记录一种方法的耗时与状态存储"""
        self.methods.append({"method": method, "wall_ms": float(wall_ms), "memory_reals": int(memory_reals)})

    def max_error(self, method_a, method_b, blocks=None):
        """指定方法对的最大相对误差（忽略两侧都极小的块）"""
        errors = [
            r["rel_err"] for r in self.records
            if r["method_a"] == method_a and r["method_b"] == method_b and not r["tiny"]
            and (blocks is None or r["block"] in blocks)
        ]
        return max(errors) if errors else 0.0

    def to_dataframe(self):
        if not self.records:
            return pd.DataFrame(columns=REPORT_COLUMNS)
        df = pd.DataFrame(self.records)
        grouped = df.groupby(["method_a", "method_b", "block", "n", "T", "seed"], sort=False)["rel_err"]
        out = grouped.agg(rel_err_max="max", rel_err_mean="mean").reset_index()
        return out[REPORT_COLUMNS]

    def method_dataframe(self):
        return pd.DataFrame(self.methods, columns=["method", "wall_ms", "memory_reals"])

    def to_csv(self, path):
        self.to_dataframe().to_csv(path, index=False)
        logger.info(f"梯度报告已写入 {path}")


def timed(fn, *args, **kwargs):
    """执行函数并返回 (结果, 毫秒)"""
    start = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, (time.perf_counter() - start) * 1000.0


def as_block_dict(grad):
    """(4, n, n) 数组转为以 W0..W3 为键的字典"""
    grad = np.asarray(grad)
    if grad.ndim != 3 or grad.shape[0] != 4:
        raise ShapeError(f"RGC 梯度形状应为 (4, n, n)，实际 {grad.shape}")
    return {key: grad[k] for k, key in enumerate(RGC_KEYS)}
