#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
训练模块，BPTT（离线）与 RFP（在线、只做前向）两种训练方式，以及线性测试平台的学习动力学
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from analysis import covariance_spectrum
from cells import RgcState, rgc_factors, rgc_step
from jepa import (RGC_KEYS, LinearPredictor, balance_residual, encode_sequence, jepa_loss_grads,
                  make_aggregator, prediction_step, rollout_testbed, scaled_h_matrix,
                  testbed_closed_form_grads, testbed_loss, testbed_moments, y_proxy)
from oracles import GradResult, bptt_grad
from numerics import Rng
from rfp import assemble_gradient, rfp_init, rfp_update
from utils.errors import DivergenceError, NumericError, ValidationError
from utils.logger import setup_logger

logger = setup_logger("trainer", logging.INFO)

MODES = ("bptt", "rfp")
CADENCES = ("per-sequence", "per-step")
METRIC_COLUMNS = ["epoch", "t", "mean_loss", "balance_residual", "participation_ratio", "wall_ms"]
# 损失曲线形状判据的前段与后段时刻窗口（含端点）
EARLY_WINDOW = (1, 5)
LATE_WINDOW = (80, 100)


@dataclass(frozen=True)
class TrainConfig:
    """训练配置"""
    mode: str = "bptt"
    learning_rate: float = 0.05
    weight_decay: float = 0.0
    epochs: int = 6
    batch_size: int = 1
    cadence: str = "per-sequence"
    loss_kind: str = "squared"
    stop_gradient: bool = True
    seed: int = 0
    psi: str = "mean"
    divergence_threshold: float = 1e6
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"未知的训练模式: {self.mode}")
        if self.cadence not in CADENCES:
            raise ValidationError(f"未知的更新节奏: {self.cadence}")
        if self.learning_rate < 0:
            raise ValidationError(f"学习率不能为负: {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValidationError(f"权重衰减不能为负: {self.weight_decay}")
        if self.epochs < 1:
            raise ValidationError(f"训练轮数必须 ≥ 1: {self.epochs}")
        if self.batch_size < 1 or self.threads < 1:
            raise ValidationError("batch_size 与 threads 必须 ≥ 1")


@dataclass
class TrainMetrics:
    """训练指标，第 0 项为训练前的评估"""
    epoch_losses: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    balance: list = field(default_factory=list)
    participation: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    train_losses: list = field(default_factory=list)
    state_memory_reals: int = 0

    def record(self, evaluation, wall_ms, train_loss=float("nan")):
        self.epoch_losses.append(evaluation.mean_loss)
        self.curves.append(evaluation.curve)
        self.balance.append(evaluation.balance_residual)
        self.participation.append(evaluation.participation_ratio)
        self.wall_ms.append(wall_ms)
        self.train_losses.append(train_loss)

    def to_dataframe(self):
        """逐 (epoch, t) 的损失曲线表"""
        rows = []
        for epoch, curve in enumerate(self.curves):
            for t, value in enumerate(curve, start=1):
                rows.append({
                    "epoch": epoch,
                    "t": t,
                    "mean_loss": float(value),
                    "balance_residual": self.balance[epoch],
                    "participation_ratio": self.participation[epoch],
                    "wall_ms": self.wall_ms[epoch],
                })
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)

    def drop_ratio(self, early=EARLY_WINDOW, late=LATE_WINDOW):
        """末轮曲线后段相对前段的下降比例"""
        return loss_shape_ratio(self.curves[-1], early, late)

    def initial_flatness(self, early=EARLY_WINDOW, late=LATE_WINDOW):
        """第 0 轮曲线前后两段平均损失的相对差"""
        return abs(loss_shape_ratio(self.curves[0], early, late))


def _window(curve, window):
    steps = len(curve)
    lo = min(window[0], steps)
    return curve[lo - 1:min(window[1], steps)]


def loss_shape_ratio(curve, early=EARLY_WINDOW, late=LATE_WINDOW):
    """后段平均损失相对前段的下降比例 1 - mean(L[late]) / mean(L[early])

    时刻按 1 起计，窗口截断到曲线长度。
    """
    curve = np.asarray(curve, dtype=np.float64)
    early_mean = float(np.mean(_window(curve, early)))
    if early_mean == 0.0:
        return 0.0
    return 1.0 - float(np.mean(_window(curve, late))) / early_mean


@dataclass
class EvalResult:
    """评估结果，curve 为 L(1..T-1) 在各序列上的平均"""
    curve: np.ndarray
    mean_loss: float
    h: np.ndarray
    participation_ratio: float
    balance_residual: float


def aggregate_loss(per_step_losses, psi="mean"):
    """损失聚合 E = Σ_t ψ(t, L(t))

    Args:
        per_step_losses: L(1..T-1)
        psi: "mean" | "final" | "linear" | (ψ, ∂ψ/∂L)

    Returns:
        tuple: (E, 每一步的 ∂ψ/∂L)
    """
    agg = make_aggregator(psi)
    losses = np.asarray(per_step_losses, dtype=np.float64)
    return agg.value(losses), agg.weights(losses)


def sgd_step(params, grads, lr, eta, diagonal_keys=()):
    """带权重衰减的 SGD：W ← W - lr·(grad + η·W)

    diagonal_keys 中的参数只保留梯度的对角部分。
    """
    new = {}
    for key, value in params.items():
        grad = grads.get(key)
        if grad is None:
            new[key] = value
            continue
        if key in diagonal_keys:
            grad = np.diag(np.diag(grad))
        new[key] = value - lr * (grad + eta * value)
    return new


def check_divergence(losses, threshold, epoch=None):
    """损失超过阈值或出现非有限值时抛出 DivergenceError"""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        return
    worst = float(np.max(np.abs(losses))) if np.all(np.isfinite(losses)) else float("nan")
    if not np.isfinite(worst) or worst > threshold:
        raise DivergenceError(f"训练发散，第 {epoch} 轮损失 {worst}", epoch=epoch, loss=worst)


def _sequence_eval(model, patches):
    enc = encode_sequence(model, patches)
    losses = np.array([
        jepa_loss_grads(enc.h[t + 1], model.predictor.forward(enc.h[t])[0], model.loss_kind, model.lambda1)[0]
        for t in range(enc.T - 1)
    ])
    return losses, enc.h


def evaluate(model, dataset, threads=1):
    """评估：逐步损失曲线、表示谱的参与率与（线性预测器时的）平衡残差

    Returns:
        EvalResult: 评估结果
    """
    sequences = list(dataset)
    if threads > 1 and len(sequences) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda seq: _sequence_eval(model, seq), sequences))
    else:
        results = [_sequence_eval(model, seq) for seq in sequences]

    curve = np.mean([losses for losses, _ in results], axis=0)
    h_all = np.concatenate([h for _, h in results]).T
    try:
        pr = covariance_spectrum(h_all).participation_ratio
    except NumericError:
        pr = float("nan")

    if isinstance(model.predictor, LinearPredictor):
        prev = np.concatenate([h[:-1] for _, h in results])
        h_scaled = prev.T / np.sqrt(prev.shape[0])
        residual = balance_residual(model.predictor.w_gh, h_scaled, model.lambda1)
    else:
        residual = float("nan")
    return EvalResult(curve, float(np.mean(curve)), h_all, pr, residual)


def _zero_grads(model):
    return {key: np.zeros_like(value) for key, value in model.params().items()}


def rfp_pass(model, patches, psi="mean", update=None, counter=None):
    """RFP 前向遍历一个序列

    只保存当前状态与敏感度。L(t) 的预测分支用 Γ(t)（推进前）组装，
    关闭停止梯度时目标分支在推进后用 Γ(t+1) 组装。

    Args:
        model: JepaModel
        patches: 图像块序列
        psi: 损失聚合设置
        update: 可选的在线更新函数 update(model, grads) -> model，每个损失项后调用
        counter: 可选的 OpCounter

    Returns:
        tuple: (模型, GradResult)，在线更新时梯度为最后一次更新后的剩余累积
    """
    agg = make_aggregator(psi)
    x = model.featurize(patches)
    T = x.shape[0]
    if T < 2:
        raise ValidationError(f"序列长度 {T} 不足以做下一步预测")
    steps = T - 1
    n = model.n

    state = RgcState.zeros(n)
    sens = rfp_init(n)
    grads = _zero_grads(model)
    losses = []
    for t in range(1, T + 1):
        new_state, cache = rgc_step(state, x[t - 1], model.rgc)
        factors = rgc_factors(state, x[t - 1], model.rgc, t, cache)
        new_sens = rfp_update(sens, factors.mu0, factors.mu1, factors.j0, factors.j1, t=t, counter=counter)

        if t >= 2:
            step = prediction_step(model, state.s, new_state.s)
            losses.append(step.loss)
            weight = agg.step_weight(t - 1, step.loss, steps)
            if weight != 0.0:
                rgc_grad = assemble_gradient(weight * step.d_s_pred, sens)
                if not model.stop_gradient:
                    rgc_grad = rgc_grad + assemble_gradient(weight * step.d_s_target, new_sens)
                for k, key in enumerate(RGC_KEYS):
                    grads[key] += rgc_grad[k]
                for key, g in step.grads.items():
                    grads[key] += weight * g
            if update is not None:
                model = update(model, grads)
                grads = _zero_grads(model)

        state, sens = new_state, new_sens

    losses = np.array(losses)
    memory = sens.memory_reals + state.s.size + state.m.size
    return model, GradResult(grads, losses, agg.value(losses), int(memory))


def rfp_sequence_grad(model, patches, psi="mean", counter=None):
    """RFP 对一个序列的累积梯度（不更新参数）"""
    _, result = rfp_pass(model, patches, psi, counter=counter)
    return result


class Trainer:
    """R-JEPA 训练器"""

    def __init__(self, config):
        """初始化训练器

        Args:
            config: TrainConfig
        """
        self.config = config
        self.logger = setup_logger("trainer", logging.INFO)
        self.logger.info(f"初始化训练器: 模式={config.mode}, 学习率={config.learning_rate}, "
                         f"权重衰减={config.weight_decay}, 轮数={config.epochs}, 节奏={config.cadence}")
        self.rng = Rng(config.seed, (101,))
        self.agg = make_aggregator(config.psi)

    def _apply(self, model, grads, scale=1.0):
        cfg = self.config
        diagonal_keys = RGC_KEYS if model.rgc.diagonal_gates else ()
        scaled = {key: g * scale for key, g in grads.items()}
        params = sgd_step(model.params(), scaled, cfg.learning_rate, cfg.weight_decay, diagonal_keys)
        return model.with_params(params)

    def _sequence_grad(self, model, patches):
        if self.config.mode == "bptt":
            return bptt_grad(model, patches, self.agg)
        return rfp_sequence_grad(model, patches, self.agg)

    def _batch_grads(self, model, batch):
        if self.config.threads > 1 and len(batch) > 1:
            with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
                return list(pool.map(lambda seq: self._sequence_grad(model, seq), batch))
        return [self._sequence_grad(model, seq) for seq in batch]

    def _online_epoch(self, model, sequences, epoch):
        """逐步更新：每个损失项之后立即更新参数"""
        losses = []
        memory = 0
        threshold = self.config.divergence_threshold

        def update(current, grads):
            return self._apply(current, grads)

        for seq in sequences:
            model, result = rfp_pass(model, seq, self.agg, update=update)
            check_divergence(result.losses, threshold, epoch)
            losses.append(float(np.mean(result.losses)))
            memory = max(memory, result.memory_reals)
        return model, losses, memory

    def _batch_epoch(self, model, sequences, epoch):
        losses = []
        memory = 0
        size = self.config.batch_size
        for start in range(0, len(sequences), size):
            batch = sequences[start:start + size]
            results = self._batch_grads(model, batch)
            total = _zero_grads(model)
            # 固定顺序归约
            for result in results:
                check_divergence(result.losses, self.config.divergence_threshold, epoch)
                for key, g in result.grads.items():
                    total[key] += g
                losses.append(float(np.mean(result.losses)))
                memory = max(memory, result.memory_reals)
            model = self._apply(model, total, 1.0 / len(batch))
        return model, losses, memory

    def fit(self, model, dataset, test_dataset=None):
        """训练模型

        Args:
            model: JepaModel
            dataset: 训练集 SequenceDataset
            test_dataset: 评估集，缺省时使用训练集

        Returns:
            tuple: (训练后的模型, TrainMetrics)
        """
        cfg = self.config
        if dataset.T < 2:
            raise ValidationError(f"数据集序列长度 T={dataset.T} 小于 2")
        model = replace(model, loss_kind=cfg.loss_kind, stop_gradient=cfg.stop_gradient)
        eval_set = test_dataset if test_dataset is not None else dataset
        if cfg.mode == "rfp" and not model.rgc.diagonal_gates:
            self.logger.warning("RGC 使用稠密门控，RFP 梯度只是近似值")

        metrics = TrainMetrics()
        start = time.perf_counter()
        evaluation = evaluate(model, eval_set, cfg.threads)
        metrics.record(evaluation, (time.perf_counter() - start) * 1000.0)
        self.logger.info(f"第 0 轮评估: 平均损失 {evaluation.mean_loss:.6f}, 参与率 {evaluation.participation_ratio:.2f}")

        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            order = self.rng.generator.permutation(dataset.count)
            sequences = [dataset.sequence(int(i)) for i in order]
            try:
                if cfg.mode == "rfp" and cfg.cadence == "per-step":
                    model, losses, memory = self._online_epoch(model, sequences, epoch)
                else:
                    model, losses, memory = self._batch_epoch(model, sequences, epoch)
            except DivergenceError as e:
                self.logger.error(f"第 {epoch} 轮训练发散: {str(e)}", exc_info=True)
                raise
            metrics.state_memory_reals = max(metrics.state_memory_reals, memory)

            evaluation = evaluate(model, eval_set, cfg.threads)
            wall = (time.perf_counter() - start) * 1000.0
            train_loss = float(np.mean(losses)) if losses else float("nan")
            metrics.record(evaluation, wall, train_loss)
            self.logger.info(f"第 {epoch} 轮完成: 训练损失 {train_loss:.6f}, 评估损失 {evaluation.mean_loss:.6f}, "
                             f"参与率 {evaluation.participation_ratio:.2f}, 平衡残差 {evaluation.balance_residual:.4f}, "
                             f"耗时 {wall:.0f} ms")
        return model, metrics


def train_bptt(model, dataset, config, test_dataset=None):
    """以 BPTT 训练模型"""
    return Trainer(replace(config, mode="bptt")).fit(model, dataset, test_dataset)


def train_rfp(model, dataset, config, test_dataset=None):
    """以 RFP 训练模型"""
    return Trainer(replace(config, mode="rfp")).fit(model, dataset, test_dataset)


# ---------------------------------------------------------------------------
# 线性测试平台
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestbedConfig:
    """测试平台学习动力学配置

    encoder_lr 为表示的更新步长，缺省等于 learning_rate；为 0 时编码器冻结。
    lag_preconditioner 为真时表示更新乘以 (h(t-1)h(t-1)ᵀ + I)。
    """
    learning_rate: float = 0.2
    iterations: int = 3000
    encoder_lr: float = None
    lag_preconditioner: bool = False
    divergence_threshold: float = 1e6
    log_every: int = 100

    def __post_init__(self):
        if self.learning_rate < 0 or (self.encoder_lr is not None and self.encoder_lr < 0):
            raise ValidationError("学习率不能为负")
        if self.iterations < 1:
            raise ValidationError(f"迭代次数必须 ≥ 1: {self.iterations}")


@dataclass
class TestbedTraces:
    """测试平台训练轨迹与最终表示"""
    table: pd.DataFrame
    rollout: object

    @property
    def final_residual(self):
        return float(self.table["balance_residual"].iloc[-1])

    def rise_after(self, transient=0.2):
        """过渡段之后残差相对此前最小值的最大回升，单调不增时为 0

        Args:
            transient: 视为初始过渡段的迭代比例

        Returns:
            float: 最大回升量
        """
        residuals = self.table["balance_residual"].to_numpy()
        tail = residuals[int(np.ceil(transient * (len(residuals) - 1))):]
        if tail.size < 2:
            return 0.0
        return float(np.max(tail - np.minimum.accumulate(tail)))


def _encoder_step(tb, rollout, lr, lag_preconditioner):
    """表示的有效更新 h(t) ← h(t) - lr·(-W_Ghᵀ r(t) + η h(t))，目标 h(t+1) 不接收梯度"""
    ga_a = tb.w_ga @ tb.w_a
    new_h = []
    for h, low in zip(rollout.h, rollout.c_low):
        prev = h[:-1]
        r = h[1:] - prev @ tb.w_gh.T - low[:-1] @ ga_a.T
        grad = -(r @ tb.w_gh) + tb.eta * prev
        if lag_preconditioner:
            lagged = np.vstack([np.zeros((1, h.shape[1])), prev[:-1]])
            grad = grad + lagged * np.sum(lagged * grad, axis=1, keepdims=True)
        updated = h.copy()
        updated[:-1] = prev - lr * grad
        new_h.append(updated)
    rollout.h = new_h


class TestbedTrainer:
    """线性测试平台的梯度下降（带权重衰减）"""

    def __init__(self, config):
        """初始化测试平台训练器

        Args:
            config: TestbedConfig
        """
        self.config = config
        self.logger = setup_logger("testbed", logging.INFO)
        self.encoder_lr = config.learning_rate if config.encoder_lr is None else config.encoder_lr

    def _record(self, tb, rollout, it):
        loss = testbed_loss(tb, rollout)
        residual = balance_residual(tb.w_gh, scaled_h_matrix(rollout), tb.lambda1)
        log_now = it % self.config.log_every == 0 or it == self.config.iterations
        row = {
            "iteration": it,
            "loss": loss,
            "balance_residual": residual,
            "y_proxy": y_proxy(tb, rollout) if log_now else float("nan"),
            "w_gh_norm": float(np.linalg.norm(tb.w_gh)),
        }
        try:
            check_divergence([loss], self.config.divergence_threshold, it)
        except DivergenceError as e:
            self.logger.error(f"测试平台在第 {it} 次迭代发散: {str(e)}", exc_info=True)
            raise
        if log_now:
            self.logger.info(f"迭代 {it}: 损失 {loss:.6e}, 平衡残差 {residual:.4f}")
        return row

    def _step(self, tb, rollout):
        """一次迭代：估计二阶矩，闭式梯度更新 W_Gh 与 W_Ga，并按停止梯度的有效动力学更新表示"""
        lr = self.config.learning_rate
        moments = testbed_moments(rollout)
        d_gh, d_ga = testbed_closed_form_grads(tb, moments)
        if self.encoder_lr > 0:
            _encoder_step(tb, rollout, self.encoder_lr, self.config.lag_preconditioner)
        return replace(tb,
                       w_gh=tb.w_gh - lr * (d_gh + tb.eta * tb.w_gh),
                       w_ga=tb.w_ga - lr * (d_ga + tb.eta * tb.w_ga))

    def fit(self, tb, dataset):
        """训练测试平台

        Args:
            tb: LinearTestbed
            dataset: 输入序列（SequenceDataset 或可迭代的数组）

        Returns:
            tuple: (训练后的 LinearTestbed, TestbedTraces)
        """
        cfg = self.config
        self.logger.info(f"开始训练线性测试平台: 迭代 {cfg.iterations}, 学习率 {cfg.learning_rate}, η={tb.eta}")
        rollout = rollout_testbed(tb, dataset)
        rows = []
        for it in range(cfg.iterations + 1):
            rows.append(self._record(tb, rollout, it))
            if it < cfg.iterations:
                tb = self._step(tb, rollout)
        self.logger.info(f"线性测试平台训练完成，最终平衡残差 {rows[-1]['balance_residual']:.4f}")
        return tb, TestbedTraces(pd.DataFrame(rows), rollout)


def train_testbed(tb, dataset, config):
    """以 TestbedTrainer 训练线性测试平台，返回 (LinearTestbed, TestbedTraces)"""
    return TestbedTrainer(config).fit(tb, dataset)


def balance_gap(tb, rollout):
    """W_GhᵀW_Gh - λ₁HHᵀ，梯度流下以 2η 的速率衰减"""
    h_scaled = scaled_h_matrix(rollout)
    return tb.w_gh.T @ tb.w_gh - tb.lambda1 * (h_scaled @ h_scaled.T)


def state_memory(mode, n, T):
    """两种训练方式保存的状态实数个数（RFP 与 T 无关，BPTT 随 T 线性增长）"""
    if mode == "rfp":
        return 8 * n * n + 2 * n
    # s、m 轨迹 (T+1)·2n，加上每步门控缓存 a、b、s_prev、m_prev、x 共 7n
    return (T + 1) * 2 * n + T * 7 * n


__all__ = [
    "TrainConfig", "TrainMetrics", "EvalResult", "Trainer", "TestbedConfig", "TestbedTraces", "TestbedTrainer",
    "aggregate_loss", "loss_shape_ratio", "sgd_step", "check_divergence", "evaluate", "rfp_pass", "rfp_sequence_grad",
    "train_bptt", "train_rfp", "train_testbed", "balance_gap", "state_memory",
]
