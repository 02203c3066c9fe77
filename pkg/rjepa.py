#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
命令行入口：梯度校验、训练、平衡与坍缩诊断、四阶矩验证、复杂度基准与数据生成
"""
import argparse
import functools
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import pandas as pd

from analysis import (moment_closed_form, moment_monte_carlo, scaling_bench, tau_scaling_check)
from cells import RgcState, RgcWeights, rgc_factors
from config import Config
from jepa import RGC_KEYS, build_model, encode_sequence, make_featurizer, make_testbed, save_checkpoint
from numerics import Rng
from oracles import (RTRL_MAX_N, GradientReport, bptt_grad, check_rgc_jacobian, full_rtrl_grad,
                     model_finite_diff, rtrl_slice, time_decay_bptt_grad, time_decay_loss,
                     time_decay_rfp_grad, finite_diff_grad, timed)
from rfp import RfpRun, rfp_init
from sequence_data import (ScanpathParams, gen_latent_sequences, gen_scanpath_sequences,
                           make_latent_params, make_splits, read_dataset, split_counts,
                           variance_drift_ratio, write_dataset)
from trainer import (LATE_WINDOW, TestbedConfig, TrainConfig, Trainer,
                     rfp_sequence_grad, train_testbed)
from utils.errors import (ConfigError, DivergenceError, FormatError, NumericError, RjepaError,
                          ToleranceError, ValidationError)
from utils.logger import set_log_dir, setup_logger

logger = setup_logger("rjepa", logging.INFO)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_TOLERANCE = 4

# 梯度校验使用的小规模图像块维度
GRADCHECK_PATCH_DIM = 6

# train 小节中只用于结果判据、不传给 TrainConfig 的键
CURVE_KEYS = ("min_drop", "flat_tolerance")


def positive_int(value):
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"必须是正整数: {value}")
    return number


def non_negative_float(value):
    number = float(value)
    if number < 0:
        raise argparse.ArgumentTypeError(f"不能为负: {value}")
    return number


# ---------------------------------------------------------------------------
# 数据与模型构造
# ---------------------------------------------------------------------------

def _generator_fn(data_cfg, threads, seed_rng):
    """按 data 小节返回生成函数 generate(count=, split=)"""
    patch_shape = tuple(data_cfg["patch_shape"])
    if data_cfg["generator"] == "latent":
        params = make_latent_params(patch_shape, data_cfg["latent_dim"], seed_rng.generator,
                                    data_cfg["tau_low"], data_cfg["tau_high"],
                                    data_cfg["offset"], data_cfg["observation_noise"])
        return functools.partial(gen_latent_sequences, params, T=data_cfg["T"], seed=data_cfg["seed"],
                                 burn_in=data_cfg["burn_in"], threads=threads)
    if data_cfg["generator"] == "scanpath":
        if len(patch_shape) != 3 or patch_shape[0] != patch_shape[1]:
            raise ConfigError(f"扫描路径图像块必须是方形 (size, size, channels)，实际 {patch_shape}",
                              "data.patch_shape")
        image_params = ScanpathParams(image_size=data_cfg["image_size"], blob_count=data_cfg["blob_count"],
                                      channels=patch_shape[2], step_scale=data_cfg["step_scale"],
                                      saccade_prob=data_cfg["saccade_prob"])
        return functools.partial(gen_scanpath_sequences, image_params, T=data_cfg["T"],
                                 patch_size=patch_shape[0], seed=data_cfg["seed"], threads=threads)
    raise ConfigError(f"未知的数据生成器: {data_cfg['generator']}", "data.generator")


def load_datasets(cfg, **data_changes):
    """读取或生成训练集与测试集

    Args:
        cfg: Config
        **data_changes: 覆盖 data 小节中的生成参数（读取已有文件时不起作用）

    Returns:
        tuple: (训练集, 测试集)
    """
    data_cfg = cfg.get("data")
    data_cfg.update(data_changes)
    threads = cfg.get("runtime", "threads")
    if data_cfg["train_path"]:
        train = read_dataset(data_cfg["train_path"])
        test = read_dataset(data_cfg["test_path"]) if data_cfg["test_path"] else train
        logger.info(f"读取数据集: 训练 {train.count} 条, 测试 {test.count} 条, T={train.T}")
        return train, test

    generate = _generator_fn(data_cfg, threads, Rng(data_cfg["seed"], (99,)))
    train_count, test_count = split_counts(data_cfg["preset"], data_cfg["scale"])
    train, test = make_splits(generate, train_count, test_count)
    drift = variance_drift_ratio(train)
    logger.info(f"生成数据集: 训练 {train.count} 条, 测试 {test.count} 条, T={train.T}, 方差漂移比 {drift:.3f}")
    if not 0.5 < drift < 2.0:
        logger.warning(f"数据方差随时间明显漂移 (比值 {drift:.3f})，序列可能不平稳")
    return train, test


def model_from_config(model_cfg, train, seed, **changes):
    """按 model 小节构造模型，pca 特征提取在训练集图像块上拟合"""
    opts = dict(model_cfg)
    opts.update(changes)
    generator = Rng(seed, (11,)).generator
    n, d_h = opts.pop("n"), opts.pop("d_h")
    featurizer = opts.pop("featurizer")
    if featurizer == "pca":
        featurizer = make_featurizer("pca", n, train.patch_dim, generator, train.data)
    try:
        return build_model(n, d_h, train.patch_dim, generator, featurizer=featurizer, **opts)
    except ValidationError as e:
        raise ConfigError(f"model 配置无效: {str(e)}", "model")


def train_config_from(cfg, **changes):
    """由 train 小节构造 TrainConfig"""
    opts = cfg.get("train")
    for key in CURVE_KEYS:
        opts.pop(key)
    opts.update(changes)
    model_cfg = cfg.get("model")
    try:
        return TrainConfig(loss_kind=model_cfg["loss_kind"], stop_gradient=model_cfg["stop_gradient"],
                           seed=cfg.get("runtime", "seed"), threads=cfg.get("runtime", "threads"), **opts)
    except ValidationError as e:
        raise ConfigError(f"train 配置无效: {str(e)}", "train")


# ---------------------------------------------------------------------------
# gradcheck 辅助
# ---------------------------------------------------------------------------

def _gradcheck_model(n, seed, diagonal_gates, stop_gradient, off_scale=1.0):
    """随机 RGC 模型；dense 时非对角元素乘以 off_scale"""
    rng = Rng(seed, (23,))
    gen = rng.generator
    model = build_model(n, n, GRADCHECK_PATCH_DIM, gen, embed_init="random", stop_gradient=stop_gradient)
    if diagonal_gates:
        rgc = RgcWeights.random(n, gen, 0.5, diagonal_gates=True)
        weights = {key: w for key, w in zip(RGC_KEYS, rgc.w)}
    else:
        rgc = RgcWeights.random(n, gen, 1.0)
        weights = {}
        for key, w in zip(RGC_KEYS, rgc.w):
            diag = np.diag(np.diag(w))
            weights[key] = diag + off_scale * (w - diag)
    weights["W_Gh"] = np.eye(n) + gen.normal(0.0, 0.2, (n, n))
    return model.with_params(weights, diagonal_gates=diagonal_gates)


def _final_sensitivity(model, patches):
    enc = encode_sequence(model, patches)
    run = RfpRun(rfp_init(model.n))
    for t in range(1, enc.T + 1):
        prev = RgcState(enc.s[t - 1], enc.m[t - 1])
        run.advance(rgc_factors(prev, enc.x[t - 1], model.rgc, t, enc.caches[t - 1]))
    return run.sens


def _gradcheck_instance(report, n, T, seed, diagonal_gates):
    """单个实例：雅可比、RFP、BPTT、有限差分与完整 RTRL 的两两比较

    有限差分对应完整的前向损失，因此这组比较关闭停止梯度；
    停止梯度下只比较 RFP 与 BPTT。
    """
    model = _gradcheck_model(n, seed, diagonal_gates, stop_gradient=False)
    rng = Rng(seed, (29,))
    patches = rng.normal((T, GRADCHECK_PATCH_DIM))

    state = RgcState(rng.normal(n, 0.5), rng.normal(n, 0.5))
    jac_err = check_rgc_jacobian(model.rgc, state, rng.normal(n))

    rfp, rfp_ms = timed(rfp_sequence_grad, model, patches)
    bptt, bptt_ms = timed(bptt_grad, model, patches)
    fd = model_finite_diff(model, patches)
    report.record_method("rfp", rfp_ms, rfp.memory_reals)
    report.record_method("bptt", bptt_ms, bptt.memory_reals)
    report.compare("rfp", rfp.grads, "finite_diff", fd, n, T, seed)
    report.compare("bptt", bptt.grads, "finite_diff", fd, n, T, seed)
    report.compare("rfp", rfp.grads, "bptt", bptt.grads, n, T, seed)

    # 只计最后一个预测损失的聚合
    report.compare("rfp_final", rfp_sequence_grad(model, patches, "final").grads,
                   "bptt_final", bptt_grad(model, patches, "final").grads, n, T, seed)

    stopped = replace(model, stop_gradient=True)
    report.compare("rfp_stop_grad", rfp_sequence_grad(stopped, patches).grads,
                   "bptt_stop_grad", bptt_grad(stopped, patches).grads, n, T, seed)

    slice_err = float("nan")
    off_slice = float("nan")
    if n <= RTRL_MAX_N:
        rtrl, rtrl_ms = timed(full_rtrl_grad, model, patches)
        report.record_method("full_rtrl", rtrl_ms, rtrl.memory_reals)
        report.compare("full_rtrl", rtrl.grads, "bptt", bptt.grads, n, T, seed)
        off_slice = rtrl.extras["max_off_slice"]
        if diagonal_gates:
            sens = _final_sensitivity(model, patches)
            slice_err = float(np.max(np.abs(rtrl_slice(rtrl.extras["gamma"]) - sens.gamma)))
    return {"seed": seed, "jacobian_rel_err": jac_err, "gamma_slice_abs_err": slice_err,
            "max_off_slice": off_slice}


def _time_decay_check(report, n, T, seed):
    """时间衰减单元的两点交互递推"""
    rng = Rng(seed, (31,))
    tau = float(rng.uniform(-0.9, 0.9))
    p_map = rng.normal((n, GRADCHECK_PATCH_DIM), 0.5)
    inputs = rng.normal((T, GRADCHECK_PATCH_DIM))
    targets = rng.normal((T, n))
    rfp = time_decay_rfp_grad(tau, p_map, inputs, targets)
    bptt = time_decay_bptt_grad(tau, p_map, inputs, targets)
    fd = finite_diff_grad(lambda p: time_decay_loss(tau, p, inputs, targets), p_map)
    report.compare("rfp", {"P": rfp}, "finite_diff", {"P": fd}, n, T, seed)
    report.compare("bptt", {"P": bptt}, "finite_diff", {"P": fd}, n, T, seed)
    report.compare("rfp", {"P": rfp}, "bptt", {"P": bptt}, n, T, seed)


def _dense_deviation(n, T, seed, scales):
    """稠密门控下 RFP 与 BPTT 的偏差随非对角尺度的变化"""
    patches = Rng(seed, (29,)).normal((T, GRADCHECK_PATCH_DIM))
    rows = []
    for scale in scales:
        model = _gradcheck_model(n, seed, False, True, off_scale=scale)
        report = GradientReport()
        report.compare("rfp", rfp_sequence_grad(model, patches).grads,
                       "bptt", bptt_grad(model, patches).grads, n, T, seed)
        rows.append({"off_diagonal_scale": scale,
                     "rfp_vs_bptt": report.max_error("rfp", "bptt", blocks=RGC_KEYS)})
        logger.info(f"非对角尺度 {scale}: RFP 与 BPTT 偏差 {rows[-1]['rfp_vs_bptt']:.3e}")
    return pd.DataFrame(rows)


def _moment_case(u, sigma, samples, burn_in, seed, label):
    report = moment_closed_form(u, sigma)
    mc = moment_monte_carlo(u, sigma, samples, burn_in, seed)
    report.mc_mean, report.mc_stderr = mc.mc_mean, mc.mc_stderr
    df = report.to_dataframe()
    df.insert(0, "case", label)
    z = np.concatenate([np.abs(v) for v in report.z_scores("exact").values()])
    return df, z




# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

class ExperimentRunner:
    """按解析后的配置执行各子命令，每个方法返回退出码，判据不满足时抛出 ToleranceError"""

    def __init__(self, cfg, level=logging.INFO):
        """初始化

        Args:
            cfg: Config
            level: 日志级别
        """
        self.cfg = cfg
        self.logger = setup_logger("rjepa", level)
        self.seed = cfg.get("runtime", "seed")
        self.threads = cfg.get("runtime", "threads")
        self.out_dir = cfg.get("runtime", "out_dir")
        os.makedirs(self.out_dir, exist_ok=True)

    def _write_csv(self, df, name):
        path = os.path.join(self.out_dir, name)
        df.to_csv(path, index=False)
        self.logger.info(f"已写入 {path}")
        return path

    def run(self, command, args):
        """执行子命令"""
        self.logger.info(f"执行子命令 {command}")
        return getattr(self, COMMANDS[command])(args)

    # -- gradcheck ----------------------------------------------------------

    def gradcheck(self, args):
        gc = self.cfg.get("gradcheck")
        n, T, gates = gc["n"], gc["T"], gc["gates"]
        if n < 1 or T < 2:
            raise ValidationError(f"gradcheck 需要 n ≥ 1 且 T ≥ 2，实际 n={n}, T={T}")
        seed = self.seed
        diagonal = gates == "diagonal"
        report = GradientReport()
        rows = []

        for i in range(gc["instances"]):
            if args.cell == "time_decay":
                _time_decay_check(report, n, T, seed + i)
            else:
                rows.append(_gradcheck_instance(report, n, T, seed + i, diagonal))
        self._write_csv(report.to_dataframe(), "gradcheck_report.csv")
        self._write_csv(report.method_dataframe(), "gradcheck_methods.csv")
        if rows:
            self._write_csv(pd.DataFrame(rows), "gradcheck_instances.csv")

        tol = gc["rfp_tol"]
        failures = []
        bptt_fd = report.max_error("bptt", "finite_diff")
        self.logger.info(f"{gc['instances']} 个实例, BPTT vs 有限差分 最大相对误差 {bptt_fd:.3e}")
        if bptt_fd >= tol:
            failures.append(f"bptt_vs_fd={bptt_fd:.3e}")
        if rows and max(r["jacobian_rel_err"] for r in rows) >= tol:
            failures.append("单步雅可比与有限差分不一致")

        if diagonal or args.cell == "time_decay":
            rfp_fd = report.max_error("rfp", "finite_diff")
            self.logger.info(f"RFP vs 有限差分 最大相对误差 {rfp_fd:.3e}")
            if rfp_fd >= tol:
                failures.append(f"rfp_vs_fd={rfp_fd:.3e}")
            if rows:
                final_err = report.max_error("rfp_final", "bptt_final")
                if final_err >= tol:
                    failures.append(f"final_psi={final_err:.3e}")
                stop_err = report.max_error("rfp_stop_grad", "bptt_stop_grad")
                if stop_err >= tol:
                    failures.append(f"stop_grad={stop_err:.3e}")
                slice_err = max(r["gamma_slice_abs_err"] for r in rows)
                off_slice = max(r["max_off_slice"] for r in rows)
                self.logger.info(f"Γ 切片绝对误差 {slice_err:.3e}, 切片外最大元素 {off_slice:.3e}")
                if not slice_err < gc["rtrl_tol"]:
                    failures.append(f"gamma_slice={slice_err:.3e}")
                if not off_slice < 1e-14:
                    failures.append(f"off_slice={off_slice:.3e}")
        else:
            deviation = _dense_deviation(n, T, seed, gc["dense_scales"])
            self._write_csv(deviation, "gradcheck_dense_deviation.csv")
            values = deviation["rfp_vs_bptt"].to_numpy()
            if not np.all(np.diff(values) < 0):
                failures.append(f"稠密门控偏差未随非对角尺度单调下降: {values.tolist()}")

        if failures:
            raise ToleranceError("梯度校验未通过: " + "; ".join(failures))
        self.logger.info("梯度校验通过")
        return EXIT_OK

    # -- train / collapse ---------------------------------------------------

    def train(self, args):
        train_cfg = self.cfg.get("train")
        train, test = load_datasets(self.cfg)
        model = model_from_config(self.cfg.get("model"), train, self.seed)
        config = train_config_from(self.cfg)
        model, metrics = Trainer(config).fit(model, train, test)

        self._write_csv(metrics.to_dataframe(), "metrics.csv")
        save_checkpoint(model, os.path.join(self.out_dir, "model.rjpw"),
                        extra={"mode": config.mode, "epochs": config.epochs, "seed": self.seed})
        drop = metrics.drop_ratio()
        flatness = metrics.initial_flatness()
        spread = float(np.ptp(metrics.curves[0]) / max(np.mean(metrics.curves[0]), 1e-30))
        self.logger.info(f"训练完成: 末轮后段损失相对前段下降 {drop:.1%}, 第 0 轮前后段相对差 {flatness:.1%}"
                         f"（逐步相对极差 {spread:.1%}）, 状态存储 {metrics.state_memory_reals} 个实数")

        if len(metrics.curves[0]) < LATE_WINDOW[0]:
            self.logger.warning(f"序列只有 {len(metrics.curves[0])} 个损失项，不足以评估曲线形状判据")
            return EXIT_OK
        failures = []
        if drop < train_cfg["min_drop"]:
            failures.append(f"后段下降 {drop:.1%} < {train_cfg['min_drop']:.0%}")
        if flatness > train_cfg["flat_tolerance"]:
            failures.append(f"第 0 轮曲线前后段相差 {flatness:.1%} > {train_cfg['flat_tolerance']:.0%}")
        if failures:
            raise ToleranceError("损失曲线形状判据未通过: " + "; ".join(failures))
        return EXIT_OK

    def collapse(self, args):
        col = self.cfg.get("collapse")
        train, test = load_datasets(self.cfg, offset=col["offset"], observation_noise=col["observation_noise"])
        runs = [False] if args.no_stop_gradient else ([True, False] if args.paired else [True])

        rows = []
        failures = []
        for stop_gradient in runs:
            model = model_from_config(self.cfg.get("model"), train, self.seed, n=col["n"], d_h=col["d_h"],
                                      featurizer=col["featurizer"], stop_gradient=stop_gradient)
            config = replace(train_config_from(self.cfg, epochs=col["epochs"], learning_rate=col["learning_rate"]),
                             stop_gradient=stop_gradient)
            model, metrics = Trainer(config).fit(model, train, test)
            pr = metrics.participation[-1]
            if not np.isfinite(pr):
                self.logger.warning("表示全部为零，按完全坍缩记参与率为 0")
                pr = 0.0
            d_h = model.d_h
            passed = pr >= col["min_ratio"] * d_h if stop_gradient else pr <= col["max_ratio"] * d_h
            rows.append({"stop_gradient": stop_gradient, "participation_ratio": pr, "d_h": d_h,
                         "final_loss": metrics.epoch_losses[-1], "passed": passed})
            self.logger.info(f"停止梯度={stop_gradient}: 参与率 {pr:.2f} / {d_h}")
            if not passed:
                failures.append(f"stop_gradient={stop_gradient} 参与率 {pr:.2f}")
        self._write_csv(pd.DataFrame(rows), "collapse.csv")
        if failures:
            raise ToleranceError("坍缩诊断未通过: " + "; ".join(failures))
        return EXIT_OK

    # -- balance ------------------------------------------------------------

    def balance(self, args):
        tbc = self.cfg.get("testbed")
        dims = list(tbc["dims"])
        if len(tbc["taus"]) != len(dims) - 1:
            raise ConfigError(f"testbed.taus 需要 {len(dims) - 1} 个值", "testbed.taus")

        rng = Rng(self.seed, (41,))
        data_cfg = self.cfg.get("data")
        params = make_latent_params((dims[0], 1, 1), min(data_cfg["latent_dim"], dims[0]), rng.generator,
                                    data_cfg["tau_low"], data_cfg["tau_high"])
        dataset = gen_latent_sequences(params, tbc["sequences"], tbc["T"], self.seed, split="train",
                                       threads=self.threads)
        tb = make_testbed(dims, tbc["taus"], tbc["d_action"], rng.generator, tbc["lambda1"], tbc["lambda2"],
                          tbc["eta"], top_scale=tbc["top_scale"], w_gh_scale=tbc["w_gh_scale"])
        config = TestbedConfig(learning_rate=tbc["learning_rate"], iterations=tbc["iterations"],
                               encoder_lr=tbc["encoder_lr"], lag_preconditioner=tbc["lag_preconditioner"])
        tb, traces = train_testbed(tb, dataset, config)
        self._write_csv(traces.table, "balance_trace.csv")

        tol = tbc["tolerance"] if tbc["eta"] > 0 else tbc["tolerance_without_decay"]
        residual = traces.final_residual
        rise = traces.rise_after(tbc["transient"])
        self.logger.info(f"最终平衡残差 {residual:.4f}（阈值 {tol}），过渡段后最大回升 {rise:.2e}")
        failures = []
        if not residual < tol:
            failures.append(f"平衡残差 {residual:.4f} 未低于 {tol}")
        if tbc["eta"] > 0 and rise > 0.01 * tol:
            failures.append(f"过渡段后残差回升 {rise:.2e}，不是单调下降")
        if failures:
            raise ToleranceError("; ".join(failures))
        return EXIT_OK

    # -- moments ------------------------------------------------------------

    def moments(self, args):
        an = self.cfg.get("analysis")
        seed = self.seed
        n, tau = an["moment_n"], an["tau"]
        frames = []
        z_all = []

        df, z = _moment_case(tau * np.eye(n), np.eye(n), an["samples"], an["burn_in"], seed, f"tau={tau}")
        frames.append(df)
        z_all.append(z)

        rng = Rng(seed, (47,))
        for i in range(an["instances"]):
            size = int(rng.integers(1, 4))
            u = np.diag(rng.uniform(-0.8, 0.8, size))
            a = rng.normal((size, size))
            sigma = a @ a.T / size + 0.1 * np.eye(size)
            df, z = _moment_case(u, sigma, an["samples"], an["burn_in"], seed + i + 1, f"random{i}")
            frames.append(df)
            z_all.append(z)
        self._write_csv(pd.concat(frames, ignore_index=True), "moments.csv")

        scaling = tau_scaling_check(np.eye(n), an["tau_grid"])
        self._write_csv(scaling["norms"], "tau_scaling.csv")

        z = np.concatenate(z_all)
        within3 = float(np.mean(z < 3.0))
        violations = int(np.sum(z >= 3.0))
        self.logger.info(f"蒙特卡洛与闭式值: {within3:.1%} 在 3σ 内（超出 {violations} 项），最大 |z| {z.max():.2f}；"
                         f"τ 斜率 {scaling['slope_011']:.3f} / {scaling['slope_122']:.3f}")
        failures = []
        if within3 < 0.98 or z.max() >= 5.0:
            failures.append(f"{violations} 项超出 3σ，最大 |z| {z.max():.2f}")
        if not 1.9 <= scaling["slope_011"] <= 2.15 or not 2.9 <= scaling["slope_122"] <= 3.15:
            failures.append(f"τ 斜率 {scaling['slope_011']:.3f}, {scaling['slope_122']:.3f} 超出范围")
        if failures:
            raise ToleranceError("四阶矩验证未通过: " + "; ".join(failures))
        return EXIT_OK

    # -- bench / gen-data ---------------------------------------------------

    def bench(self, args):
        bc = self.cfg.get("bench")
        tables = []
        failures = []
        for mode in bc["modes"]:
            sizes = [n for n in bc["sizes"] if mode != "full_rtrl" or n <= RTRL_MAX_N]
            if not sizes:
                self.logger.warning(f"{mode} 没有可用的规模（上限 {RTRL_MAX_N}）")
                continue
            table, slope = scaling_bench(sizes, bc["T"], mode, bc["repeats"], self.seed, bc["float32"])
            table["slope"] = slope
            tables.append(table)
            self.logger.info(f"{mode} 每步耗时对数斜率 {slope:.3f}")

            expected = {"rfp": 4.0, "full_rtrl": 8.0}.get(mode)
            by_n = dict(zip(table["n"], table["state_memory_reals"]))
            for n, memory in by_n.items():
                if expected is not None and 2 * n in by_n and by_n[2 * n] != expected * memory:
                    failures.append(f"{mode} 存储比 n={n}→{2 * n} 不等于 {expected:g}")
            if mode == "rfp" and not bc["min_slope"] <= slope <= bc["max_slope"]:
                failures.append(f"RFP 耗时斜率 {slope:.3f} 不在 [{bc['min_slope']}, {bc['max_slope']}]")
        if tables:
            self._write_csv(pd.concat(tables, ignore_index=True), "bench.csv")
        if failures:
            raise ToleranceError("复杂度基准未通过: " + "; ".join(failures))
        return EXIT_OK

    def gen_data(self, args):
        train, test = load_datasets(self.cfg)
        write_dataset(train, os.path.join(self.out_dir, "train.rjpa"))
        write_dataset(test, os.path.join(self.out_dir, "test.rjpa"))
        return EXIT_OK


COMMANDS = {
    "gradcheck": "gradcheck",
    "train": "train",
    "balance": "balance",
    "collapse": "collapse",
    "moments": "moments",
    "bench": "bench",
    "gen-data": "gen_data",
}


def _common_parser(default):
    """各子命令共用的全局参数，子命令上使用 SUPPRESS 以免覆盖写在子命令之前的值"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default, help="配置文件路径（YAML 或 JSON）")
    common.add_argument("--threads", type=positive_int, default=default, help="并行线程上限，默认 1")
    common.add_argument("--out-dir", default=default, help="报告输出目录")
    common.add_argument("--log-dir", default=default, help="日志文件目录，默认只输出到控制台")
    common.add_argument("--seed", type=int, default=default, help="随机种子")
    common.add_argument("--debug", action="store_true",
                        default=False if default is None else default, help="启用调试日志")
    return common


def build_parser():
    """命令行参数，全局参数可以写在子命令之前或之后"""
    parser = argparse.ArgumentParser(prog="rjepa", description="R-JEPA 循环学习引擎",
                                     parents=[_common_parser(None)])
    common = _common_parser(argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="RFP / BPTT / 有限差分 / 完整 RTRL 梯度校验")
    p.add_argument("--n", type=positive_int, default=None)
    p.add_argument("--T", type=positive_int, default=None)
    p.add_argument("--gates", choices=["diagonal", "dense"], default=None)
    p.add_argument("--cell", choices=["rgc", "time_decay"], default="rgc")
    p.add_argument("--instances", type=positive_int, default=None)

    p = sub.add_parser("train", parents=[common], help="训练 R-JEPA")
    p.add_argument("--mode", choices=["bptt", "rfp"], default=None)
    p.add_argument("--epochs", type=positive_int, default=None)
    p.add_argument("--cadence", choices=["per-sequence", "per-step"], default=None)

    p = sub.add_parser("balance", parents=[common], help="线性测试平台的平衡残差")
    p.add_argument("--eta", type=non_negative_float, default=None)
    p.add_argument("--iterations", type=positive_int, default=None)

    p = sub.add_parser("collapse", parents=[common], help="表示坍缩诊断")
    p.add_argument("--no-stop-gradient", action="store_true", help="只运行关闭停止梯度的对照")
    p.add_argument("--paired", action="store_true", help="同一种子下成对运行")

    p = sub.add_parser("moments", parents=[common], help="四阶矩闭式解与蒙特卡洛验证")
    p.add_argument("--n", type=positive_int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--samples", type=positive_int, default=None)
    p.add_argument("--instances", type=int, default=None)

    p = sub.add_parser("bench", parents=[common], help="复杂度基准")
    p.add_argument("--mode", choices=["rfp", "full_rtrl", "bptt"], action="append", default=None)
    p.add_argument("--float32", action="store_true", default=None)

    sub.add_parser("gen-data", parents=[common], help="生成并写出数据集")
    return parser


def collect_overrides(args):
    """把命令行参数映射为 section.key 覆盖"""
    overrides = {
        "runtime.threads": args.threads,
        "runtime.out_dir": args.out_dir,
        "runtime.log_dir": args.log_dir,
        "runtime.seed": args.seed,
    }
    cmd = args.command
    if cmd == "gradcheck":
        overrides.update({"gradcheck.n": args.n, "gradcheck.T": args.T, "gradcheck.gates": args.gates,
                          "gradcheck.instances": args.instances})
    elif cmd == "train":
        overrides.update({"train.mode": args.mode, "train.epochs": args.epochs, "train.cadence": args.cadence})
    elif cmd == "balance":
        overrides.update({"testbed.eta": args.eta, "testbed.iterations": args.iterations})
    elif cmd == "moments":
        overrides.update({"analysis.moment_n": args.n, "analysis.tau": args.tau,
                          "analysis.samples": args.samples, "analysis.instances": args.instances})
    elif cmd == "bench":
        overrides.update({"bench.modes": args.mode, "bench.float32": args.float32})
    return overrides


def main(argv=None):
    """主函数，返回退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.debug:
        logger.setLevel(logging.DEBUG)

    try:
        cfg = Config(args.config, collect_overrides(args))
        log_dir = cfg.get("runtime", "log_dir")
        if log_dir:
            set_log_dir(log_dir)
            setup_logger("rjepa", logger.level, log_dir)
        runner = ExperimentRunner(cfg, logger.level)
        cfg.echo(runner.out_dir)
        return runner.run(args.command, args)
    except (ConfigError, ValidationError, FormatError) as e:
        logger.error(f"参数或配置错误: {str(e)}", exc_info=True)
        return EXIT_USAGE
    except (DivergenceError, NumericError) as e:
        logger.error(f"数值发散: {str(e)}", exc_info=True)
        return EXIT_NUMERIC
    except ToleranceError as e:
        logger.error(f"结果超出容差: {str(e)}")
        return EXIT_TOLERANCE
    except RjepaError as e:
        logger.error(f"运行失败: {str(e)}", exc_info=True)
        return EXIT_USAGE
    except KeyboardInterrupt:
        logger.info("收到中断信号，退出程序")
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
