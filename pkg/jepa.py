#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
R-JEPA 模型模块

包含桌面规模的循环编码器（冻结特征提取 + 顶层 RGC + 嵌入）、表示预测器与停止梯度，
以及全线性测试平台（时间衰减编码器、闭式梯度、平衡残差）。
"""
import json
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from cells import RgcState, RgcWeights, TimeDecayParams, rgc_step, time_decay_step
from numerics import as_matrix, as_vector, frobenius, random_orthonormal
from utils.errors import FormatError, NumericError, ShapeError, ValidationError
from utils.logger import setup_logger

logger = setup_logger("jepa", logging.INFO)

LOSS_KINDS = ("squared", "cosine")
PREDICTOR_KINDS = ("linear", "mlp")
FEATURIZER_KINDS = ("random", "pooling", "pca")
RGC_KEYS = ("W0", "W1", "W2", "W3")

CHECKPOINT_MAGIC = b"RJPW1"
CHECKPOINT_VERSION = 1

# 余弦距离中视为零范数的阈值
ZERO_NORM = 1e-300


def jepa_loss_grads(h_target, h_pred, kind="squared", lambda1=1.0):
    """表示损失及其对预测与目标的梯度

    squared: ½λ₁‖h - ĥ‖²
    cosine:  λ₁(1 - ⟨h, ĥ⟩ / (‖h‖‖ĥ‖))

    Returns:
        tuple: (loss, dL/dĥ, dL/dh)
    """
    h_target = np.asarray(h_target, dtype=np.float64)
    h_pred = np.asarray(h_pred, dtype=np.float64)
    if h_target.shape != h_pred.shape:
        raise ShapeError(f"目标与预测维度不一致: {h_target.shape} vs {h_pred.shape}")

    if kind == "squared":
        diff = h_target - h_pred
        loss = 0.5 * lambda1 * float(diff @ diff)
        return loss, -lambda1 * diff, lambda1 * diff

    if kind == "cosine":
        nt = np.linalg.norm(h_target)
        np_ = np.linalg.norm(h_pred)
        if nt < ZERO_NORM or np_ < ZERO_NORM:
            raise NumericError("余弦距离遇到零范数向量")
        cos = float(h_target @ h_pred) / (nt * np_)
        d_pred = -lambda1 * (h_target / (nt * np_) - cos * h_pred / (np_ * np_))
        d_target = -lambda1 * (h_pred / (nt * np_) - cos * h_target / (nt * nt))
        return lambda1 * (1.0 - cos), d_pred, d_target

    raise ValidationError(f"未知的损失类型: {kind}")


def jepa_loss(h_target, h_pred, kind="squared", lambda1=1.0):
    """表示损失，目标视为常数（停止梯度）

    Args:
        h_target: 目标表示 h(t+1)
        h_pred: 预测表示 ĥ(t+1)
        kind: "squared" 或 "cosine"
        lambda1: 损失权重

    Returns:
        tuple: (loss, dL/dĥ)
    """
    loss, d_pred, _ = jepa_loss_grads(h_target, h_pred, kind, lambda1)
    return loss, d_pred


def _frozen(m, name):
    m = np.array(as_matrix(m, name), dtype=np.float64)
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class LinearPredictor:
    """线性表示预测器 ĥ = W_Gh h"""
    w_gh: np.ndarray

    kind = "linear"

    def __post_init__(self):
        w = _frozen(self.w_gh, "W_Gh")
        if w.shape[0] != w.shape[1]:
            raise ShapeError(f"W_Gh 必须是方阵，实际 {w.shape}")
        object.__setattr__(self, "w_gh", w)

    @property
    def dim(self):
        return self.w_gh.shape[0]

    def forward(self, h):
        return self.w_gh @ h, h

    def backward(self, cache, d_out):
        """返回 (参数梯度, 对输入的梯度)"""
        return {"W_Gh": np.outer(d_out, cache)}, self.w_gh.T @ d_out

    def params(self):
        return {"W_Gh": self.w_gh}

    def with_params(self, params):
        return LinearPredictor(params["W_Gh"])


@dataclass(frozen=True)
class MlpPredictor:
    """两层感知机预测器 ĥ = W_out tanh(W_in h)，无偏置"""
    w_in: np.ndarray
    w_out: np.ndarray

    kind = "mlp"

    def __post_init__(self):
        w_in = _frozen(self.w_in, "W_in")
        w_out = _frozen(self.w_out, "W_out")
        if w_out.shape != (w_in.shape[1], w_in.shape[0]):
            raise ShapeError(f"W_out 形状应为 {(w_in.shape[1], w_in.shape[0])}，实际 {w_out.shape}")
        object.__setattr__(self, "w_in", w_in)
        object.__setattr__(self, "w_out", w_out)

    @property
    def dim(self):
        return self.w_in.shape[1]

    @property
    def width(self):
        return self.w_in.shape[0]

    def forward(self, h):
        hidden = np.tanh(self.w_in @ h)
        return self.w_out @ hidden, (h, hidden)

    def backward(self, cache, d_out):
        h, hidden = cache
        d_hidden = self.w_out.T @ d_out
        d_z = d_hidden * (1.0 - hidden * hidden)
        grads = {"W_in": np.outer(d_z, h), "W_out": np.outer(d_out, hidden)}
        return grads, self.w_in.T @ d_z

    def params(self):
        return {"W_in": self.w_in, "W_out": self.w_out}

    def with_params(self, params):
        return MlpPredictor(params["W_in"], params["W_out"])


@dataclass(frozen=True)
class JepaModel:
    """桌面规模 R-JEPA 模型

    x(t) = featurizer · patch(t)，c(t) = RGC(x(t), c(t-1))，h(t) = embed · s(t)，ĥ(t+1) = G(h(t))。
    特征提取矩阵冻结，不参与训练。
    """
    featurizer: np.ndarray
    rgc: RgcWeights
    embed: np.ndarray
    predictor: object
    stop_gradient: bool = True
    loss_kind: str = "squared"
    lambda1: float = 1.0

    def __post_init__(self):
        featurizer = _frozen(self.featurizer, "featurizer")
        embed = _frozen(self.embed, "embed")
        n = self.rgc.n
        if featurizer.shape[0] != n:
            raise ShapeError(f"特征提取输出维度 {featurizer.shape[0]} 与 RGC 单元数 {n} 不一致")
        if embed.shape[1] != n:
            raise ShapeError(f"嵌入矩阵输入维度 {embed.shape[1]} 与 RGC 单元数 {n} 不一致")
        if self.predictor.dim != embed.shape[0]:
            raise ShapeError(f"预测器维度 {self.predictor.dim} 与表示维度 {embed.shape[0]} 不一致")
        if self.loss_kind not in LOSS_KINDS:
            raise ValidationError(f"未知的损失类型: {self.loss_kind}")
        object.__setattr__(self, "featurizer", featurizer)
        object.__setattr__(self, "embed", embed)

    @property
    def n(self):
        return self.rgc.n

    @property
    def d_h(self):
        return self.embed.shape[0]

    @property
    def patch_dim(self):
        return self.featurizer.shape[1]

    def params(self):
        """可训练参数字典（不含冻结的特征提取矩阵）"""
        params = {key: w for key, w in zip(RGC_KEYS, self.rgc.w)}
        params["embed"] = self.embed
        params.update(self.predictor.params())
        return params

    def with_params(self, params, diagonal_gates=None):
        """以新参数构造模型，缺失的键沿用当前值"""
        merged = dict(self.params())
        merged.update(params)
        rgc = self.rgc.replace(w=tuple(merged[k] for k in RGC_KEYS), diagonal_gates=diagonal_gates)
        predictor = self.predictor.with_params(merged)
        return replace(self, rgc=rgc, embed=merged["embed"], predictor=predictor)

    def featurize(self, patches):
        """展平图像块并映射到 RGC 输入，返回 (T, n)"""
        patches = np.asarray(patches, dtype=np.float64)
        flat = patches.reshape(patches.shape[0], -1)
        if flat.shape[1] != self.patch_dim:
            raise ShapeError(f"图像块维度 {flat.shape[1]} 与特征提取输入 {self.patch_dim} 不一致")
        return flat @ self.featurizer.T


def pooling_featurizer(n, patch_dim, generator):
    """非负的像素分组平均：像素随机划分为 n 组，第 i 行在第 i 组上取 1/√|组|，各行正交归一"""
    if n > patch_dim:
        raise ValidationError(f"pooling 特征提取要求 n ≤ 图像块维度，实际 n={n}, patch_dim={patch_dim}")
    featurizer = np.zeros((n, patch_dim))
    for i, group in enumerate(np.array_split(generator.permutation(patch_dim), n)):
        featurizer[i, group] = 1.0 / np.sqrt(group.size)
    return featurizer


def principal_featurizer(flat_patches, n):
    """训练图像块二阶矩 E[p pᵀ] 的前 n 个主方向，按特征值降序排列

    每行符号固定为绝对值最大的分量取正。

    Args:
        flat_patches: (样本数, patch_dim) 展平图像块
        n: 输出维度

    Returns:
        np.ndarray: (n, patch_dim) 行正交归一矩阵
    """
    flat = np.asarray(flat_patches, dtype=np.float64)
    if flat.ndim != 2 or flat.shape[0] == 0:
        raise ShapeError(f"主成分特征提取需要非空的二维样本，实际形状 {flat.shape}")
    if n > flat.shape[1]:
        raise ValidationError(f"pca 特征提取要求 n ≤ 图像块维度，实际 n={n}, patch_dim={flat.shape[1]}")
    _, vectors = np.linalg.eigh(flat.T @ flat / flat.shape[0])
    rows = vectors[:, ::-1][:, :n].T
    signs = np.sign(rows[np.arange(n), np.argmax(np.abs(rows), axis=1)])
    return rows * signs[:, None]


def make_featurizer(kind, n, patch_dim, generator, patches=None):
    """按类型构造冻结特征提取矩阵，pca 需要训练图像块 patches"""
    if kind not in FEATURIZER_KINDS:
        raise ValidationError(f"未知的特征提取类型: {kind}")
    if kind == "random":
        return random_orthonormal(n, patch_dim, generator)
    if kind == "pooling":
        return pooling_featurizer(n, patch_dim, generator)
    if patches is None:
        raise ValidationError("pca 特征提取需要训练数据")
    return principal_featurizer(np.asarray(patches).reshape(-1, patch_dim), n)


def build_model(n, d_h, patch_dim, generator, predictor="linear", mlp_width=None,
                gate_activation="tanh", diagonal_gates=True, loss_kind="squared",
                lambda1=1.0, stop_gradient=True, rgc_init_scale=0.0,
                embed_init="identity", mlp_init_scale=0.1, featurizer="random"):
    """按配置构造模型

    RGC 默认零初始化（第0轮无时间动态）；预测器初始化为 ĥ(t+1) ≈ h(t)。

    Args:
        n: RGC 单元数
        d_h: 表示维度
        patch_dim: 展平后的图像块维度
        generator: numpy 随机数生成器
        predictor: "linear" 或 "mlp"
        mlp_width: MLP 隐层宽度，默认 2·d_h
        gate_activation: 门控激活函数
        diagonal_gates: 是否使用对角门控
        loss_kind: 损失类型
        lambda1: 损失权重
        stop_gradient: 是否对目标分支停止梯度
        rgc_init_scale: RGC 初始权重尺度，0 表示全零
        embed_init: "identity"（要求 d_h = n）或 "random"
        mlp_init_scale: MLP 输入层初始尺度
        featurizer: "random" | "pooling" | "pca"，或已构造好的 (n, patch_dim) 矩阵（pca 需先经 make_featurizer 拟合）

    Returns:
        JepaModel: 新模型
    """
    if n < 1 or d_h < 1 or patch_dim < 1:
        raise ValidationError(f"模型维度必须为正: n={n}, d_h={d_h}, patch_dim={patch_dim}")
    if predictor not in PREDICTOR_KINDS:
        raise ValidationError(f"未知的预测器类型: {predictor}")

    if isinstance(featurizer, str):
        featurizer = make_featurizer(featurizer, n, patch_dim, generator)

    if rgc_init_scale > 0:
        rgc = RgcWeights.random(n, generator, rgc_init_scale, diagonal_gates, gate_activation)
    else:
        rgc = RgcWeights.zeros(n, diagonal_gates, gate_activation)

    if embed_init == "identity":
        if d_h != n:
            raise ValidationError(f"identity 嵌入初始化要求 d_h = n，实际 d_h={d_h}, n={n}")
        embed = np.eye(n)
    elif embed_init == "random":
        embed = random_orthonormal(d_h, n, generator)
    else:
        raise ValidationError(f"未知的嵌入初始化方式: {embed_init}")

    if predictor == "linear":
        head = LinearPredictor(np.eye(d_h))
    else:
        width = mlp_width or 2 * d_h
        if width < d_h:
            raise ValidationError(f"MLP 宽度 {width} 小于表示维度 {d_h}，无法满足 ĥ ≈ h 初始化")
        w_in = generator.normal(0.0, mlp_init_scale / np.sqrt(d_h), (width, d_h))
        head = MlpPredictor(w_in, np.linalg.pinv(w_in))

    model = JepaModel(featurizer, rgc, embed, head, stop_gradient, loss_kind, lambda1)
    logger.info(f"构造模型: n={n}, d_h={d_h}, 预测器={predictor}, 对角门控={diagonal_gates}, 停止梯度={stop_gradient}")
    return model


@dataclass
class EncodedSequence:
    """编码结果，x/h 第 t-1 行对应时刻 t，s/m 第 t 行对应时刻 t（含 t=0）"""
    x: np.ndarray
    s: np.ndarray
    m: np.ndarray
    h: np.ndarray
    caches: list = field(default_factory=list)

    @property
    def T(self):
        return self.x.shape[0]

    @property
    def memory_reals(self):
        """保存的轨迹与门控缓存的实数个数"""
        cache_reals = sum(c.a.size + c.b.size + c.s_prev.size + c.m_prev.size + c.x.size for c in self.caches)
        return int(self.s.size + self.m.size + cache_reals)


def encode_sequence(model, patches, T=None):
    """编码一个图像块序列

    状态从 c(0)=0 开始，h(t) = embed · s(t)。

    Args:
        model: JepaModel
        patches: (T, ...) 图像块序列
        T: 可选的截断长度

    Returns:
        EncodedSequence: 完整轨迹
    """
    patches = np.asarray(patches)
    if T is not None:
        if T > patches.shape[0]:
            raise ShapeError(f"请求长度 {T} 超过序列长度 {patches.shape[0]}")
        patches = patches[:T]
    x = model.featurize(patches)
    steps = x.shape[0]
    n = model.n

    s = np.zeros((steps + 1, n))
    m = np.zeros((steps + 1, n))
    caches = []
    state = RgcState.zeros(n)
    for t in range(1, steps + 1):
        state, cache = rgc_step(state, x[t - 1], model.rgc)
        s[t] = state.s
        m[t] = state.m
        caches.append(cache)
    h = s[1:] @ model.embed.T
    return EncodedSequence(x, s, m, h, caches)


def predict_next(model, h_t):
    """表示预测 ĥ(t+1) = G(h(t))"""
    h_t = as_vector(h_t, "h_t", size=model.d_h)
    pred, _ = model.predictor.forward(h_t)
    return pred


@dataclass
class StepGrads:
    """单个预测损失 L(t) 的空间反传结果"""
    loss: float
    d_s_pred: np.ndarray
    d_s_target: np.ndarray
    grads: dict


def prediction_step(model, s_t, s_next, h_target=None):
    """计算 L(t) = d(h(t+1), G(h(t))) 及其空间梯度

    停止梯度时目标分支不产生梯度；给定 h_target 时目标作为常数。

    Args:
        model: JepaModel
        s_t: s(t)
        s_next: s(t+1)
        h_target: 可选的常数目标

    Returns:
        StepGrads: 损失与梯度
    """
    h_t = model.embed @ s_t
    pred, cache = model.predictor.forward(h_t)
    fixed = h_target is not None
    target = np.asarray(h_target, dtype=np.float64) if fixed else model.embed @ s_next
    loss, d_pred, d_target = jepa_loss_grads(target, pred, model.loss_kind, model.lambda1)

    grads, d_h = model.predictor.backward(cache, d_pred)
    grads["embed"] = np.outer(d_h, s_t)
    d_s_pred = model.embed.T @ d_h

    if model.stop_gradient or fixed:
        d_s_target = np.zeros_like(s_next)
    else:
        grads["embed"] = grads["embed"] + np.outer(d_target, s_next)
        d_s_target = model.embed.T @ d_target
    return StepGrads(loss, d_s_pred, d_s_target, grads)


class LossAggregator:
    """损失聚合 E = Σ_t ψ(t, L(t))，t 从 1 开始，共 steps 项

    预设: mean (L/steps)、final (只计最后一项)、linear (t·L)；也可传入 (ψ, ∂ψ/∂L) 两个函数。
    每一项只依赖当时的 L(t)，可以在线计算。
    """

    PRESETS = ("mean", "final", "linear")

    def __init__(self, kind="mean", psi=None, dpsi=None):
        if psi is not None or dpsi is not None:
            if psi is None or dpsi is None:
                raise ValidationError("自定义 ψ 需要同时给出 psi 与 dpsi")
            kind = "custom"
        elif kind not in self.PRESETS:
            raise ValidationError(f"未知的 ψ 预设: {kind}，可选 {self.PRESETS}")
        self.kind = kind
        self._psi = psi
        self._dpsi = dpsi

    def step_value(self, t, loss, steps):
        if self.kind == "mean":
            return loss / steps
        if self.kind == "final":
            return loss if t == steps else 0.0
        if self.kind == "linear":
            return t * loss
        return float(self._psi(t, loss))

    def step_weight(self, t, loss, steps):
        """∂ψ/∂L 在 (t, L(t)) 处的值"""
        if self.kind == "mean":
            return 1.0 / steps
        if self.kind == "final":
            return 1.0 if t == steps else 0.0
        if self.kind == "linear":
            return float(t)
        return float(self._dpsi(t, loss))

    def value(self, losses):
        steps = len(losses)
        return float(sum(self.step_value(t, l, steps) for t, l in enumerate(losses, start=1)))

    def weights(self, losses):
        steps = len(losses)
        return np.array([self.step_weight(t, l, steps) for t, l in enumerate(losses, start=1)])


def make_aggregator(psi):
    """由预设名、(ψ, ∂ψ/∂L) 元组或现成的 LossAggregator 构造聚合器"""
    if psi is None:
        return LossAggregator("mean")
    if isinstance(psi, LossAggregator):
        return psi
    if isinstance(psi, str):
        return LossAggregator(psi)
    if isinstance(psi, tuple) and len(psi) == 2:
        return LossAggregator(psi=psi[0], dpsi=psi[1])
    raise ValidationError(f"无法识别的 ψ 设置: {psi!r}")


@dataclass
class ReadoutResult:
    """整段序列的损失与空间反传结果

    d_s[t] 为聚合损失对 s(t) 的直接导数（不经过循环），t = 0..T。
    """
    losses: np.ndarray
    weights: np.ndarray
    value: float
    d_s: np.ndarray
    grads: dict


def readout_backward(model, enc, psi=None, fixed_targets=None):
    """计算全部预测损失并做空间反传

    Args:
        model: JepaModel
        enc: EncodedSequence
        psi: 损失聚合设置
        fixed_targets: 可选的常数目标 (T, d_h)，第 t 行为 h(t+1) 的替代

    Returns:
        ReadoutResult: 损失与梯度
    """
    if enc.T < 2:
        raise ValidationError(f"序列长度 {enc.T} 不足以做下一步预测")
    agg = make_aggregator(psi)
    steps = [
        prediction_step(model, enc.s[t], enc.s[t + 1],
                        None if fixed_targets is None else fixed_targets[t])
        for t in range(1, enc.T)
    ]
    losses = np.array([st.loss for st in steps])
    weights = agg.weights(losses)

    d_s = np.zeros_like(enc.s)
    grads = {key: np.zeros_like(val) for key, val in steps[0].grads.items()}
    for t, (st, w) in enumerate(zip(steps, weights), start=1):
        if w == 0.0:
            continue
        d_s[t] += w * st.d_s_pred
        d_s[t + 1] += w * st.d_s_target
        for key, g in st.grads.items():
            grads[key] += w * g
    return ReadoutResult(losses, weights, agg.value(losses), d_s, grads)


def sequence_losses(model, patches):
    """序列的逐步预测损失 L(1..T-1)"""
    enc = encode_sequence(model, patches)
    preds = np.stack([predict_next(model, h) for h in enc.h[:-1]])
    return np.array([
        jepa_loss_grads(target, pred, model.loss_kind, model.lambda1)[0]
        for target, pred in zip(enc.h[1:], preds)
    ])


def model_loss(model, patches, psi=None):
    """序列的聚合损失 E，用于有限差分"""
    return make_aggregator(psi).value(sequence_losses(model, patches))


def save_checkpoint(model, path, extra=None):
    """以 RJPW1 二进制格式保存模型

    布局（小端）: magic, u16 版本, u32 元数据长度, UTF-8 JSON 元数据,
    u32 张量个数, 每个张量 u16 名称长度 + 名称 + u32 行 + u32 列 + float64 数据。
    """
    metadata = {
        "diagonal_gates": model.rgc.diagonal_gates,
        "gate_activation": model.rgc.activation,
        "predictor": model.predictor.kind,
        "loss_kind": model.loss_kind,
        "lambda1": model.lambda1,
        "stop_gradient": model.stop_gradient,
    }
    if extra:
        metadata["extra"] = extra
    tensors = {"featurizer": model.featurizer}
    tensors.update(model.params())

    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        name_bytes = name.encode("utf-8")
        rows, cols = tensor.shape
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())

    with open(path, "wb") as f:
        f.write(b"".join(parts))
    logger.info(f"检查点已保存到 {path}，共 {len(tensors)} 个张量")


def _unpack(fmt, data, offset, what):
    size = struct.calcsize(fmt)
    if offset + size > len(data):
        raise FormatError(f"读取{what}时文件被截断", offset)
    return struct.unpack_from(fmt, data, offset), offset + size


def load_checkpoint(path):
    """读取 RJPW1 检查点

    Returns:
        tuple: (JepaModel, 元数据字典)
    """
    with open(path, "rb") as f:
        data = f.read()

    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("检查点文件头错误", 0)
    offset = len(CHECKPOINT_MAGIC)
    (version, meta_len), offset = _unpack("<HI", data, offset, "版本")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"不支持的检查点版本 {version}", len(CHECKPOINT_MAGIC))
    if offset + meta_len > len(data):
        raise FormatError("读取元数据时文件被截断", offset)
    try:
        metadata = json.loads(data[offset:offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"元数据无法解析: {str(e)}", offset)
    offset += meta_len

    (count,), offset = _unpack("<I", data, offset, "张量个数")
    tensors = {}
    for _ in range(count):
        (name_len,), offset = _unpack("<H", data, offset, "张量名称长度")
        if offset + name_len > len(data):
            raise FormatError("读取张量名称时文件被截断", offset)
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rows, cols), offset = _unpack("<II", data, offset, f"张量 {name} 维度")
        nbytes = rows * cols * 8
        if offset + nbytes > len(data):
            raise FormatError(f"张量 {name} 数据被截断", offset)
        tensors[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols).copy()
        offset += nbytes

    rgc = RgcWeights(tuple(tensors[k] for k in RGC_KEYS), metadata["diagonal_gates"], metadata["gate_activation"])
    if metadata["predictor"] == "linear":
        head = LinearPredictor(tensors["W_Gh"])
    else:
        head = MlpPredictor(tensors["W_in"], tensors["W_out"])
    model = JepaModel(tensors["featurizer"], rgc, tensors["embed"], head,
                      metadata["stop_gradient"], metadata["loss_kind"], metadata["lambda1"])
    logger.info(f"已从 {path} 读取检查点")
    return model, metadata


# ---------------------------------------------------------------------------
# 全线性测试平台
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearTestbed:
    """全线性 R-JEPA

    c_l(t) = τ_l c_l(t-1) + P^(l) c_{l-1}(t)，l = 1..N+1，c_0 = x，
    h(t) = c_{N+1}(t)，c^Low = [c_1, ..., c_N]，â(t) = W_A c^Low(t)，
    ĥ(t+1) = W_Gh h(t) + W_Ga â(t)。
    """
    encoder: TimeDecayParams
    w_gh: np.ndarray
    w_ga: np.ndarray
    w_a: np.ndarray
    lambda1: float = 1.0
    lambda2: float = 0.0
    eta: float = 0.0

    def __post_init__(self):
        if self.encoder.layer_count < 2:
            raise ValidationError("测试平台至少需要一个低层和一个高层")
        d_h = self.d_h
        d_cl = self.d_clow
        w_gh = np.asarray(self.w_gh, dtype=np.float64)
        w_a = np.asarray(self.w_a, dtype=np.float64).reshape(-1, d_cl)
        w_ga = np.asarray(self.w_ga, dtype=np.float64).reshape(d_h, w_a.shape[0])
        if w_gh.shape != (d_h, d_h):
            raise ShapeError(f"W_Gh 形状应为 {(d_h, d_h)}，实际 {w_gh.shape}")
        if self.eta < 0:
            raise ValidationError(f"权重衰减 η 不能为负: {self.eta}")
        object.__setattr__(self, "w_gh", w_gh)
        object.__setattr__(self, "w_ga", w_ga)
        object.__setattr__(self, "w_a", w_a)

    @property
    def d_h(self):
        return self.encoder.dims[-1]

    @property
    def d_clow(self):
        return int(sum(self.encoder.dims[1:-1]))

    @property
    def d_action(self):
        return self.w_a.shape[0]


def make_testbed(dims, taus, d_action, generator, lambda1=1.0, lambda2=0.0, eta=0.0,
                 p_scale=1.0, top_scale=0.1, w_gh_scale=0.01, w_ga_scale=0.01):
    """构造随机测试平台

    Args:
        dims: 各层维度 (d_0, d_1, ..., d_{N+1})
        taus: 各层衰减 (N+1 个)
        d_action: 动作维度
        generator: numpy 随机数生成器
        p_scale: 低层输入映射尺度
        top_scale: 最高层输入映射尺度
        w_gh_scale, w_ga_scale: 预测器初始尺度

    Returns:
        LinearTestbed: 新测试平台
    """
    if len(dims) < 3:
        raise ValidationError(f"dims 至少需要 3 个元素（输入、低层、高层），实际 {len(dims)}")
    p_maps = []
    for l in range(1, len(dims)):
        scale = top_scale if l == len(dims) - 1 else p_scale
        p_maps.append(generator.normal(0.0, scale / np.sqrt(dims[l - 1]), (dims[l], dims[l - 1])))
    encoder = TimeDecayParams(tuple(taus), tuple(p_maps))
    d_h = dims[-1]
    d_cl = int(sum(dims[1:-1]))
    w_gh = generator.normal(0.0, w_gh_scale, (d_h, d_h))
    w_a = generator.normal(0.0, 1.0 / np.sqrt(d_cl), (d_action, d_cl))
    w_ga = generator.normal(0.0, w_ga_scale, (d_h, d_action))
    return LinearTestbed(encoder, w_gh, w_ga, w_a, lambda1, lambda2, eta)


@dataclass
class TestbedRollout:
    """测试平台各序列的 h(t) (T, d_h) 与 c^Low(t) (T, d_cL)"""
    h: list
    c_low: list

    @property
    def pair_count(self):
        return int(sum(max(len(h) - 1, 0) for h in self.h))

    def copy(self):
        return TestbedRollout([h.copy() for h in self.h], [c.copy() for c in self.c_low])


def rollout_testbed(tb, sequences, normalize=True):
    """用时间衰减编码器展开输入序列

    normalize 为真时第 N 层输出归一化为单位范数后再送入最高层。

    Args:
        tb: LinearTestbed
        sequences: 可迭代的 (T, ...) 输入序列
        normalize: 是否使用 ‖c_N‖ = 1 归一化

    Returns:
        TestbedRollout: 展开结果
    """
    norm_layer = tb.encoder.layer_count - 1 if normalize else None
    hs, lows = [], []
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.float64)
        xs = seq.reshape(seq.shape[0], -1)
        state = tb.encoder.zero_state()
        h_rows, low_rows = [], []
        for x in xs:
            state = time_decay_step(state, x, tb.encoder, normalize_layer=norm_layer)
            h_rows.append(state[-1])
            low_rows.append(np.concatenate(state[:-1]))
        hs.append(np.array(h_rows))
        lows.append(np.array(low_rows))
    return TestbedRollout(hs, lows)


@dataclass
class TestbedMoments:
    """相邻时刻对 (t, t+1) 上的二阶矩

    r0 = E[h(t)h(t)ᵀ]，r1 = E[h(t+1)h(t)ᵀ]，r_clow = E[c^Low(t)c^Low(t)ᵀ]，
    c_lh = E[c^Low(t)h(t)ᵀ]，c_hl_next = E[h(t+1)c^Low(t)ᵀ]。
    """
    r0: np.ndarray
    r1: np.ndarray
    r_clow: np.ndarray
    c_lh: np.ndarray
    c_hl_next: np.ndarray
    pairs: int


def _pair_arrays(rollout):
    prev = np.concatenate([h[:-1] for h in rollout.h])
    nxt = np.concatenate([h[1:] for h in rollout.h])
    low = np.concatenate([c[:-1] for c in rollout.c_low])
    return prev, nxt, low


def testbed_moments(rollout):
    """估计测试平台的二阶矩"""
    prev, nxt, low = _pair_arrays(rollout)
    count = prev.shape[0]
    if count == 0:
        raise ValidationError("没有可用的相邻时刻对")
    return TestbedMoments(
        r0=prev.T @ prev / count,
        r1=nxt.T @ prev / count,
        r_clow=low.T @ low / count,
        c_lh=low.T @ prev / count,
        c_hl_next=nxt.T @ low / count,
        pairs=count,
    )


def testbed_residuals(tb, rollout):
    """各相邻时刻对的预测残差 r(t) = h(t+1) - W_Gh h(t) - W_Ga W_A c^Low(t)，形状 (pairs, d_h)"""
    prev, nxt, low = _pair_arrays(rollout)
    return nxt - prev @ tb.w_gh.T - low @ (tb.w_ga @ tb.w_a).T


def testbed_loss(tb, rollout, actions=None):
    """显式测试平台损失

    E = ½ E_t[λ₁‖h(t+1) - ĥ(t+1)‖² + λ₂‖a(t) - W_A c^Low(t)‖²]

    Args:
        tb: LinearTestbed
        rollout: TestbedRollout
        actions: 可选的动作目标列表，每个序列 (T, d_A)

    Returns:
        float: 损失
    """
    r = testbed_residuals(tb, rollout)
    loss = 0.5 * tb.lambda1 * float(np.mean(np.sum(r * r, axis=1)))
    if actions is not None and tb.lambda2 != 0.0:
        a = np.concatenate([np.asarray(act, dtype=np.float64)[:-1] for act in actions])
        low = np.concatenate([c[:-1] for c in rollout.c_low])
        ra = a - low @ tb.w_a.T
        loss += 0.5 * tb.lambda2 * float(np.mean(np.sum(ra * ra, axis=1)))
    return loss


def testbed_closed_form_grads(tb, moments):
    """测试平台预测器权重的闭式梯度

    ∂E/∂W_Gh = λ₁[-R₁ + W_Gh R₀ + W_Ga W_A E[c^Low h ᵀ]]
    ∂E/∂W_Ga = λ₁[W_Ga W_A R_clow W_Aᵀ - E[h(t+1) c^Low(t)ᵀ] W_Aᵀ + W_Gh E[h c^Lowᵀ] W_Aᵀ]

    Returns:
        tuple: (dE/dW_Gh, dE/dW_Ga)
    """
    ga_a = tb.w_ga @ tb.w_a
    d_gh = tb.lambda1 * (-moments.r1 + tb.w_gh @ moments.r0 + ga_a @ moments.c_lh)
    d_ga = tb.lambda1 * (ga_a @ moments.r_clow @ tb.w_a.T
                         - moments.c_hl_next @ tb.w_a.T
                         + tb.w_gh @ moments.c_lh.T @ tb.w_a.T)
    return d_gh, d_ga


def scaled_h_matrix(rollout):
    """H 矩阵，列为各相邻时刻对前一时刻的 h(t)/√N，使 H Hᵀ = R₀"""
    prev = np.concatenate([h[:-1] for h in rollout.h])
    return prev.T / np.sqrt(max(prev.shape[0], 1))


def balance_residual(w_gh, h_matrix, lambda1):
    """平衡残差 ‖W_GhᵀW_Gh - λ₁HHᵀ‖_F / max(‖λ₁HHᵀ‖_F, 1e-30)

    两侧范数都小于 1e-12 时定义为 0。
    """
    w_gh = np.asarray(w_gh, dtype=np.float64)
    h_matrix = np.asarray(h_matrix, dtype=np.float64)
    lhs = w_gh.T @ w_gh
    rhs = lambda1 * (h_matrix @ h_matrix.T)
    lhs_norm = frobenius(lhs)
    rhs_norm = frobenius(rhs)
    if lhs_norm < 1e-12 and rhs_norm < 1e-12:
        return 0.0
    return frobenius(lhs - rhs) / max(rhs_norm, 1e-30)


def y_proxy(tb, rollout):
    """Y 项的量级 ‖E[h(t-1)h(t-1)ᵀ W_Ghᵀ r(t) h(t)ᵀ]‖_F"""
    total = np.zeros((tb.d_h, tb.d_h))
    count = 0
    ga_a = tb.w_ga @ tb.w_a
    for h, low in zip(rollout.h, rollout.c_low):
        if len(h) < 3:
            continue
        lagged, cur, nxt = h[:-2], h[1:-1], h[2:]
        r = nxt - cur @ tb.w_gh.T - low[1:-1] @ ga_a.T
        coeff = np.sum((lagged @ tb.w_gh.T) * r, axis=1)
        total += (lagged * coeff[:, None]).T @ cur
        count += lagged.shape[0]
    if count == 0:
        return 0.0
    return frobenius(total / count)
