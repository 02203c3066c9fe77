#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
序列数据模块

合成图像块序列（线性潜变量过程、程序化图像上的注视扫描路径），以及逐位精确的二进制序列文件格式。
"""
import logging
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from numerics import Rng, as_matrix, check_symmetric, random_orthonormal, spectral_radius
from utils.errors import ContractError, FormatError, ShapeError, ValidationError
from utils.logger import setup_logger

logger = setup_logger("sequence_data", logging.INFO)

MAGIC = b"RJPA1\x00"
VERSION = 1
HEADER_FORMAT = "<6sHIIIII"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
CRC_SIZE = 4

# 平稳化预热步数
BURN_IN = 100

# 划分编号，作为子流派生键的第一个分量
SPLIT_IDS = {"train": 0, "test": 1, "all": 2}

# 训练/测试序列数预设
SPLIT_PRESETS = {"desk": (64, 16), "full": (29000, 7000)}

# 单个文件允许的最大载荷（字节）
MAX_PAYLOAD = 1 << 40


@dataclass
class SequenceDataset:
    """图像块序列集合，data 形状 (count, T, height, width, channels)，float32"""
    data: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 5:
            raise ShapeError(f"数据集形状应为 (count, T, H, W, C)，实际维度 {data.ndim}")
        if data.shape[1] < 2:
            raise ValidationError(f"序列长度 T={data.shape[1]} 小于 2，无法做下一步预测")
        self.data = data

    @property
    def count(self):
        return self.data.shape[0]

    @property
    def T(self):
        return self.data.shape[1]

    @property
    def patch_shape(self):
        return tuple(self.data.shape[2:])

    @property
    def patch_dim(self):
        return int(np.prod(self.patch_shape))

    def __len__(self):
        return self.count

    def __iter__(self):
        for i in range(self.count):
            yield self.sequence(i)

    def sequence(self, i):
        """第 i 个序列，float64，形状 (T, H, W, C)"""
        return self.data[i].astype(np.float64)

    def flat(self, i):
        """第 i 个序列展平为 (T, H·W·C)"""
        return self.sequence(i).reshape(self.T, -1)

    def subset(self, indices):
        return SequenceDataset(self.data[list(indices)], dict(self.metadata))


@dataclass(frozen=True)
class LatentProcessParams:
    """线性潜变量过程 c(t) = U c(t-1) + b(t)，b ~ N(0, Σ)

    图像块 = offset + emission · c + observation_noise · ξ(t)，ξ 为逐像素独立的标准正态白噪声。
    """
    u: np.ndarray
    sigma: np.ndarray
    emission: np.ndarray
    patch_shape: tuple
    offset: float = 0.0
    observation_noise: float = 0.0

    def __post_init__(self):
        if self.observation_noise < 0:
            raise ValidationError(f"观测噪声标准差不能为负: {self.observation_noise}")
        u = as_matrix(self.u, "U")
        sigma = as_matrix(self.sigma, "Sigma")
        emission = as_matrix(self.emission, "emission")
        d = u.shape[0]
        if u.shape != (d, d) or sigma.shape != (d, d):
            raise ShapeError(f"U 与 Σ 必须是 {d}×{d} 方阵，实际 {u.shape}, {sigma.shape}")
        patch_shape = tuple(int(v) for v in self.patch_shape)
        if emission.shape != (int(np.prod(patch_shape)), d):
            raise ShapeError(f"发射矩阵形状应为 ({int(np.prod(patch_shape))}, {d})，实际 {emission.shape}")
        radius = spectral_radius(u)
        if radius >= 1.0:
            raise ValidationError(f"转移矩阵不稳定，谱半径 {radius:.4f} ≥ 1")
        try:
            check_symmetric(sigma)
        except ContractError as e:
            raise ValidationError(f"噪声协方差不对称: {str(e)}")
        eig = np.linalg.eigvalsh(0.5 * (sigma + sigma.T))
        if eig.size and eig.min() < -1e-10 * max(abs(eig).max(), 1.0):
            raise ValidationError(f"噪声协方差不是半正定，最小特征值 {eig.min():.3e}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "emission", emission)
        object.__setattr__(self, "patch_shape", patch_shape)

    @property
    def latent_dim(self):
        return self.u.shape[0]

    def noise_factor(self):
        """L 满足 L Lᵀ = Σ（半正定时用特征分解）"""
        values, vectors = np.linalg.eigh(0.5 * (self.sigma + self.sigma.T))
        return vectors * np.sqrt(np.clip(values, 0.0, None))


def make_latent_params(patch_shape, latent_dim, generator, tau_low=0.5, tau_high=0.99,
                       offset=0.0, observation_noise=0.0):
    """构造可预测的潜变量过程

    U = diag(τ)，τ 在 [tau_low, tau_high] 均匀分布，Σ = diag(1 - τ²) 使平稳方差为 1，
    发射矩阵各列正交归一。offset 与 observation_noise 为零时图像块完全由潜变量决定。
    """
    patch_dim = int(np.prod(patch_shape))
    if latent_dim > patch_dim:
        raise ValidationError(f"潜变量维度 {latent_dim} 超过图像块维度 {patch_dim}")
    taus = generator.uniform(tau_low, tau_high, latent_dim)
    emission = random_orthonormal(patch_dim, latent_dim, generator)
    return LatentProcessParams(np.diag(taus), np.diag(1.0 - taus ** 2), emission, tuple(patch_shape),
                               float(offset), float(observation_noise))


def _latent_sequence(params, T, rng, burn_in):
    noise = params.noise_factor()
    d = params.latent_dim
    c = np.zeros(d)
    out = np.empty((T, params.emission.shape[0]))
    for step in range(burn_in + T):
        c = params.u @ c + noise @ rng.normal(d)
        if step >= burn_in:
            out[step - burn_in] = params.emission @ c
    if params.observation_noise > 0:
        out += rng.normal(size=out.shape, scale=params.observation_noise)
    out += params.offset
    return out.reshape((T,) + params.patch_shape)


def _generate(build, count, seed, split, threads):
    split_id = SPLIT_IDS.get(split, SPLIT_IDS["all"])
    rngs = [Rng(seed, (split_id, i)) for i in range(count)]
    if threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(build, rngs))
    return [build(rng) for rng in rngs]


def gen_latent_sequences(params, count, T, seed, split="train", burn_in=BURN_IN, threads=1):
    """由线性潜变量过程生成序列

    每个序列使用独立子流 Rng(seed, (split_id, i))，预热 burn_in 步后开始记录。

    Args:
        params: LatentProcessParams
        count: 序列数
        T: 序列长度
        seed: 随机种子
        split: 划分名称
        burn_in: 预热步数
        threads: 并行线程数

    Returns:
        SequenceDataset: 生成的数据集
    """
    if count < 0 or T < 2:
        raise ValidationError(f"序列数不能为负且 T ≥ 2，实际 count={count}, T={T}")
    seqs = _generate(lambda rng: _latent_sequence(params, T, rng, burn_in), count, seed, split, threads)
    data = np.array(seqs, dtype=np.float32).reshape((count, T) + params.patch_shape)
    metadata = {"seed": seed, "generator": "latent", "split": split}
    logger.debug(f"生成潜变量序列 {count} 条，T={T}")
    return SequenceDataset(data, metadata)


@dataclass(frozen=True)
class ScanpathParams:
    """程序化图像与注视扫描路径参数"""
    image_size: int = 48
    blob_count: int = 32
    channels: int = 1
    blob_sigma_min: float = 2.0
    blob_sigma_max: float = 8.0
    step_scale: float = 2.0
    saccade_prob: float = 0.1


def procedural_image(params, rng):
    """随机取向高斯斑点之和，形状 (size, size, channels)，取值为正"""
    size = params.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    image = np.zeros((size, size, params.channels))
    for _ in range(params.blob_count):
        cy, cx = rng.uniform(0, size, 2)
        sy, sx = rng.uniform(params.blob_sigma_min, params.blob_sigma_max, 2)
        theta = rng.uniform(0.0, np.pi)
        amp = rng.uniform(0.5, 1.5, params.channels)
        dy, dx = yy - cy, xx - cx
        u = np.cos(theta) * dx + np.sin(theta) * dy
        v = -np.sin(theta) * dx + np.cos(theta) * dy
        blob = np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
        image += blob[:, :, None] * amp
    return image


def _scanpath_sequence(params, T, patch_size, rng):
    image = procedural_image(params, rng)
    limit = params.image_size - patch_size
    pos = rng.integers(0, limit + 1, 2)
    out = np.empty((T, patch_size, patch_size, params.channels))
    for t in range(T):
        if t > 0:
            if rng.uniform() < params.saccade_prob:
                pos = rng.integers(0, limit + 1, 2)
            else:
                step = np.rint(rng.normal(size=(2,), scale=params.step_scale)).astype(np.int64)
                pos = np.clip(pos + step, 0, limit)
        r, c = int(pos[0]), int(pos[1])
        out[t] = image[r:r + patch_size, c:c + patch_size]
    return out


def gen_scanpath_sequences(image_params, count, T, patch_size, seed, split="train", threads=1):
    """在程序化图像上模拟注视扫描并裁剪图像块

    注视点做随机游走：多数为小步移动，偶尔以 saccade_prob 的概率跳到任意位置。
    每个序列对应一张独立的图像。

    Returns:
        SequenceDataset: 生成的数据集
    """
    if patch_size > image_params.image_size or patch_size < 1:
        raise ValidationError(f"图像块大小 {patch_size} 必须在 [1, {image_params.image_size}] 内")
    if count < 0 or T < 2:
        raise ValidationError(f"序列数不能为负且 T ≥ 2，实际 count={count}, T={T}")
    seqs = _generate(lambda rng: _scanpath_sequence(image_params, T, patch_size, rng), count, seed, split, threads)
    shape = (count, T, patch_size, patch_size, image_params.channels)
    data = np.array(seqs, dtype=np.float32).reshape(shape)
    metadata = {"seed": seed, "generator": "scanpath", "split": split}
    logger.debug(f"生成扫描路径序列 {count} 条，T={T}，图像块 {patch_size}×{patch_size}")
    return SequenceDataset(data, metadata)


def split_counts(preset="desk", scale=1.0):
    """训练/测试序列数，按 scale 缩放"""
    if preset not in SPLIT_PRESETS:
        raise ValidationError(f"未知的划分预设: {preset}")
    train, test = SPLIT_PRESETS[preset]
    return max(1, int(round(train * scale))), max(1, int(round(test * scale)))


def make_splits(generate, train_count, test_count, **kwargs):
    """生成互不相交的训练集与测试集（各自使用不同的子流）"""
    train = generate(count=train_count, split="train", **kwargs)
    test = generate(count=test_count, split="test", **kwargs)
    return train, test


def variance_drift_ratio(ds):
    """前半段与后半段时间步的方差之比，用于平稳性检查"""
    half = ds.T // 2
    first = float(np.var(ds.data[:, :half].astype(np.float64)))
    second = float(np.var(ds.data[:, half:].astype(np.float64)))
    if second == 0.0:
        return 1.0 if first == 0.0 else float("inf")
    return first / second


def manifest_path(path):
    return f"{path}.manifest"


def write_manifest(ds, path):
    meta = dict(ds.metadata)
    meta.update({"count": ds.count, "T": ds.T})
    lines = [f"{key}={meta[key]}" for key in sorted(meta)]
    with open(manifest_path(path), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path):
    """读取清单文件，不存在时返回空字典"""
    target = manifest_path(path)
    if not os.path.exists(target):
        return {}
    meta = {}
    with open(target, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            try:
                meta[key] = int(value)
            except ValueError:
                meta[key] = value
    return meta


def write_dataset(ds, path, manifest=True):
    """写入序列文件（小端）

    magic "RJPA1\\0", u16 版本, u32 序列数, u32 T, u32 高, u32 宽, u32 通道,
    float32 载荷（序列、时间、行优先），末尾为载荷的 CRC-32。
    """
    count, T, height, width, channels = ds.data.shape
    payload = np.ascontiguousarray(ds.data, dtype="<f4").tobytes()
    header = struct.pack(HEADER_FORMAT, MAGIC, VERSION, count, T, height, width, channels)
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(header + payload + crc)
    if manifest:
        write_manifest(ds, path)
    logger.info(f"数据集已写入 {path}: {count} 条序列, T={T}, 图像块 {height}×{width}×{channels}")


def read_dataset(path):
    """读取序列文件并校验

    Raises:
        FormatError: 文件头错误、截断、维度溢出或校验和不符，附带出错偏移量
    """
    with open(path, "rb") as f:
        data = f.read()

    if data[:len(MAGIC)] != MAGIC:
        raise FormatError("序列文件头错误", 0)
    if len(data) < HEADER_SIZE:
        raise FormatError("文件头被截断", len(data))
    _, version, count, T, height, width, channels = struct.unpack_from(HEADER_FORMAT, data, 0)
    if version != VERSION:
        raise FormatError(f"不支持的文件版本 {version}", len(MAGIC))

    payload_bytes = count * T * height * width * channels * 4
    if payload_bytes > MAX_PAYLOAD:
        raise FormatError(f"维度溢出: {count}×{T}×{height}×{width}×{channels}", len(MAGIC) + 2)
    expected = HEADER_SIZE + payload_bytes + CRC_SIZE
    if len(data) < expected:
        raise FormatError(f"数据被截断，需要 {expected} 字节，实际 {len(data)}", len(data))
    if len(data) > expected:
        raise FormatError(f"文件末尾有多余的 {len(data) - expected} 字节", expected)

    payload = data[HEADER_SIZE:HEADER_SIZE + payload_bytes]
    (crc,) = struct.unpack_from("<I", data, HEADER_SIZE + payload_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FormatError("载荷校验和不符", HEADER_SIZE + payload_bytes)

    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    arr = values.reshape((count, T, height, width, channels))
    metadata = {k: v for k, v in read_manifest(path).items() if k in ("seed", "generator", "split")}
    return SequenceDataset(arr, metadata)
