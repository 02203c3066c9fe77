#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
配置管理模块，负责加载、合并和校验配置
"""
import copy
import json
import logging
import os

import yaml

from utils.errors import ConfigError
from utils.logger import setup_logger

# 内置默认配置，配置文件与命令行覆盖都只能修改这里已有的键
DEFAULTS = {
    "model": {
        "n": 120,
        "d_h": 120,
        "predictor": "linear",
        "mlp_width": None,
        "gate_activation": "tanh",
        "diagonal_gates": True,
        "loss_kind": "squared",
        "lambda1": 1.0,
        "stop_gradient": True,
        "rgc_init_scale": 0.0,
        "embed_init": "identity",
        "mlp_init_scale": 0.1,
        "featurizer": "pooling",
    },
    "data": {
        "generator": "latent",
        "preset": "desk",
        "scale": 1.0,
        "T": 100,
        "seed": 0,
        "patch_shape": [16, 16, 1],
        "latent_dim": 120,
        "tau_low": 0.5,
        "tau_high": 0.99,
        "burn_in": 100,
        "offset": 2.0,
        "observation_noise": 1.0,
        "image_size": 48,
        "blob_count": 32,
        "saccade_prob": 0.1,
        "step_scale": 2.0,
        "train_path": None,
        "test_path": None,
    },
    "train": {
        "mode": "bptt",
        "learning_rate": 0.05,
        "weight_decay": 0.0,
        "epochs": 6,
        "batch_size": 1,
        "cadence": "per-sequence",
        "psi": "mean",
        "divergence_threshold": 1e6,
        "min_drop": 0.2,
        "flat_tolerance": 0.05,
    },
    "testbed": {
        "dims": [16, 8, 8],
        "taus": [0.5, 0.5],
        "d_action": 2,
        "lambda1": 1.0,
        "lambda2": 0.0,
        "eta": 0.01,
        "learning_rate": 0.3,
        "iterations": 6000,
        "encoder_lr": None,
        "lag_preconditioner": False,
        "sequences": 16,
        "T": 50,
        "top_scale": 0.25,
        "w_gh_scale": 0.01,
        "tolerance": 0.05,
        "tolerance_without_decay": 0.1,
        "transient": 0.2,
    },
    "collapse": {
        "n": 120,
        "d_h": 120,
        "epochs": 6,
        "learning_rate": 0.1,
        "featurizer": "pca",
        "offset": 0.0,
        "observation_noise": 0.0,
        "min_ratio": 0.4,
        "max_ratio": 0.1,
    },
    "analysis": {
        "moment_n": 1,
        "tau": 0.5,
        "samples": 200000,
        "burn_in": 1000,
        "tau_grid": [0.1, 0.2, 0.3, 0.4, 0.5],
        "instances": 10,
    },
    "bench": {
        "sizes": [32, 64, 128, 256],
        "T": 50,
        "repeats": 3,
        "modes": ["rfp", "full_rtrl", "bptt"],
        "float32": False,
        "min_slope": 1.7,
        "max_slope": 2.5,
    },
    "gradcheck": {
        "n": 8,
        "T": 12,
        "gates": "diagonal",
        "instances": 50,
        "rfp_tol": 1e-6,
        "rtrl_tol": 1e-12,
        "dense_scales": [0.1, 0.01, 0.001],
    },
    "runtime": {
        "seed": 0,
        "threads": 1,
        "out_dir": "runs",
        "log_dir": None,
    },
}

RESOLVED_NAME = "resolved_config.yaml"


def _check_value(key, default, value):
    """只检查能确定类型的键：布尔值必须是布尔，数值必须是数值"""
    if default is None or value is None:
        return
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"配置项 {key} 应为布尔值，实际 {value!r}", key)
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"配置项 {key} 应为数值，实际 {value!r}", key)
    elif isinstance(default, list) and not isinstance(value, (list, tuple)):
        raise ConfigError(f"配置项 {key} 应为列表，实际 {value!r}", key)


def _merge(base, updates, prefix=""):
    for key, value in updates.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"未知的配置项: {dotted}", dotted)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"配置项 {dotted} 应为一个小节", dotted)
            _merge(base[key], value, f"{dotted}.")
        else:
            _check_value(dotted, base[key], value)
            base[key] = list(value) if isinstance(value, tuple) else value


class Config:
    """配置类，负责加载和管理配置"""

    def __init__(self, config_file=None, overrides=None):
        """初始化配置

        Args:
            config_file: YAML 或 JSON 配置文件路径，为 None 时只使用默认值
            overrides: 命令行覆盖，键为 "section.key" 形式，值为 None 的项忽略
        """
        self.logger = setup_logger("config", logging.INFO)
        self.logger.info("加载配置...")

        self.config_file = config_file
        self.config_type = None
        if config_file is not None:
            if config_file.endswith((".yaml", ".yml")):
                self.config_type = "yaml"
            elif config_file.endswith(".json"):
                self.config_type = "json"
            else:
                raise ConfigError("不支持的配置文件格式，请使用YAML或JSON格式", "config")

        self.data = copy.deepcopy(DEFAULTS)
        if config_file is not None:
            self._load_config()
        if overrides:
            self.apply_overrides(overrides)

        self.logger.info("配置加载完成")

    def _load_config(self):
        """加载配置文件并合并到默认值上"""
        if not os.path.exists(self.config_file):
            self.logger.error(f"配置文件不存在: {self.config_file}")
            raise ConfigError(f"配置文件不存在: {self.config_file}", "config")
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                if self.config_type == "yaml":
                    self.logger.info(f"正在加载YAML配置文件: {self.config_file}")
                    loaded = yaml.safe_load(f)
                else:
                    self.logger.info(f"正在加载JSON配置文件: {self.config_file}")
                    loaded = json.load(f)
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            self.logger.error(f"解析配置文件失败: {str(e)}")
            raise ConfigError(f"无法解析配置文件 {self.config_file}: {str(e)}", "config")

        if loaded is None:
            return
        if not isinstance(loaded, dict):
            raise ConfigError("配置文件顶层必须是映射", "config")
        _merge(self.data, loaded)
        self.logger.info(f"从 {self.config_file} 加载了配置")

    def apply_overrides(self, overrides):
        """应用命令行覆盖

        Args:
            overrides: {"section.key": value}
        """
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if not key:
                raise ConfigError(f"覆盖项必须是 section.key 形式: {dotted}", dotted)
            _merge(self.data, {section: {key: value}})
            self.logger.debug(f"命令行覆盖 {dotted}={value!r}")

    def get(self, section, key=None):
        """读取一个小节或其中的一项

        Args:
            section: 小节名
            key: 键名，为 None 时返回整个小节的副本

        Returns:
            配置值
        """
        if section not in self.data:
            raise ConfigError(f"未知的配置小节: {section}", section)
        if key is None:
            return copy.deepcopy(self.data[section])
        if key not in self.data[section]:
            raise ConfigError(f"未知的配置项: {section}.{key}", f"{section}.{key}")
        return self.data[section][key]

    def resolved(self):
        """完整的解析后配置"""
        return copy.deepcopy(self.data)

    def dump(self):
        return yaml.safe_dump(self.data, default_flow_style=False, allow_unicode=True, sort_keys=False)

    def save_config(self, path):
        """以 YAML 保存解析后的配置"""
        try:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                f.write(self.dump())
            self.logger.info(f"配置已保存到 {path}")
        except OSError as e:
            self.logger.error(f"保存配置失败: {str(e)}", exc_info=True)
            raise

    def echo(self, out_dir):
        """在日志中输出解析后的配置，并写入 out_dir/resolved_config.yaml"""
        self.logger.info("解析后的配置:\n" + self.dump())
        path = os.path.join(out_dir, RESOLVED_NAME)
        self.save_config(path)
        return path
