#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
测试公共夹具
"""
import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from cells import RgcWeights  # noqa: E402
from jepa import RGC_KEYS, build_model  # noqa: E402
from numerics import Rng  # noqa: E402

PATCH_DIM = 5


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def make_model():
    """随机小模型：对角或稠密门控，W_Gh 偏离单位阵"""

    def factory(n=4, seed=0, diagonal_gates=True, stop_gradient=False, predictor="linear",
                loss_kind="squared", scale=0.5):
        gen = Rng(seed, (1,)).generator
        model = build_model(n, n, PATCH_DIM, gen, predictor=predictor, embed_init="random",
                            diagonal_gates=diagonal_gates, stop_gradient=stop_gradient, loss_kind=loss_kind)
        rgc = RgcWeights.random(n, gen, scale, diagonal_gates=diagonal_gates)
        params = {key: w for key, w in zip(RGC_KEYS, rgc.w)}
        if predictor == "linear":
            params["W_Gh"] = np.eye(n) + gen.normal(0.0, 0.2, (n, n))
        return model.with_params(params)

    return factory


@pytest.fixture
def patches():
    """随机图像块序列工厂"""

    def factory(T=6, seed=0):
        return Rng(seed, (2,)).normal((T, PATCH_DIM))

    return factory
