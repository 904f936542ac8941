import dataclasses
import os

import numpy as np
import pytest

from config.settings import DatagenConfig, TrainConfig
from core.datagen import GenConfig, generate, split
from core.hierarchy import lego15_default

SLOW = os.environ.get("HIERFUSE_SLOW") == "1"

slow = pytest.mark.skipif(not SLOW, reason="设置 HIERFUSE_SLOW=1 运行完整网格检查")


@pytest.fixture(scope="session")
def tree():
    return lego15_default()


def small_gen_config(tree, **overrides) -> GenConfig:
    """小规模生成配置：8 维输入，每类 6 个源域样本、8 个目标域样本"""
    settings = DatagenConfig(d_in=8, per_class_source=6, per_class_target=8)
    cfg = GenConfig.from_settings(settings, tree)
    return dataclasses.replace(cfg, **overrides)


def small_train_config(**overrides) -> TrainConfig:
    """两轮、窄网络的训练配置"""
    base = dict(epochs=2, d_feat=4, hidden_dims=(8,), lr=0.01, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_gen_cfg(tree):
    return small_gen_config(tree)


@pytest.fixture(scope="session")
def small_samples(small_gen_cfg):
    return generate(small_gen_cfg)


@pytest.fixture
def small_splits(small_samples, small_gen_cfg):
    # 15 类 × 8 个目标域样本；每类 2 个进入训练、1 个进入验证
    return split(small_samples, (30, 15), seed=0, meta={"gen": small_gen_cfg.to_dict()})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
