"""
测试公共夹具

提供：
1. 小规模运行配置（几秒内可完成训练与评估）
2. 会话级合成语料与默认切分
3. 64 位精度上下文（梯度校验用）
4. 基于小配置的模型与训练语料

作者：ST-Instruct
版本：0.1.0
"""

import copy
from pathlib import Path

import numpy as np
import pytest

from st_instruct import autodiff as ad
from st_instruct.config import RunConfig
from st_instruct.model import STInstructModel
from st_instruct.st_data import build_synthetic_corpus, default_split
from st_instruct.training import build_training_corpus

PROJECT_ROOT = Path(__file__).resolve().parents[1]
CONFIG_DIR = PROJECT_ROOT / "configs"

TINY_CONFIG = {
    "data": {
        "regions": 8,
        "days": 4,
        "interval_minutes": 60,
        "history_length": 6,
        "prediction_length": 6,
        "train_stride": 12,
        "eval_stride": 12,
        "train_days": 3,
        "n_train_regions": 4,
        "n_zero_shot_regions": 4,
        "max_train_records_per_dataset": 8,
        "max_eval_records_per_dataset": 6,
        "cross_city_regions": 6,
    },
    "encoder": {"n_layers": 2, "gate_kernel": 2, "dilation": [1, 2], "d_in": 8, "d_out": 8,
                "d_out_prime": 8, "d": 16},
    "lm": {"n_layers": 1, "n_heads": 2, "d_model": 32, "context_length": 512, "regression_hidden": 16},
    "train": {"epochs": 2, "batch_size": 4, "learning_rate": 0.003, "seed": 1},
    "eval": {"seed": 1, "max_new_tokens": 40},
}


def tiny_config_dict(**overrides):
    """深拷贝小配置并按块覆盖字段"""
    data = copy.deepcopy(TINY_CONFIG)
    for block, values in overrides.items():
        data.setdefault(block, {}).update(values)
    return data


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig.from_dict(tiny_config_dict())


@pytest.fixture(scope="session")
def tiny_data():
    """(tensors, splits)：三套合成数据集与默认切分"""
    config = RunConfig.from_dict(tiny_config_dict())
    tensors = build_synthetic_corpus(config.data)
    splits = {name: default_split(tensor, config.data) for name, tensor in tensors.items()}
    return tensors, splits


@pytest.fixture(scope="session")
def tiny_corpus(tiny_data):
    tensors, splits = tiny_data
    config = RunConfig.from_dict(tiny_config_dict())
    return build_training_corpus(config, tensors, splits)


def make_model(config: RunConfig, corpus, seed: int = 1) -> STInstructModel:
    records = [record for group in corpus.values() for record in group]
    return STInstructModel.create(config, STInstructModel.build_tokenizer(records), seed)


@pytest.fixture
def tiny_model(tiny_config, tiny_corpus) -> STInstructModel:
    return make_model(tiny_config, tiny_corpus)


@pytest.fixture
def float64():
    """在 64 位精度下创建张量与参数"""
    with ad.precision(np.float64):
        yield
