"""共用 fixtures：迷你設定、迷你資料集、已建立向量庫的模型組合"""

import numpy as np
import pytest

from app.core.tensor import Tensor
from app.schemas.config import ExperimentConfig
from app.services.model_store import ModelBundle
from app.services.weather_synth import make_dataset


def tiny_values(dtype: str = "f32", **model) -> dict:
    """兩個尺度、通道 4 / 8 的最小可訓練設定"""
    return {
        "model": {
            "scales": 2,
            "channels": [4, 8],
            "heads": [1, 2],
            "strides": [2, 2],
            "blocks": [1, 1],
            "intra_blocks": [1, 1],
            "decoder_queries": 2,
            "dtype": dtype,
            **model,
        },
        "feature": {"dim": 8},
        "train": {
            "pretrain_steps": 4,
            "restore_steps": 4,
            "finetune_steps": 2,
            "batch_size": 3,
            "val_every": 2,
            "val_samples": 3,
        },
        "data": {
            "counts": [10, 10, 10],
            "height": 16,
            "width": 16,
            "eval_height": 16,
            "eval_width": 16,
            "hybrid_count": 3,
        },
    }


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return ExperimentConfig.model_validate(tiny_values())


@pytest.fixture
def tiny_config_f64() -> ExperimentConfig:
    """f64 且超網路輸出層非零初始化（梯度檢查用）"""
    return ExperimentConfig.model_validate(tiny_values("f64", hyper_out_init_scale=0.5))


@pytest.fixture(scope="session")
def tiny_dataset():
    config = ExperimentConfig.model_validate(tiny_values())
    return make_dataset(config.data, show_progress=False)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def image16(rng) -> Tensor:
    return Tensor(rng.uniform(0.0, 1.0, size=(3, 16, 16)), dtype="f32")


@pytest.fixture
def pretrained_bundle(tiny_config, tiny_dataset) -> ModelBundle:
    """完成（極短）第一階段、帶有類別平均向量庫的模型組合"""
    from app.services.trainer import Trainer

    bundle = ModelBundle(tiny_config)
    Trainer(bundle, show_progress=False).pretrain_feature_net(tiny_dataset)
    return bundle
