"""參數量與 MACs 統計"""

import numpy as np
import pytest

from app.config import build_config
from app.core import functional as F
from app.core.exceptions import DimensionError
from app.core.tensor import Tensor
from app.models.hyper import ParameterStore
from app.models.layers import Linear
from app.services.compute import count_compute, model_family
from tests.conftest import tiny_values


def lin(n: int, d_in: int, d_out: int) -> int:
    return n * d_in * d_out


def conv(h: int, w: int, c_in: int, c_out: int, k: int = 3) -> int:
    return h * w * c_in * c_out * k * k


def block(n: int, c: int) -> int:
    """Q/K/V + QKᵀ + AV + 輸出投影 + 擴張 + 3×3 深度卷積 + 收縮"""
    return 3 * lin(n, c, c) + 2 * n * n * c + lin(n, c, c) + lin(n, c, 2 * c) + 2 * c * n * 9 + lin(n, 2 * c, c)


def intra(n: int, c: int) -> int:
    return lin(n, c, 4 * c) + block(4 * n, c) + lin(n, 4 * c, c)


def cross(nq: int, nk: int, c: int) -> int:
    return lin(nq, c, c) + 2 * lin(nk, c, c) + 2 * nq * nk * c


class TestLayerMacs:
    def test_linear_on_tokens(self, rng):
        layer = Linear(4, 8, rng)
        with F.count_macs() as counter:
            layer(Tensor(np.ones((64, 4))))
        assert counter.total == 2048


class TestHandTally:
    """非自適應的兩尺度玩具設定（8×8 輸入），逐層手算"""

    @pytest.fixture
    def plain_config(self):
        return build_config(tiny_values(adapt_local=False, adapt_global=False, adapt_channel=False))

    def test_restore_macs(self, plain_config):
        stage0 = conv(4, 4, 3, 4) + block(16, 4) + intra(16, 4)
        stage1 = conv(2, 2, 4, 8) + block(4, 8) + intra(4, 8)
        decoder = (
            cross(2, 4, 8) + lin(2, 8, 8) + lin(2, 8, 16) + lin(2, 16, 8)
            + cross(4, 2, 8) + lin(4, 8, 8)
            + lin(4, 8, 16) + 16 * 4 * 9 + lin(4, 16, 8)
        )
        tails = conv(4, 4, 8, 4) + conv(8, 8, 4, 4) + conv(8, 8, 4, 3)
        expected = stage0 + stage1 + decoder + tails
        assert expected == 99904
        assert count_compute(plain_config, 8, 8).macs_restore_only == expected

    def test_total_adds_feature_net(self, plain_config):
        gram = lin(4, 16, 4) + lin(8, 4, 8)
        projectors = lin(1, 10, 16) + lin(1, 16, 8) + lin(1, 36, 16) + lin(1, 16, 8)
        feature = conv(4, 4, 3, 4) + block(16, 4) + conv(2, 2, 4, 8) + block(4, 8) + gram + projectors + lin(1, 16, 8)
        assert feature == 12640
        report = count_compute(plain_config, 8, 8)
        assert report.macs == 99904 + feature
        assert report.params[ParameterStore.ADAPTIVE] == 0


class TestCountCompute:
    def test_report_fields(self, tiny_config):
        report = count_compute(tiny_config, 16, 16)
        assert (report.height, report.image_width, report.width) == (16, 16, 1.0)
        assert set(report.params) == {ParameterStore.FIXED, ParameterStore.ADAPTIVE, "feature"}
        assert report.total_params == report.params["fixed"] + report.params["feature"]
        assert set(report.macs_by_op) <= {"matmul", "conv2d", "depthwise_conv2d"}
        assert sum(report.macs_by_op.values()) == report.macs
        assert 0 < report.macs_restore_only < report.macs

    def test_independent_of_image_content(self, tiny_config):
        assert count_compute(tiny_config, 16, 16, seed=0).macs == count_compute(tiny_config, 16, 16, seed=9).macs

    def test_larger_images_cost_more(self, tiny_config):
        assert count_compute(tiny_config, 32, 32).macs > count_compute(tiny_config, 16, 16).macs

    def test_defaults_to_eval_size(self, tiny_config):
        report = count_compute(tiny_config)
        assert (report.height, report.image_width) == (16, 16)

    def test_indivisible_size(self, tiny_config):
        with pytest.raises(DimensionError):
            count_compute(tiny_config, 18, 16)


class TestModelFamily:
    def test_small_medium_large_ordering(self, tiny_config):
        family = model_family(tiny_config, 16, 16)
        assert list(family) == ["S", "M", "L"]
        assert [family[k].width for k in family] == [0.5, 0.75, 1.0]
        macs = [family[k].macs for k in family]
        params = [family[k].total_params for k in family]
        assert macs[0] < macs[1] < macs[2]
        assert params[0] < params[1] < params[2]
