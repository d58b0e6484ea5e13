"""特徵萃取超網路：Gram、上三角向量、對比損失、類別平均向量庫"""

import numpy as np
import pytest

from app.core.exceptions import AbsentClassError, ConfigError, ContractError, DimensionError
from app.core.gradcheck import gradcheck
from app.core.tensor import Tensor
from app.models.feature_extractor import (
    ClassAverageBank,
    FeatureExtractor,
    average_feature,
    contrastive_loss,
    extract_features,
    gram,
    upper_tri_vec,
)
from app.schemas.config import BackboneConfig, FeatureConfig
from tests.conftest import tiny_values

KEYS = {0: "drop", 1: "streak", 2: "flake"}


def vec(*values) -> Tensor:
    return Tensor(list(values), dtype="f64")


@pytest.fixture
def feature_net_f64() -> FeatureExtractor:
    return FeatureExtractor(FeatureConfig(dim=4), BackboneConfig(**tiny_values("f64")["model"]))


class TestGram:
    def test_constant_map(self):
        g = gram(Tensor(np.ones((2, 2, 2)), dtype="f64")).numpy()
        np.testing.assert_allclose(g, [[1.0, 1.0], [1.0, 1.0]])

    def test_double_loop_oracle(self, rng):
        f = rng.standard_normal((3, 4, 4))
        g = gram(Tensor(f, dtype="f64")).numpy()
        expected = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                expected[i, j] = np.sum(f[i] * f[j]) / 16.0
        np.testing.assert_allclose(g, expected, atol=1e-6)
        np.testing.assert_allclose(g, g.T)

    def test_spatial_permutation_invariance(self, rng):
        for _ in range(100):
            f = rng.standard_normal((3, 4, 4))
            perm = rng.permutation(16)
            shuffled = f.reshape(3, 16)[:, perm].reshape(3, 4, 4)
            np.testing.assert_allclose(
                gram(Tensor(shuffled, dtype="f64")).numpy(),
                gram(Tensor(f, dtype="f64")).numpy(),
                rtol=0, atol=1e-12,
            )

    def test_rejects_non_map(self):
        with pytest.raises(DimensionError):
            gram(Tensor(np.ones((2, 4))))
        with pytest.raises(DimensionError):
            gram(Tensor(np.ones((2, 0, 3))))

    def test_gradcheck(self, rng):
        f = Tensor(rng.standard_normal((3, 2, 3)), dtype="f64")
        assert gradcheck(gram, [f]) < 1e-5


class TestUpperTri:
    def test_length(self):
        assert upper_tri_vec(Tensor(np.ones((2, 2)))).shape == (3,)

    def test_identity(self):
        out = upper_tri_vec(Tensor(np.eye(3), dtype="f64")).numpy()
        np.testing.assert_array_equal(out, [1, 0, 0, 1, 0, 1])

    def test_index_enumeration_oracle(self, rng):
        a = rng.standard_normal((4, 4))
        g = a + a.T
        expected = [g[i, j] for i in range(4) for j in range(i, 4)]
        np.testing.assert_allclose(upper_tri_vec(Tensor(g, dtype="f64")).numpy(), expected)

    def test_non_square(self):
        with pytest.raises(DimensionError):
            upper_tri_vec(Tensor(np.ones((2, 3))))


class TestFeatureExtractor:
    def test_output_dim_and_determinism(self, tiny_config, image16):
        net = FeatureExtractor(tiny_config.feature, tiny_config.model)
        a = extract_features(image16, net)
        b = extract_features(image16, net)
        assert a.dim == tiny_config.feature.dim
        assert a.source == "computed"
        np.testing.assert_array_equal(a.numpy(), b.numpy())

    def test_different_images_differ(self, tiny_config, rng):
        net = FeatureExtractor(tiny_config.feature, tiny_config.model)
        a = net(Tensor(rng.uniform(size=(3, 16, 16))))
        b = net(Tensor(rng.uniform(size=(3, 16, 16))))
        assert not np.array_equal(a.numpy(), b.numpy())

    def test_bad_spatial_size(self, feature_net_f64):
        with pytest.raises(DimensionError):
            feature_net_f64(Tensor(np.zeros((3, 10, 10)), dtype="f64"))
        with pytest.raises(DimensionError):
            feature_net_f64(Tensor(np.zeros((1, 8, 8)), dtype="f64"))

    def test_needs_two_scales(self):
        values = tiny_values()["model"]
        values.update(scales=1, channels=[4], heads=[1], strides=[2], blocks=[1], intra_blocks=[1])
        with pytest.raises(ConfigError):
            FeatureExtractor(FeatureConfig(dim=4), BackboneConfig(**values))

    def test_gradcheck_wrt_image(self, feature_net_f64, rng):
        image = Tensor(rng.uniform(size=(3, 8, 8)), dtype="f64")
        assert gradcheck(feature_net_f64, [image], max_entries=24) < 1e-5


class TestContrastiveLoss:
    def test_identical_same_class(self):
        loss = contrastive_loss([vec(1.0, 2.0), vec(1.0, 2.0)], [0, 0], margin=0.7)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_identical_different_class(self):
        loss = contrastive_loss([vec(1.0, 2.0), vec(1.0, 2.0)], [0, 1])
        assert loss.item() == pytest.approx(1.0, abs=1e-9)

    def test_pair_enumeration_oracle(self):
        vectors = [vec(1.0, 0.0), vec(0.0, 1.0), vec(1.0, 0.0)]
        labels = [0, 0, 1]
        expected = 0.0
        for a in range(3):
            for b in range(a + 1, 3):
                d = float(np.dot(vectors[a].data, vectors[b].data))
                expected += max(0.5 - d, 0.0) if labels[a] == labels[b] else d
        loss = contrastive_loss(vectors, labels, margin=0.5)
        assert expected == pytest.approx(1.5)
        assert loss.item() == pytest.approx(expected, abs=1e-9)

    def test_errors(self):
        with pytest.raises(ContractError):
            contrastive_loss([vec(1.0, 0.0)], [0])
        with pytest.raises(ContractError):
            contrastive_loss([vec(1.0, 0.0), vec(0.0, 1.0)], [0])
        with pytest.raises(ContractError):
            contrastive_loss([vec(1.0, 0.0), vec(0.0, 1.0)], [0, 1], margin=0.0)

    def test_gradcheck(self, rng):
        vectors = [Tensor(rng.standard_normal(5), dtype="f64") for _ in range(4)]
        labels = [0, 0, 1, 2]

        def loss(*vs):
            return contrastive_loss(list(vs), labels, margin=0.9)

        assert gradcheck(loss, vectors) < 1e-5


class TestAverageFeature:
    def test_single_vector(self):
        out = average_feature([np.array([0.3, -1.0])])
        np.testing.assert_allclose(out.numpy(), [0.3, -1.0], rtol=1e-6)
        assert out.source == "class_average"

    def test_repeated_vector(self):
        u = np.array([2.0, 5.0], dtype=np.float64)
        np.testing.assert_array_equal(average_feature([u, u]).numpy(), u)

    def test_analytic_mean(self):
        out = average_feature([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        np.testing.assert_allclose(out.numpy(), [0.5, 0.5])

    def test_class_filter(self):
        vectors = [np.array([1.0]), np.array([3.0]), np.array([10.0])]
        out = average_feature(vectors, class_filter=1, labels=[1, 1, 2])
        np.testing.assert_allclose(out.numpy(), [2.0])

    def test_empty_class(self):
        with pytest.raises(AbsentClassError):
            average_feature([np.array([1.0])], class_filter=2, labels=[0])


class TestClassAverageBank:
    @pytest.fixture
    def bank(self) -> ClassAverageBank:
        vectors = [np.array([1.0, 0.0]), np.array([3.0, 0.0]), np.array([0.0, 2.0])]
        return ClassAverageBank.from_vectors(vectors, [0, 0, 2], KEYS)

    def test_entries_and_counts(self, bank):
        assert bank.keys() == ["drop", "flake"]
        assert bank.counts() == {"drop": 2, "flake": 1}
        np.testing.assert_allclose(bank.get("drop").numpy(), [2.0, 0.0])
        assert "streak" not in bank
        assert len(bank) == 2

    def test_absent_class(self, bank):
        with pytest.raises(AbsentClassError, match="streak"):
            bank.get("streak")

    def test_frozen(self, bank):
        assert bank.frozen
        with pytest.raises(ContractError):
            bank.set("streak", np.zeros(2), 1)

    def test_state_round_trip_keeps_order(self, bank):
        restored = ClassAverageBank.from_state(bank.state_dict(), bank.counts())
        assert restored.keys() == bank.keys()
        np.testing.assert_array_equal(restored.get("flake").numpy(), bank.get("flake").numpy())

    def test_dimension_mismatch(self):
        bank = ClassAverageBank()
        bank.set("drop", np.zeros(2), 1)
        with pytest.raises(DimensionError):
            bank.set("flake", np.zeros(3), 1)
