"""合成天氣資料：乾淨影像、退化、資料集切分與可重現性"""

from collections import Counter

import numpy as np
import pytest

from app.core.exceptions import ConfigError, ContractError
from app.schemas.config import DataConfig
from app.services.weather_synth import (
    DROP,
    FLAKE,
    HYBRID_ORDER,
    STREAK_HAZE,
    default_registry,
    degrade,
    gen_clean,
    make_dataset,
    make_hybrid_set,
    regenerate,
    split_indices,
)


class TestCleanImages:
    def test_deterministic(self):
        np.testing.assert_array_equal(gen_clean(7, 32, 32), gen_clean(7, 32, 32))

    def test_range_shape_dtype(self):
        img = gen_clean(3, 16, 24)
        assert img.shape == (3, 16, 24)
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_different_seeds_differ(self):
        diffs = [np.abs(gen_clean(2 * i, 32, 32) - gen_clean(2 * i + 1, 32, 32)).mean() for i in range(20)]
        assert min(diffs) > 0.01

    def test_too_small(self):
        with pytest.raises(ConfigError):
            gen_clean(0, 8, 32)


class TestDegrade:
    @pytest.fixture
    def clean(self):
        return gen_clean(11, 32, 32)

    def test_deterministic_and_clamped(self, clean):
        for cls in default_registry.classes():
            a = degrade(clean, [cls], 0.7, 99)
            np.testing.assert_array_equal(a, degrade(clean, [cls], 0.7, 99))
            assert a.min() >= 0.0 and a.max() <= 1.0
            assert not np.array_equal(a, clean)

    def test_flake_only_adds_light(self):
        for seed in range(20):
            clean = gen_clean(seed, 32, 32)
            assert degrade(clean, [FLAKE], 1.0, seed).mean() >= clean.mean()

    def test_flake_is_local(self):
        clean = gen_clean(5, 64, 64)
        out = degrade(clean, [FLAKE], 0.01, 5)
        changed = np.any(out != clean, axis=0).sum()
        assert 0 < changed <= 150 * np.pi * 9

    def test_streak_haze_veil_raises_floor(self, clean):
        out = degrade(clean, [STREAK_HAZE], 1.0, 3)
        assert out.min() >= 0.3 - 1e-6

    def test_composition_law(self, clean):
        both = degrade(clean, [STREAK_HAZE, FLAKE], 0.6, 42)
        first = degrade(clean, [STREAK_HAZE], 0.6, 42)
        np.testing.assert_array_equal(both, degrade(first, [FLAKE], 0.6, 42, first_stage=1))

    def test_errors(self, clean):
        with pytest.raises(ContractError):
            degrade(clean, [], 0.5, 0)
        with pytest.raises(ContractError):
            degrade(clean, [DROP], 0.0, 0)
        with pytest.raises(ContractError):
            degrade(clean, [DROP], 1.5, 0)


class TestRegistry:
    def test_default_triad(self):
        assert [(c.id, c.key, c.name) for c in default_registry.classes()] == [
            (0, "drop", "DROP"), (1, "streak", "STREAK_HAZE"), (2, "flake", "FLAKE"),
        ]
        assert HYBRID_ORDER == [STREAK_HAZE, FLAKE]

    def test_lookup_by_any_name(self):
        assert default_registry.get("streak") is STREAK_HAZE
        assert default_registry.get("FLAKE") is FLAKE
        assert default_registry.get(0) is DROP
        assert default_registry.parse("streak, flake") == [STREAK_HAZE, FLAKE]
        with pytest.raises(ConfigError):
            default_registry.get("hail")

    def test_bitmask(self):
        mask = default_registry.to_mask([FLAKE, STREAK_HAZE])
        assert mask == 0b110
        assert default_registry.from_mask(mask) == [STREAK_HAZE, FLAKE]
        with pytest.raises(ContractError):
            default_registry.from_mask(0)


class TestDataset:
    def test_split_arithmetic(self):
        tags = Counter()
        for cls_id in range(3):
            tags.update(split_indices(200, cls_id))
        assert tags == {"train": 480, "val": 60, "test": 60}

    def test_counts_and_per_class_balance(self, tiny_dataset):
        assert len(tiny_dataset) == 30
        per_split = Counter((s.split, s.label) for s in tiny_dataset)
        for split, expected in (("train", 8), ("val", 1), ("test", 1)):
            for cls_id in range(3):
                assert abs(per_split[(split, cls_id)] - expected) <= 1

    def test_samples_regenerate_bit_exactly(self, tiny_dataset):
        for sample in tiny_dataset[::7]:
            again = regenerate(sample)
            np.testing.assert_array_equal(again.clean, sample.clean)
            np.testing.assert_array_equal(again.degraded, sample.degraded)
            assert again.severity == sample.severity
            assert 0.0 < sample.severity <= 1.0

    def test_size_override(self):
        cfg = DataConfig(counts=[1, 1, 1])
        samples = make_dataset(cfg, height=64, width=48, show_progress=False)
        assert {s.clean.shape for s in samples} == {(3, 64, 48)}

    def test_counts_must_match_registry(self):
        with pytest.raises(ConfigError):
            make_dataset(DataConfig(counts=[1, 1]), show_progress=False)

    def test_hybrid_set(self):
        hybrids = make_hybrid_set(3, 16, 16, seed=0)
        assert len(hybrids) == 3
        assert all(s.classes == [STREAK_HAZE.id, FLAKE.id] and s.split == "test" for s in hybrids)
        assert all(s.is_hybrid for s in hybrids)

    def test_classes_are_separable_from_residual_statistics(self):
        """以退化殘差的簡單統計量做最近中心分類，準確率需 > 80%"""
        samples = make_dataset(DataConfig(counts=[60, 60, 60]), show_progress=False)

        def stats(s):
            r = s.degraded.astype(np.float64) - s.clean
            changed = np.any(np.abs(r) > 1e-3, axis=0)
            gain = r / np.maximum(1.0 - s.clean, 1e-3)
            level = float(np.median(gain[:, changed])) if changed.any() else 0.0
            return np.array([changed.mean(), (r < -1e-3).any(axis=0).mean(), level])

        train = [s for s in samples if s.split == "train"]
        held = [s for s in samples if s.split != "train"]
        x_train = np.stack([stats(s) for s in train])
        mu, sd = x_train.mean(axis=0), x_train.std(axis=0) + 1e-9
        centroids = {
            c: ((x_train[[s.label == c for s in train]] - mu) / sd).mean(axis=0) for c in range(3)
        }
        correct = 0
        for s in held:
            z = (stats(s) - mu) / sd
            guess = min(centroids, key=lambda c: np.linalg.norm(z - centroids[c]))
            correct += guess == s.label
        assert correct / len(held) > 0.8
