"""
縮小預算的端到端驗收（pytest -m slow）

以 16×16、兩個尺度的小型設定實際跑完三個訓練階段，並以驗收門檻檢查：
特徵向量分群與天氣辨識、還原增益、固定向量替換、串接推論與自適應消融。
"""

import numpy as np
import pytest

from app.config import build_config
from app.core.tensor import no_grad
from app.models.feature_extractor import extract_features
from app.services import metrics
from app.services.ablation import ABLATION_ROWS, cascade_study, fixed_vector_study, run_ablation
from app.services.evaluation import EvaluationService
from app.services.inference import weather_scores
from app.services.model_store import ModelBundle
from app.services.trainer import Trainer
from app.services.weather_synth import make_dataset, make_hybrid_set

pytestmark = pytest.mark.slow

KEYS = ["drop", "streak", "flake"]

ACCEPTANCE_VALUES = {
    "model": {
        "scales": 2, "channels": [8, 16], "heads": [1, 2], "strides": [2, 2],
        "blocks": [1, 1], "intra_blocks": [1, 1], "decoder_queries": 4,
    },
    "feature": {"dim": 16},
    "train": {
        "pretrain_steps": 1000, "restore_steps": 1500, "finetune_steps": 300, "batch_size": 8,
        "lr_pretrain": 2e-4, "lr_restore": 1e-3, "val_every": 500, "val_samples": 12,
    },
    "data": {"counts": [100, 100, 100], "height": 16, "width": 16, "eval_height": 16, "eval_width": 16},
}

ABLATION_VALUES = {
    **ACCEPTANCE_VALUES,
    "train": {
        "pretrain_steps": 300, "restore_steps": 400, "finetune_steps": 60, "batch_size": 8,
        "lr_pretrain": 1e-3, "lr_restore": 1e-3, "val_every": 200, "val_samples": 12,
    },
    "data": {"counts": [40, 40, 40], "height": 16, "width": 16, "eval_height": 16, "eval_width": 16},
}


@pytest.fixture(scope="module")
def trained():
    config = build_config(ACCEPTANCE_VALUES)
    samples = make_dataset(config.data, show_progress=False)
    bundle = ModelBundle(config)
    trainer = Trainer(bundle, show_progress=False)
    trainer.pretrain_feature_net(samples)
    pretrain_bank = bundle.bank
    trainer.train_restoration(samples)
    trainer.joint_finetune(samples)
    return bundle, samples, pretrain_bank


def held_out(samples):
    return [s for s in samples if s.split == "test"]


class TestFeatureClustering:
    def test_intra_class_similarity_exceeds_inter_class(self, trained):
        bundle, samples, _ = trained
        held = held_out(samples)
        with no_grad():
            vectors = np.stack([extract_features(bundle.as_tensor(s.degraded), bundle.feature).numpy() for s in held])
        unit = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
        sims = unit @ unit.T
        labels = np.array([s.label for s in held])
        same = labels[:, None] == labels[None, :]
        off_diagonal = ~np.eye(len(held), dtype=bool)
        assert sims[same & off_diagonal].mean() - sims[~same].mean() >= 0.3

    def test_identification_accuracy(self, trained):
        bundle, samples, _ = trained
        held = held_out(samples)
        correct = 0
        for s in held:
            scores = weather_scores(s.degraded, bundle.bank, bundle.feature)
            assert sum(scores.scores) == pytest.approx(1.0, abs=1e-6)
            correct += scores.argmax == KEYS[s.label]
        assert correct / len(held) >= 0.95


class TestRestoration:
    def test_gain_over_degraded_input(self, trained):
        bundle, samples, _ = trained
        report = EvaluationService().evaluate(samples, bundle, "full", show_progress=False)
        assert report.gain is not None and report.gain >= 2.0

    def test_fixed_vector_substitution(self, trained):
        bundle, samples, _ = trained
        report = fixed_vector_study(bundle, samples, show_progress=False)
        classes = report.columns
        correct = np.mean([report.rows[f"avg_{k}"][k] for k in classes])
        full = np.mean([report.rows["full"][k] for k in classes])
        wrong = np.mean([report.rows[f"avg_{j}"][k] for k in classes for j in classes if j != k])
        assert abs(correct - full) <= 0.5
        assert correct - wrong >= 1.0

    def test_derain_first_cascade_beats_single_stage(self, trained):
        bundle, _, _ = trained
        hybrids = make_hybrid_set(50, 16, 16, seed=5)
        report = cascade_study(bundle, hybrids, show_progress=False)
        assert report.checksum_stable
        assert report.rows["two_stage_derain_first"]["psnr"] > report.rows["single_full"]["psnr"]
        for name in ("single_full", "two_stage_derain_first", "two_stage_snow_first"):
            assert 0.0 < report.rows[name]["psnr"] < metrics.PSNR_CAP

    def test_finetune_recomputed_bank(self, trained):
        bundle, _, pretrain_bank = trained
        assert bundle.bank is not pretrain_bank
        assert bundle.bank.counts() == pretrain_bank.counts()


class TestAblationTrend:
    def test_each_axis_helps(self):
        config = build_config(ABLATION_VALUES)
        samples = make_dataset(config.data, show_progress=False)
        report = run_ablation(samples, config, seeds=(0, 1, 2), show_progress=False)
        means = {row.name: row.average_psnr for row in report.rows}
        names = [name for name, *_ in ABLATION_ROWS]
        assert means[names[-1]] >= means["baseline"] + 0.2
        for before, after in zip(names, names[1:]):
            assert means[after] >= means[before] - 0.1
