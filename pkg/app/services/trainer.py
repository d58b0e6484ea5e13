"""三階段訓練服務 (Training Pipeline)

1. pretrain: 以對比損失訓練特徵網路 τ，結束時計算類別平均向量庫
2. restore:  凍結 τ，以 smooth-L1 + λ·perceptual 訓練還原網路 θ
3. finetune: τ 與 θ 一起以較低學習率（第二階段 × finetune_lr_factor）微調，結束時重算向量庫

每一步的批次只由 (seed, 階段, 步數) 決定，因此任何階段都能從檢查點續訓並得到
與不中斷執行完全相同的結果。
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from app.config import settings
from app.core.exceptions import ContractError, NumericalError, TrainingDivergedError
from app.core.module import Parameter
from app.core.optim import Adam
from app.core.tensor import Tape, Tensor, no_grad
from app.models.backbone import restore
from app.models.feature_extractor import ClassAverageBank, contrastive_loss, extract_features
from app.schemas.weather import WeatherSample
from app.services import metrics
from app.services.inference import infer_full
from app.services.losses import total_loss
from app.services.model_store import ModelBundle
from app.services.weather_synth import default_registry

PHASE_IDS = {"pretrain": 1, "restore": 2, "finetune": 3}
LOG_COLUMNS = ["step", "phase", "loss", "val_psnr", "val_ssim", "lr"]


def group_by_class(samples: Sequence[WeatherSample]) -> dict[int, list[int]]:
    """類別 ID → 樣本索引（依類別 ID 遞增）"""
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.label, []).append(i)
    return dict(sorted(groups.items()))


def balanced_batch(groups: dict[int, list[int]], batch_size: int, seed: int, phase: str, step: int) -> list[int]:
    """
    類別輪流的平衡批次：第 step 步第 i 個位置屬於類別 (step·B + i) mod k，
    類別內以 (seed, 階段, 步數) 決定的亂數抽樣

    返回:
        樣本索引清單
    """
    rng = np.random.default_rng([seed, PHASE_IDS[phase], step])
    keys = list(groups)
    batch = []
    for i in range(batch_size):
        members = groups[keys[(step * batch_size + i) % len(keys)]]
        batch.append(members[int(rng.integers(len(members)))])
    return batch


class TrainLog:
    """附加寫入的 CSV 訓練記錄"""

    def __init__(self, path: Optional[Union[str, Path]]):
        self.path = Path(path) if path else None
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(LOG_COLUMNS)

    def write(self, step: int, phase: str, loss: float, lr: float,
              val_psnr: Optional[float] = None, val_ssim: Optional[float] = None) -> None:
        if self.path is None:
            return
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow([
                step, phase, f"{loss:.6f}",
                "" if val_psnr is None else f"{val_psnr:.4f}",
                "" if val_ssim is None else f"{val_ssim:.4f}",
                f"{lr:.8g}",
            ])


class Trainer:
    """
    參數:
        bundle: 要訓練的模型組合（就地更新）
        log_path: CSV 訓練記錄路徑
        dump_dir: 發散時寫出批次種子的資料夾
        checkpoint_path: 週期性檢查點路徑
        checkpoint_every: 每幾步存一次（None 表示只在階段結束時由呼叫端保存）
        show_progress: 是否顯示 tqdm 進度列
    """

    def __init__(
        self,
        bundle: ModelBundle,
        log_path: Optional[Union[str, Path]] = None,
        dump_dir: Optional[Union[str, Path]] = None,
        checkpoint_path: Optional[Union[str, Path]] = None,
        checkpoint_every: Optional[int] = None,
        show_progress: bool = True,
    ):
        self.bundle = bundle
        self.cfg = bundle.config.train
        self.log = TrainLog(log_path)
        self.dump_dir = Path(dump_dir) if dump_dir else settings.output_path
        self.checkpoint_path = checkpoint_path
        self.checkpoint_every = checkpoint_every
        self.show_progress = show_progress
        self.losses: list[float] = []
        self.last_validation: Optional[tuple[float, float]] = None
        self._tensors: dict[int, tuple[Tensor, Tensor]] = {}

    # ---------- 共用 ----------

    def _pair(self, samples: Sequence[WeatherSample], index: int) -> tuple[Tensor, Tensor]:
        if index not in self._tensors:
            s = samples[index]
            self._tensors[index] = (self.bundle.as_tensor(s.degraded), self.bundle.as_tensor(s.clean))
        return self._tensors[index]

    def _optimizer(self, phase: str, params: dict[str, Parameter], lr: float) -> Adam:
        adam = Adam(params, lr, (self.cfg.adam_beta1, self.cfg.adam_beta2), self.cfg.adam_eps)
        meta = self.bundle.optimizer_meta
        resuming = self.bundle.phase == phase and not self.bundle.phase_complete
        if resuming and meta.get("phase") == phase:
            adam.load_state_dict(self.bundle.optimizer_state, meta["step_count"])
        return adam

    def _snapshot(self, phase: str, step: int, adam: Adam, complete: bool) -> None:
        self.bundle.phase = phase
        self.bundle.step = step
        self.bundle.phase_complete = complete
        if complete:
            self.bundle.optimizer_state = {}
            self.bundle.optimizer_meta = {}
        else:
            self.bundle.optimizer_state = {k: v.copy() for k, v in adam.state_dict().items()}
            self.bundle.optimizer_meta = {"phase": phase, "step_count": adam.step_count, "lr": adam.lr}

    def _start_step(self, phase: str) -> int:
        if self.bundle.phase == phase and not self.bundle.phase_complete:
            print(f"📂 從 {phase} 第 {self.bundle.step} 步續訓")
            return self.bundle.step
        return 0

    def _diverged(self, phase: str, step: int, batch: list[int], samples: Sequence[WeatherSample],
                  error: Exception) -> TrainingDivergedError:
        seeds = [int(samples[i].seed) for i in batch]
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        path = self.dump_dir / f"diverged_{phase}_step{step}.json"
        path.write_text(json.dumps({"phase": phase, "step": step, "batch_seeds": seeds, "error": str(error)},
                                   ensure_ascii=False, indent=2), encoding="utf-8")
        print(f"❌ {phase} 第 {step} 步 loss 非有限值，批次種子已寫入 {path}")
        return TrainingDivergedError(f"{phase} 第 {step} 步發散: {error}", seeds, str(path))

    def _run(
        self,
        phase: str,
        samples: Sequence[WeatherSample],
        total_steps: int,
        params: dict[str, Parameter],
        lr: float,
        loss_fn: Callable[[list[int]], Tensor],
        validate: Optional[Callable[[], tuple[float, float]]] = None,
        stop_after: Optional[int] = None,
    ) -> bool:
        """
        執行一個階段的迴圈

        返回:
            是否跑完整個階段（stop_after 提前中斷時為 False）
        """
        groups = group_by_class(samples)
        adam = self._optimizer(phase, params, lr)
        start = self._start_step(phase)
        end = total_steps if stop_after is None else min(total_steps, stop_after)
        bar = tqdm(range(start, end), desc=phase, disable=not self.show_progress, initial=start, total=total_steps)
        for step in bar:
            batch = balanced_batch(groups, self.cfg.batch_size, self.cfg.seed, phase, step)
            adam.zero_grad()
            try:
                with Tape() as tape:
                    loss = loss_fn(batch)
                if not np.isfinite(loss.item()):
                    raise NumericalError(f"loss = {loss.item()}")
                tape.backward(loss)
            except NumericalError as e:
                raise self._diverged(phase, step + 1, batch, samples, e) from e
            adam.step()
            value = loss.item()
            self.losses.append(value)

            done = step + 1
            val_psnr = val_ssim = None
            if validate is not None and (done % self.cfg.val_every == 0 or done == total_steps):
                val_psnr, val_ssim = validate()
                self.last_validation = (val_psnr, val_ssim)
            self.log.write(done, phase, value, adam.lr, val_psnr, val_ssim)
            if settings.DEBUG:
                print(f"   {phase} step {done}: loss={value:.6f}")
            elif done % settings.LOG_EVERY == 0:
                bar.set_postfix(loss=f"{value:.4f}")

            if self.checkpoint_every and self.checkpoint_path and done % self.checkpoint_every == 0 and done < total_steps:
                self._snapshot(phase, done, adam, complete=False)
                self.bundle.save(self.checkpoint_path)
        bar.close()

        complete = end >= total_steps
        self._snapshot(phase, end, adam, complete)
        return complete

    def _train_split(self, samples: Sequence[WeatherSample]) -> list[WeatherSample]:
        return [s for s in samples if s.split == "train" and not s.is_hybrid]

    def _validate_fn(self, samples: Sequence[WeatherSample]) -> Optional[Callable[[], tuple[float, float]]]:
        val = [s for s in samples if s.split == "val" and not s.is_hybrid][: self.cfg.val_samples]
        if not val:
            return None

        def validate() -> tuple[float, float]:
            psnrs, ssims = [], []
            for s in val:
                y = infer_full(s.degraded, self.bundle.feature, self.bundle.backbone).numpy()
                psnrs.append(metrics.psnr(y, s.clean))
                ssims.append(metrics.ssim(y, s.clean) if min(s.clean.shape[1:]) >= metrics.SSIM_WINDOW else 0.0)
            return float(np.mean(psnrs)), float(np.mean(ssims))

        return validate

    def degraded_validation(self, samples: Sequence[WeatherSample]) -> Optional[tuple[float, float]]:
        """驗證子集上退化輸入本身的 PSNR / SSIM（判斷預算是否足夠的基準）"""
        val = [s for s in samples if s.split == "val" and not s.is_hybrid][: self.cfg.val_samples]
        if not val:
            return None
        psnrs = [metrics.psnr(s.degraded, s.clean) for s in val]
        ssims = [metrics.ssim(s.degraded, s.clean) for s in val]
        return float(np.mean(psnrs)), float(np.mean(ssims))

    def compute_bank(self, samples: Sequence[WeatherSample]) -> ClassAverageBank:
        """以訓練集的 v 計算類別平均向量庫"""
        train = self._train_split(samples)
        vectors, labels = [], []
        with no_grad():
            for s in train:
                vectors.append(extract_features(self.bundle.as_tensor(s.degraded), self.bundle.feature).numpy())
                labels.append(s.label)
        return ClassAverageBank.from_vectors(vectors, labels, default_registry.keys())

    # ---------- 三個階段 ----------

    def pretrain_feature_net(self, samples: Sequence[WeatherSample], stop_after: Optional[int] = None) -> Optional[ClassAverageBank]:
        """
        第一階段：對比學習

        返回:
            類別平均向量庫（中斷時為 None）
        """
        train = self._train_split(samples)
        if len(group_by_class(train)) < 2:
            raise ContractError("對比預訓練需要至少 2 個天氣類別的訓練樣本")
        feature = self.bundle.feature
        feature.requires_grad_(True)
        self.bundle.backbone.requires_grad_(False)
        print(f"🌦️ 第一階段：對比預訓練 {self.cfg.pretrain_steps} 步（{len(train)} 筆訓練樣本）")

        def loss_fn(batch: list[int]) -> Tensor:
            vectors = [extract_features(self._pair(train, i)[0], feature) for i in batch]
            return contrastive_loss(vectors, [train[i].label for i in batch], self.cfg.margin)

        self._tensors.clear()
        complete = self._run("pretrain", train, self.cfg.pretrain_steps, dict(feature.named_parameters()),
                             self.cfg.lr_pretrain, loss_fn, stop_after=stop_after)
        if not complete:
            print(f"⚠️ 第一階段在第 {self.bundle.step} 步中斷")
            return None
        self.bundle.bank = self.compute_bank(samples)
        print(f"✅ 第一階段完成，類別平均向量: {', '.join(f'{k}×{n}' for k, n in self.bundle.bank.counts().items())}")
        return self.bundle.bank

    def _restoration_loss(self, train: Sequence[WeatherSample], batch: list[int], feature_trainable: bool) -> Tensor:
        backbone, feature, proxy = self.bundle.backbone, self.bundle.feature, self.bundle.proxy
        total: Optional[Tensor] = None
        for i in batch:
            degraded, clean = self._pair(train, i)
            v = None
            if backbone.is_adaptive and feature_trainable:
                v = extract_features(degraded, feature)
            elif backbone.is_adaptive:
                # τ 凍結：v 逐樣本計算但不進 tape
                with no_grad():
                    v = extract_features(degraded, feature)
            y = restore(degraded, v, backbone)
            loss = total_loss(y, clean, proxy, self.cfg.perceptual_weight, self.cfg.smooth_l1_beta)
            total = loss if total is None else total + loss
        return total * (1.0 / len(batch))

    def train_restoration(self, samples: Sequence[WeatherSample], stop_after: Optional[int] = None) -> bool:
        """第二階段：凍結 τ，訓練 θ"""
        if self.bundle.backbone.is_adaptive and not self.bundle.has_completed("pretrain"):
            raise ContractError("還原訓練需要已完成預訓練的特徵網路（請先執行 pretrain-feat）")
        train = self._train_split(samples)
        self.bundle.feature.requires_grad_(False)
        self.bundle.backbone.requires_grad_(True)
        print(f"🛠️ 第二階段：還原網路訓練 {self.cfg.restore_steps} 步")
        self._tensors.clear()
        complete = self._run(
            "restore", train, self.cfg.restore_steps, dict(self.bundle.backbone.named_parameters()),
            self.cfg.lr_restore, lambda batch: self._restoration_loss(train, batch, False),
            self._validate_fn(samples), stop_after,
        )
        print("✅ 第二階段完成" if complete else f"⚠️ 第二階段在第 {self.bundle.step} 步中斷")
        return complete

    def joint_finetune(self, samples: Sequence[WeatherSample], stop_after: Optional[int] = None) -> bool:
        """第三階段：τ 與 θ 聯合微調，結束後重算類別平均向量"""
        if not self.bundle.has_completed("restore"):
            raise ContractError("聯合微調需要已完成第二階段的還原網路")
        train = self._train_split(samples)
        self.bundle.feature.requires_grad_(True)
        self.bundle.backbone.requires_grad_(True)
        params = {f"feature.{k}": p for k, p in self.bundle.feature.named_parameters()}
        params.update({f"backbone.{k}": p for k, p in self.bundle.backbone.named_parameters()})
        lr = self.cfg.lr_restore * self.cfg.finetune_lr_factor
        print(f"🔧 第三階段：聯合微調 {self.cfg.finetune_steps} 步（lr={lr:g}）")
        self._tensors.clear()
        complete = self._run(
            "finetune", train, self.cfg.finetune_steps, params, lr,
            lambda batch: self._restoration_loss(train, batch, True),
            self._validate_fn(samples), stop_after,
        )
        if complete:
            self.bundle.bank = self.compute_bank(samples)
            print("✅ 第三階段完成，已重算類別平均向量")
        else:
            print(f"⚠️ 第三階段在第 {self.bundle.step} 步中斷")
        self.bundle.feature.requires_grad_(False)
        return complete
