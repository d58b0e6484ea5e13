"""一次跑完玩具流程：合成資料 → 三階段訓練 → 評估 → 串接研究"""

import argparse
import sys
from pathlib import Path

# 添加專案根目錄到 Python 路徑
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from app.config import load_config, settings
from app.services.ablation import cascade_study, fixed_vector_study
from app.services.dataset_store import dataset_store
from app.services.evaluation import evaluation_service
from app.services.model_store import ModelBundle
from app.services.trainer import Trainer
from app.services.weather_synth import make_dataset, make_hybrid_set


def run(config_path, out_dir: Path) -> None:
    config = load_config(config_path)
    out_dir.mkdir(parents=True, exist_ok=True)

    # 1. 合成資料
    samples = make_dataset(config.data)
    dataset_store.write(out_dir / "toy.mwds", samples)
    print(f"✅ 已合成 {len(samples)} 筆樣本")

    # 2. 三階段訓練（每個階段結束都保存檢查點）
    bundle = ModelBundle(config)
    trainer = Trainer(bundle, log_path=out_dir / "train.csv", dump_dir=out_dir)
    trainer.pretrain_feature_net(samples)
    bundle.save(out_dir / "pretrain.mwfc")
    trainer.train_restoration(samples)
    bundle.save(out_dir / "restore.mwfc")
    trainer.joint_finetune(samples)
    bundle.save(out_dir / "finetune.mwfc")

    # 3. 評估
    report = evaluation_service.evaluate(samples, bundle, "full")
    (out_dir / "eval.json").write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")

    fixed = fixed_vector_study(bundle, samples)
    (out_dir / "study_fixed.csv").write_text("\n".join(fixed.csv_lines()) + "\n", encoding="utf-8")

    hybrids = make_hybrid_set(config.data.hybrid_count, config.data.eval_height, config.data.eval_width,
                              config.data.seed)
    cascade = cascade_study(bundle, hybrids)
    (out_dir / "study_cascade.csv").write_text("\n".join(cascade.csv_lines()) + "\n", encoding="utf-8")

    print("=" * 60)
    print("🎉 玩具流程完成！")
    print("=" * 60)
    print(f"   📊 平均 PSNR {report.average_psnr:.2f} dB（退化輸入 {report.degraded.average_psnr:.2f} dB）")
    print(f"   📊 平均 SSIM {report.average_ssim:.4f}")
    print(f"   🔒 串接前後參數 checksum {'一致' if cascade.checksum_stable else '不一致'}")
    print(f"   📂 輸出資料夾: {out_dir}")


def main() -> int:
    parser = argparse.ArgumentParser(description="玩具流程一鍵執行")
    parser.add_argument("--config", help="實驗設定檔（預設全部使用預設值）")
    parser.add_argument("--out", default=str(settings.output_path / "toy_run"))
    args = parser.parse_args()
    try:
        run(args.config, Path(args.out))
    except Exception as e:
        print(f"\n❌ 執行失敗：{e}")
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
