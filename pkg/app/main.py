"""命令列主入口 (`python -m app <子命令>`)

回傳碼: 0 成功、1 使用者錯誤（設定、參數、檔案、缺少類別等）、2 內部錯誤
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from app.config import load_config, settings
from app.core.exceptions import ContractError, WeatherFormerError
from app.schemas.config import ExperimentConfig
from app.schemas.weather import WeatherSample
from app.services.dataset_store import dataset_store, filter_split, read_ppm, write_ppm
from app.services.model_store import ModelBundle
from app.services.weather_synth import default_registry, make_dataset, make_hybrid_set


class UsageError(WeatherFormerError):
    """命令列參數錯誤"""


class CliParser(argparse.ArgumentParser):
    """參數錯誤時改為拋出 UsageError（回傳碼 1），而非 argparse 預設的 2"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ==================== 共用 ====================

def _overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    if args.seed is None:
        return {}
    return {"train": {"seed": args.seed}, "data": {"seed": args.seed}}


def _config(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config, _overrides(args))


def _out(args: argparse.Namespace, default: str) -> Path:
    return Path(args.out) if args.out else settings.output_path / default


def _data_path(args: argparse.Namespace) -> Path:
    return Path(args.data) if args.data else settings.data_path / "toy.mwds"


def _load_samples(args: argparse.Namespace) -> list[WeatherSample]:
    samples = dataset_store.read(_data_path(args))
    print(f"📂 讀取 {len(samples)} 筆樣本: {_data_path(args)}")
    return samples


def _load_bundle(path: Optional[str]) -> ModelBundle:
    if not path:
        raise UsageError("需要 --checkpoint")
    bundle = ModelBundle.load(path)
    print(f"📂 載入檢查點 {path}（階段 {bundle.phase}{'' if bundle.phase_complete else ' 未完成'}）")
    return bundle


def _write_lines(path: Optional[Path], lines: Sequence[str]) -> None:
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    print(f"✅ 已寫入 {path}")


def _input_image(args: argparse.Namespace) -> np.ndarray:
    """--input 指定 PPM，或以 --data 加 --index 取資料集中的一筆退化影像"""
    if args.input:
        return read_ppm(args.input)
    if args.data is None:
        raise UsageError("需要 --input <PPM> 或 --data <MWDS> --index <i>")
    samples = dataset_store.read(args.data)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index {args.index} 超出範圍（共 {len(samples)} 筆）")
    return samples[args.index].degraded


# ==================== 子命令 ====================

def cmd_synth(args: argparse.Namespace) -> None:
    cfg = _config(args)
    if args.hybrid is not None:
        order = default_registry.parse(args.order) if args.order else None
        h = args.height or cfg.data.eval_height
        w = args.width or cfg.data.eval_width
        samples = make_hybrid_set(args.hybrid, h, w, cfg.data.seed, order)
        out = _out(args, "hybrid.mwds")
    else:
        samples = make_dataset(cfg.data, height=args.height, width=args.width)
        out = _out(args, "toy.mwds")
    dataset_store.write(out, samples)
    splits = {s: sum(1 for x in samples if x.split == s) for s in ("train", "val", "test")}
    print(f"✅ 已合成 {len(samples)} 筆樣本 → {out}（{', '.join(f'{k} {v}' for k, v in splits.items())}）")


def _trainer(args: argparse.Namespace, bundle: ModelBundle, out: Path):
    from app.services.trainer import Trainer

    return Trainer(
        bundle,
        log_path=args.log or out.with_suffix(".csv"),
        dump_dir=out.parent,
        checkpoint_path=out,
        checkpoint_every=args.checkpoint_every,
    )


def _phase_bundle(args: argparse.Namespace) -> ModelBundle:
    if args.resume:
        return _load_bundle(args.resume)
    if getattr(args, "checkpoint", None):
        return _load_bundle(args.checkpoint)
    return ModelBundle(_config(args))


def _run_phase(args: argparse.Namespace, phase: str, default_out: str) -> None:
    bundle = _phase_bundle(args)
    samples = _load_samples(args)
    out = _out(args, default_out)
    trainer = _trainer(args, bundle, out)
    if phase == "pretrain":
        trainer.pretrain_feature_net(samples, args.stop_after)
    elif phase == "restore":
        trainer.train_restoration(samples, args.stop_after)
    else:
        trainer.joint_finetune(samples, args.stop_after)
    bundle.save(out)
    print(f"✅ 檢查點已保存 → {out}（{bundle.phase} 第 {bundle.step} 步）")


def cmd_pretrain(args: argparse.Namespace) -> None:
    _run_phase(args, "pretrain", "pretrain.mwfc")


def cmd_train(args: argparse.Namespace) -> None:
    _run_phase(args, "restore", "restore.mwfc")


def cmd_finetune(args: argparse.Namespace) -> None:
    if not args.resume and not args.checkpoint:
        raise UsageError("finetune 需要 --checkpoint（第二階段的檢查點）")
    _run_phase(args, "finetune", "finetune.mwfc")


def cmd_infer(args: argparse.Namespace) -> None:
    from app.services.inference import infer_cascade, infer_fixed, infer_full

    bundle = _load_bundle(args.checkpoint)
    image = _input_image(args)
    if args.mode == "full":
        y = infer_full(image, bundle.feature, bundle.backbone)
    else:
        if bundle.bank is None:
            raise ContractError("檢查點沒有類別平均向量庫（請先完成預訓練）")
        if args.mode == "fixed":
            if not args.cls:
                raise UsageError("--mode fixed 需要 --class <類別>")
            y = infer_fixed(image, default_registry.get(args.cls).key, bundle.bank, bundle.backbone)
        else:
            order = [c.key for c in default_registry.parse(args.order)]
            y = infer_cascade(image, order, bundle.feature, bundle.backbone, bundle.bank, args.fixed_later)
    out = write_ppm(_out(args, "restored.ppm"), y.numpy())
    print(f"✅ 已輸出還原影像 → {out}")


def cmd_identify(args: argparse.Namespace) -> None:
    from app.services.inference import score_csv_lines, weather_scores

    bundle = _load_bundle(args.checkpoint)
    if bundle.bank is None:
        raise ContractError("檢查點沒有類別平均向量庫")
    if args.input:
        rows = [(Path(args.input).stem, weather_scores(read_ppm(args.input), bundle.bank, bundle.feature, bundle.backbone))]
    else:
        samples = filter_split(_load_samples(args), args.split)
        rows = [
            (f"{i}", weather_scores(s.degraded, bundle.bank, bundle.feature, bundle.backbone))
            for i, s in enumerate(samples)
        ]
        correct = sum(1 for (_, sc), s in zip(rows, samples)
                      if not s.is_hybrid and sc.argmax == default_registry.get(s.label).key)
        single = sum(1 for s in samples if not s.is_hybrid)
        if single:
            print(f"🎯 辨識正確率 {correct}/{single} = {correct / single:.2%}")
    _write_lines(Path(args.out) if args.out else None, score_csv_lines(rows))


def cmd_route(args: argparse.Namespace) -> None:
    from app.services.inference import CommandExpert, ExpertRegistry, fixed_vector_experts, route_expert

    bundle = _load_bundle(args.checkpoint)
    if bundle.bank is None:
        raise ContractError("檢查點沒有類別平均向量庫")
    if args.expert:
        registry = ExpertRegistry()
        for entry in args.expert:
            if "=" not in entry:
                raise UsageError(f"--expert 格式為 <類別>=<指令>: {entry}")
            key, command = entry.split("=", 1)
            registry.register(default_registry.get(key.strip()).key, CommandExpert(command.strip()))
    else:
        registry = fixed_vector_experts(bundle.bank, bundle.backbone)
    result = route_expert(_input_image(args), registry, bundle.bank, bundle.feature)
    out = write_ppm(_out(args, "routed.ppm"), result.image)
    scores = ", ".join(f"{k}={v:.4f}" for k, v in result.scores.as_dict().items())
    print(f"🧭 選擇專家 {result.chosen}（{scores}）→ {out}")


def cmd_eval(args: argparse.Namespace) -> None:
    from app.services.compute import count_compute
    from app.services.evaluation import EvaluationService

    samples = _load_samples(args)
    service = EvaluationService(args.workers)
    if args.degraded_only:
        report = service.evaluate(samples, None, "degraded", args.split)
    else:
        bundle = _load_bundle(args.checkpoint)
        selected = filter_split(samples, args.split)
        macs = None
        if selected:
            _, h, w = selected[0].clean.shape
            macs = count_compute(bundle.config, h, w).macs
        report = service.evaluate(samples, bundle, args.mode, args.split, macs=macs)
    print(f"📊 {report.mode}: PSNR {report.average_psnr:.2f} dB / SSIM {report.average_ssim:.4f}"
          + (f"（退化輸入 {report.degraded.average_psnr:.2f} dB）" if report.mode != "degraded" else ""))
    text = report.model_dump_json(indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"✅ 已寫入 {args.out}")
    else:
        print(text)


def cmd_ablate(args: argparse.Namespace) -> None:
    from app.services.ablation import run_ablation

    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    report = run_ablation(_load_samples(args), _config(args), seeds)
    _write_lines(_out(args, "ablation.csv"), report.csv_lines())


def cmd_export(args: argparse.Namespace) -> None:
    from app.services.embedding_export import export_embeddings

    bundle = _load_bundle(args.checkpoint)
    export_embeddings(_out(args, "embeddings.csv"), _load_samples(args), bundle, args.split)


def cmd_count(args: argparse.Namespace) -> None:
    from app.services.compute import model_family

    reports = model_family(_config(args), args.height, args.width)
    lines = ["model,width,params_fixed,params_generated,params_feature,macs,macs_restore_only"]
    for name, r in reports.items():
        lines.append(",".join(str(x) for x in (
            name, r.width, r.params["fixed"], r.params["hyper-generated"], r.params["feature"],
            r.macs, r.macs_restore_only,
        )))
        print(f"🧮 {name}: 參數 {r.total_params:,}，MACs {r.macs / 1e6:.2f} M")
    _write_lines(Path(args.out) if args.out else None, lines)


def cmd_study(args: argparse.Namespace) -> None:
    from app.services.ablation import cascade_study, fixed_vector_study

    bundle = _load_bundle(args.checkpoint)
    if args.kind == "fixed":
        report = fixed_vector_study(bundle, _load_samples(args))
    else:
        if args.data:
            hybrids = [s for s in _load_samples(args) if s.is_hybrid]
        else:
            cfg = bundle.config.data
            hybrids = make_hybrid_set(cfg.hybrid_count, cfg.eval_height, cfg.eval_width, cfg.seed)
        report = cascade_study(bundle, hybrids)
        print(f"🔒 參數 checksum {'一致' if report.checksum_stable else '不一致'}")
    _write_lines(_out(args, f"study_{args.kind}.csv"), report.csv_lines())


# ==================== 參數定義 ====================

def build_parser() -> argparse.ArgumentParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="實驗設定檔（key = value）")
    common.add_argument("--seed", type=int, help="覆寫 train.seed 與 data.seed")
    common.add_argument("--out", help="輸出路徑")

    parser = CliParser(prog="python -m app", description=f"{settings.APP_NAME} 命令列工具")
    sub = parser.add_subparsers(dest="command", metavar="<子命令>")
    sub.required = True

    def add(name: str, handler: Callable[[argparse.Namespace], None], help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(handler=handler)
        return p

    p = add("synth", cmd_synth, "合成 MWDS 資料集")
    p.add_argument("--hybrid", type=int, help="改為產生 N 筆混合天氣樣本（只供串接評估）")
    p.add_argument("--order", help="混合樣本的類別，例如 streak,flake")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)

    for name, handler, help_text in (
        ("pretrain-feat", cmd_pretrain, "第一階段：對比預訓練特徵網路"),
        ("train", cmd_train, "第二階段：訓練還原網路"),
        ("finetune", cmd_finetune, "第三階段：聯合微調"),
    ):
        p = add(name, handler, help_text)
        p.add_argument("--data", help="MWDS 資料集")
        if name != "pretrain-feat":
            p.add_argument("--checkpoint", help="前一階段的檢查點")
        p.add_argument("--resume", help="從未完成的檢查點續訓")
        p.add_argument("--log", help="CSV 訓練記錄（預設與輸出同名 .csv）")
        p.add_argument("--stop-after", type=int, help="跑到第 N 步後中斷（保存可續訓的檢查點）")
        p.add_argument("--checkpoint-every", type=int, help="每 N 步保存一次檢查點")

    p = add("infer", cmd_infer, "還原單張影像")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="輸入 PPM")
    p.add_argument("--data", help="改從 MWDS 資料集取影像")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mode", choices=["full", "fixed", "cascade"], default="full")
    p.add_argument("--class", dest="cls", help="fixed 模式使用的類別")
    p.add_argument("--order", default="streak,flake", help="cascade 模式的類別順序")
    p.add_argument("--fixed-later", action="store_true", help="串接第二階段起改用類別平均向量")

    p = add("identify", cmd_identify, "天氣類型辨識（輸出分數 CSV）")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="輸入 PPM")
    p.add_argument("--data", help="MWDS 資料集")
    p.add_argument("--split", default="test")

    p = add("route", cmd_route, "辨識天氣後交給對應的專家模型")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="輸入 PPM")
    p.add_argument("--data", help="改從 MWDS 資料集取影像")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--expert", action="append", help="<類別>=<指令>，指令以 {input} / {output} 代表 PPM 路徑")

    p = add("eval", cmd_eval, "在測試集上評估 PSNR / SSIM")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="MWDS 資料集")
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=["full", "fixed"], default="full")
    p.add_argument("--degraded-only", action="store_true", help="只計算退化輸入相對乾淨影像的基準")
    p.add_argument("--workers", type=int, help="評估執行緒數")

    p = add("ablate", cmd_ablate, "自適應消融研究")
    p.add_argument("--data", help="MWDS 資料集")
    p.add_argument("--seeds", default="0,1,2")

    p = add("export-embeddings", cmd_export, "匯出特徵向量 CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="MWDS 資料集")
    p.add_argument("--split", help="只匯出指定切分")

    p = add("count", cmd_count, "S / M / L 參數量與 MACs")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)

    p = add("study", cmd_study, "固定向量替換 / 串接順序研究")
    p.add_argument("kind", choices=["fixed", "cascade"])
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="MWDS 資料集（cascade 時為混合樣本集）")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    執行命令列

    返回:
        回傳碼 0 / 1 / 2
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.handler(args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except WeatherFormerError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1 if e.user_facing else 2
    except Exception as e:  # noqa: BLE001
        print(f"❌ 內部錯誤: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
