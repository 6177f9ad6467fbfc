#!/usr/bin/env python3
"""
层级优先级 MIL 命令行入口
子命令: gen-data, train, eval, remix-prob, ablate

退出码: 0 成功, 2 用法/配置错误, 3 运行时中止
"""

import argparse
import logging
import statistics
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from bag_data import MANIFEST_NAME, Dataset, SplitTag, generate_mixed_test, generate_synthetic, \
    read_manifest, split, write_manifest
from config import RunConfig, load_run_config, merge_config, resolve_threads
from errors import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, ConfigError, HierMILError, InputError, ShapeError
from mil_model import load_checkpoint, save_checkpoint
from remix import low_success_fraction, success_grid
from run_store import ABLATION_SUMMARY_NAME, RunStore
from taxonomy import HierarchyLevel, Taxonomy
from trainer import ABLATION_PRESETS, evaluate, evaluate_priority, summarize_runs, train

logger = logging.getLogger(__name__)

REMIX_PROB_NAME = "remix_prob.csv"
REMIX_PROB_SUMMARY_NAME = "remix_prob_summary.csv"
CONSOLE_FORMAT = "%(levelname)s %(name)s: %(message)s"


# ---------- 参数解析工具 ----------

def parse_grid(text: str, name: str) -> List[float]:
    """GRID 为 start:stop:step（含端点）或逗号分隔的列表"""
    text = (text or "").strip()
    if not text:
        raise ConfigError(f"{name} 网格为空")
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ConfigError(f"{name} 网格范围无效: {text}")
            count = int(round((stop - start) / step)) + 1
            return [round(start + i * step, 10) for i in range(count)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{name} 网格无法解析: {text}")


def parse_int_list(text: str, name: str) -> List[int]:
    try:
        values = [int(x) for x in (text or "").split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{name} 必须是逗号分隔的整数: {text}")
    if not values:
        raise ConfigError(f"{name} 为空")
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """配置文件 + 命令行覆盖"""
    config = load_run_config(getattr(args, "config", None))
    overrides: Dict[str, object] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = str(args.out)
    if getattr(args, "epochs", None) is not None:
        overrides["trainer"] = {"epochs": args.epochs}
    ablation = {}
    for flag, key in (("no_iha", "use_iha"), ("no_uhd", "use_uhd"),
                      ("no_subsite", "use_subsite"), ("no_remix", "use_remix")):
        if getattr(args, flag, False):
            ablation[key] = False
    if ablation:
        overrides["ablation"] = ablation
    return merge_config(config, overrides) if overrides else config


def _manifest_path(args: argparse.Namespace, config: RunConfig) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    return Path(config.out_dir) / MANIFEST_NAME


def print_class_table(dataset: Dataset, taxonomy: Taxonomy):
    """按粗类分组打印每类每个划分的包数"""
    rows = dataset.class_table(taxonomy)
    tags = [t.value for t in SplitTag if any(t.value in r for r in rows)]
    print("📊 数据分布")
    print("=" * 60)
    header = f"{'粗类':<10}{'细类':<6}" + "".join(f"{t:>12}" for t in tags) + f"{'total':>8}"
    print(header)
    for row in rows:
        print(f"{row['coarse']:<10}{row['fine']:<6}" + "".join(f"{row[t]:>12}" for t in tags)
              + f"{row['total']:>8}")


def build_dataset(config: RunConfig, taxonomy: Taxonomy) -> Dataset:
    """合成单病变包并分层划分，再追加混合病变测试集"""
    pure = split(generate_synthetic(config.gen, config.seed), config.split_ratios, config.seed)
    mixed = generate_mixed_test(config.gen, config.mixed, config.seed, taxonomy)
    return pure.merged(mixed)


# ---------- 子命令 ----------

def cmd_gen_data(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    taxonomy = config.build_taxonomy()
    store = RunStore(Path(config.out_dir))
    with store.sidecar_log():
        logger.info("gen-data seed=%d out=%s", config.seed, config.out_dir)
        dataset = build_dataset(config, taxonomy)
        manifest = write_manifest(dataset, store.out_dir)
        store.write_effective_config(config.to_dict())
    print(f"✅ 已写出 {len(dataset)} 个包, 清单: {manifest}")
    print_class_table(dataset, taxonomy)
    return EXIT_OK


def _train_one(config: RunConfig, dataset: Dataset, taxonomy: Taxonomy, store: RunStore,
               threads: int, progress: bool):
    params, history = train(config.trainer, dataset, taxonomy, config.seed,
                            remix_config=config.remix, flags=config.ablation,
                            threads=threads, progress=progress)
    save_checkpoint(params, store.checkpoint_path)
    store.write_history(history)
    store.write_run_meta({
        "seed": config.seed,
        "best_epoch": history.best_epoch,
        "epochs": len(history),
        "dim": dataset.dim,
        "splits": {t.value: len(dataset.subset(t)) for t in SplitTag},
        "ablation": config.to_dict()["ablation"],
    })
    store.write_effective_config(config.to_dict())
    return params, history


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    taxonomy = config.build_taxonomy()
    store = RunStore(Path(config.out_dir))
    with store.sidecar_log():
        dataset = read_manifest(_manifest_path(args, config))
        logger.info("train seed=%d flags=%s", config.seed, config.ablation)
        _, history = _train_one(config, dataset, taxonomy, store, resolve_threads(), not args.quiet)
    best = history.epochs[history.best_epoch - 1]
    print(f"✅ 训练完成, 最佳 epoch {history.best_epoch}: "
          f"val fine acc {best.val['fine']['accuracy']:.3f}, coarse acc {best.val['coarse']['accuracy']:.3f}")
    print(f"📁 检查点: {store.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    taxonomy = config.build_taxonomy()
    store = RunStore(Path(config.out_dir))
    tag = SplitTag(args.split)
    with store.sidecar_log():
        params = load_checkpoint(Path(args.checkpoint))
        dataset = read_manifest(_manifest_path(args, config))
        if params.dim != dataset.dim:
            raise ShapeError(f"检查点维度 {params.dim} 与清单维度 {dataset.dim} 不一致")
        bags = dataset.subset(tag)
        if not bags:
            raise InputError(f"划分 {tag.value} 中没有包")
        threads = resolve_threads()
        settings = config.ablation.loss_settings(config.trainer.kl_direction)
        report = evaluate(params, bags, taxonomy, settings, use_subsite=config.ablation.use_subsite,
                          threads=threads)
        store.write_metrics(report, tag.value)
        priority = None
        if tag is SplitTag.TEST_MIXED:
            priority = evaluate_priority(params, bags, taxonomy, use_subsite=config.ablation.use_subsite,
                                         threads=threads)
            store.write_priority(priority, tag.value)

    print(f"📊 {tag.value}: n={report.n}")
    for level in (HierarchyLevel.FINE, HierarchyLevel.COARSE):
        metrics = report.level(level)
        print(f"  {level.value:<6} acc {metrics.accuracy:.4f}  macro AUROC {_fmt(metrics.macro_auroc)}")
        if metrics.absent_classes:
            print(f"⚠️ 不计入宏平均的{level.value}类: {', '.join(metrics.absent_classes)}")
    print(f"  adenoma recall {_fmt(report.adenoma_recall)}  precision {_fmt(report.adenoma_precision)}")
    if priority is not None:
        print(f"  priority win rate {priority.win_rate:.4f}  mean gap {priority.mean_gap:+.4f}")
    return EXIT_OK


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _bag_size_summary(dataset: Dataset) -> List[int]:
    """单病变包大小的中位数、均值（取整）与最大值，去重后升序"""
    sizes = [b.n for b in dataset.bags if dataset.splits.get(b.id) is not SplitTag.TEST_MIXED]
    values = {int(round(statistics.median(sizes))), int(round(statistics.fmean(sizes))), max(sizes)}
    return sorted(values)


def cmd_remix_prob(args: argparse.Namespace) -> int:
    alphas = parse_grid(args.alphas, "alpha")
    betas = parse_grid(args.betas, "beta")
    if args.n:
        n_values = parse_int_list(args.n, "n")
    elif args.manifest:
        n_values = _bag_size_summary(read_manifest(Path(args.manifest)))
    else:
        raise ConfigError("需要 --n 或 --manifest")
    if any(n < 1 for n in n_values):
        raise ConfigError(f"n 必须为正: {n_values}")

    rows = success_grid(n_values, alphas, betas)
    store = RunStore(Path(args.out))
    store.write_table(rows, REMIX_PROB_NAME, ["n", "alpha", "beta", "p_success"])
    summary = []
    print("📊 重混成功概率 P(E^c) ≤ 0.99 的可行格点比例")
    for n in n_values:
        feasible, low, fraction = low_success_fraction(rows, n)
        summary.append({"n": n, "feasible": feasible, "low": low, "low_fraction": fraction})
        print(f"  n={n:<6} 可行 {feasible:<4} 低概率 {low:<4} ({fraction * 100:.1f}%)")
    store.write_table(summary, REMIX_PROB_SUMMARY_NAME)
    print(f"✅ 已写出 {len(rows)} 行: {store.out_dir / REMIX_PROB_NAME}")
    return EXIT_OK


def _run_metrics(report, priority) -> Dict[str, Optional[float]]:
    return {
        "val_fine_acc": report.fine.accuracy,
        "val_coarse_acc": report.coarse.accuracy,
        "val_fine_auroc": report.fine.macro_auroc,
        "val_adenoma_recall": report.adenoma_recall,
        "val_iha_gap": report.mean_iha_gap,
        "win_rate": priority.win_rate if priority else None,
        "mean_gap": priority.mean_gap if priority else None,
    }


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    taxonomy = config.build_taxonomy()
    seeds = parse_int_list(args.seeds, "seeds") if args.seeds else [config.seed]
    presets = [p.strip() for p in args.presets.split(",")] if args.presets else list(ABLATION_PRESETS)
    unknown = [p for p in presets if p not in ABLATION_PRESETS]
    if unknown:
        raise ConfigError(f"未知的消融配置: {unknown}, 可选: {list(ABLATION_PRESETS)}")

    root = RunStore(Path(config.out_dir))
    threads = resolve_threads()
    results: Dict[str, List[Dict[str, Optional[float]]]] = {p: [] for p in presets}
    with root.sidecar_log():
        manifest = _manifest_path(args, config)
        if manifest.exists():
            dataset = read_manifest(manifest)
        else:
            # 所有配置与种子共用同一份数据，便于配对比较
            dataset = build_dataset(config, taxonomy)
            write_manifest(dataset, root.out_dir)
        val_bags = dataset.subset(SplitTag.VAL)
        mixed_bags = dataset.subset(SplitTag.TEST_MIXED)

        for preset in presets:
            for seed in seeds:
                run_config = replace(config, seed=seed, ablation=ABLATION_PRESETS[preset],
                                     out_dir=str(root.out_dir / preset / f"seed_{seed}"))
                print(f"🔬 {preset} seed={seed}")
                store = RunStore(Path(run_config.out_dir))
                params, _ = _train_one(run_config, dataset, taxonomy, store, threads, not args.quiet)
                flags = run_config.ablation
                report = evaluate(params, val_bags, taxonomy,
                                  flags.loss_settings(config.trainer.kl_direction),
                                  use_subsite=flags.use_subsite, threads=threads)
                priority = evaluate_priority(params, mixed_bags, taxonomy, use_subsite=flags.use_subsite,
                                             threads=threads) if mixed_bags else None
                results[preset].append(_run_metrics(report, priority))

    summary = summarize_runs(results)
    root.write_table(summary, ABLATION_SUMMARY_NAME)
    print("📊 消融汇总 (均值 ± 标准差)")
    print("=" * 60)
    for row in summary:
        print(f"{row['config']:<12} fine acc {_fmt(row['val_fine_acc_mean'])} ± {_fmt(row['val_fine_acc_std'])}"
              f"  win {_fmt(row['win_rate_mean'])} ± {_fmt(row['win_rate_std'])}"
              f"  iha gap {_fmt(row['val_iha_gap_mean'])}")
    print(f"✅ 汇总: {root.out_dir / ABLATION_SUMMARY_NAME}")
    return EXIT_OK


# ---------- 入口 ----------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiermil", description="层级优先级多示例学习")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, training: bool = False):
        p.add_argument("--config", type=Path, help="JSON 配置文件")
        p.add_argument("--seed", type=int, help="随机种子")
        p.add_argument("--out", type=Path, help="输出目录")
        p.add_argument("--quiet", action="store_true", help="不显示进度条")
        if training:
            p.add_argument("--manifest", type=Path, help="数据清单 (默认 <out>/manifest.jsonl)")
            p.add_argument("--epochs", type=int, help="训练轮数")
            p.add_argument("--no-iha", action="store_true", help="关闭 L_IHA")
            p.add_argument("--no-uhd", action="store_true", help="关闭 L_UHD")
            p.add_argument("--no-subsite", action="store_true", help="门控始终关闭")
            p.add_argument("--no-remix", action="store_true", help="关闭特征重混")

    common(sub.add_parser("gen-data", help="生成合成数据集"))

    p_train = sub.add_parser("train", help="训练模型")
    common(p_train, training=True)

    p_eval = sub.add_parser("eval", help="评估检查点")
    common(p_eval, training=True)
    p_eval.add_argument("--checkpoint", type=Path, required=True, help="模型检查点")
    p_eval.add_argument("--split", required=True, choices=[t.value for t in SplitTag], help="评估的划分")

    p_prob = sub.add_parser("remix-prob", help="重混成功概率网格")
    p_prob.add_argument("--n", help="逗号分隔的包大小列表")
    p_prob.add_argument("--manifest", type=Path, help="从数据集取中位数/均值/最大包大小")
    p_prob.add_argument("--alphas", required=True, help="α 网格 (start:stop:step 或逗号列表)")
    p_prob.add_argument("--betas", required=True, help="β 网格")
    p_prob.add_argument("--out", type=Path, default=Path("."), help="输出目录")

    p_ablate = sub.add_parser("ablate", help="运行消融配置并汇总")
    common(p_ablate, training=True)
    p_ablate.add_argument("--seeds", help="逗号分隔的种子列表")
    p_ablate.add_argument("--presets", help=f"逗号分隔的配置名 (默认全部: {','.join(ABLATION_PRESETS)})")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "remix-prob": cmd_remix_prob,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主函数，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    # 终端只显示警告及以上；INFO 只进 run.log
    console = logging.StreamHandler()
    console.setLevel(logging.WARNING)
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    root = logging.getLogger()
    root.addHandler(console)
    try:
        return COMMANDS[args.command](args)
    except HierMILError as e:
        print(f"❌ {e}")
        return e.exit_code
    except OSError as e:
        print(f"❌ 文件操作失败: {e}")
        return EXIT_RUNTIME
    finally:
        root.removeHandler(console)


if __name__ == "__main__":
    sys.exit(main())
