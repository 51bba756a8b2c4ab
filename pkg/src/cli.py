"""
命令行入口

子命令: synth / train / eval / predict / stats
退出码: 0 成功，1 用法或配置错误，2 运行时错误
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config_validator import ExperimentConfig
from dataio import (
    DatasetManifest, crowded_suite_specs, default_suite_specs, load_dataset, load_document,
    save_dataset, synth_generate,
)
from docgraph import LabelSpace, build_graph, graph_stats
from evaluation import aggregate, landmark_sweep, run_predictions
from exceptions import BaseLabelingError, ConfigurationError, DatasetError, UsageError, exception_handler
from logging_config import setup_logging
from model import predict
from train import load_checkpoint, save_checkpoint, save_loss_trace, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _ArgumentParser(argparse.ArgumentParser):
    """参数错误抛出 UsageError，由 main 统一转换为退出码"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common_options() -> argparse.ArgumentParser:
    # 默认值为SUPPRESS，全局参数写在子命令前后都可以
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=argparse.SUPPRESS, help='随机种子')
    common.add_argument('--config', type=str, default=argparse.SUPPRESS, help='配置文件（TOML或JSON）')
    common.add_argument('--env-file', type=str, default=argparse.SUPPRESS, help='.env 文件路径')
    common.add_argument('--quiet', action='store_true', default=argparse.SUPPRESS, help='只输出警告和错误')
    common.add_argument('--log-dir', type=str, default=argparse.SUPPRESS, help='日志文件目录')
    common.add_argument('--json-logs', action='store_true', default=argparse.SUPPRESS, help='JSON格式日志')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = _ArgumentParser(prog='oneshot', description='One-shot文档字段标注', parents=[common])
    sub = parser.add_subparsers(dest='command', metavar='{synth,train,eval,predict,stats}')
    sub.required = True

    p = sub.add_parser('synth', parents=[common], help='生成合成数据集')
    p.add_argument('--templates', type=int, default=16, help='模板数量')
    p.add_argument('--per-type', type=int, default=30, help='每个模板的文档数')
    p.add_argument('--out', required=True, help='输出目录')
    p.add_argument('--preset', choices=('default', 'crowded'), default='default')
    p.add_argument('--force', action='store_true', help='覆盖非空的输出目录')
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('train', parents=[common], help='训练模型')
    p.add_argument('--data', required=True, help='数据集目录')
    p.add_argument('--out', required=True, help='检查点路径')
    p.add_argument('--iters', type=int, help='迭代次数')
    p.add_argument('--batch', type=int, help='批大小（模板类型数）')
    p.add_argument('--lr', type=float, help='初始学习率')
    p.add_argument('--bp-steps', type=int, help='置信传播步数')
    p.add_argument('--avg-attn', action='store_true', default=None, help='AvgAttn消融')
    p.add_argument('--unary', choices=('lfattn', 'uniform'), help='一元分布来源')
    p.add_argument('--checkpoint-every', type=int, help='中间检查点间隔')
    p.add_argument('--resume', help='从检查点继续训练')
    p.add_argument('--loss-csv', help='损失轨迹CSV路径，默认与检查点同名')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', parents=[common], help='评估模型')
    p.add_argument('--data', required=True, help='数据集目录')
    p.add_argument('--ckpt', required=True, help='检查点路径')
    p.add_argument('--split', choices=('train', 'test', 'all'), default='test')
    p.add_argument('--shots', type=int, choices=(1, 5))
    p.add_argument('--drop-background', action='store_true', default=None, help='背景区域不计入准确率')
    p.add_argument('--landmark-drop', type=int, help='每对随机丢弃的landmark数')
    p.add_argument('--landmark-keep', type=int, help='每对只保留的landmark数')
    p.add_argument('--sweep-landmarks', help='逗号分隔的丢弃数列表，如 0,1,2')
    p.add_argument('--workers', type=int, help='并发线程数')
    p.add_argument('--report', help='JSON报告路径')
    p.add_argument('--confusion-dir', help='混淆矩阵CSV目录')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('predict', parents=[common], help='用一个支持文档标注查询文档')
    p.add_argument('--support', required=True)
    p.add_argument('--query', required=True)
    p.add_argument('--ckpt', required=True)
    p.add_argument('--out', help='输出JSON路径，默认打印到标准输出')
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser('stats', parents=[common], help='文档图稀疏度统计')
    p.add_argument('--data', required=True)
    p.set_defaults(handler=cmd_stats)

    return parser


def _dump(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def _load_config(args, overrides: Dict[str, Any]) -> ExperimentConfig:
    base = {
        'seed': getattr(args, 'seed', None),
        'log_dir': getattr(args, 'log_dir', None),
        'json_logs': True if getattr(args, 'json_logs', False) else None,
        'log_level': 'WARNING' if getattr(args, 'quiet', False) else None,
    }
    base.update(overrides)
    return ExperimentConfig(getattr(args, 'config', None), base, getattr(args, 'env_file', None))


def _command_overrides(args) -> Dict[str, Any]:
    mapping = {
        'iters': 'iterations', 'batch': 'batch_size', 'lr': 'base_lr', 'bp_steps': 'bp_steps',
        'avg_attn': 'avg_before_attention', 'unary': 'unary_source', 'checkpoint_every': 'checkpoint_every',
        'shots': 'shots', 'drop_background': 'drop_background', 'landmark_drop': 'landmark_drop',
        'landmark_keep': 'landmark_keep', 'workers': 'workers',
    }
    return {key: getattr(args, flag) for flag, key in mapping.items() if getattr(args, flag, None) is not None}


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

@exception_handler(logger=logger, handled_exceptions=(BaseLabelingError, OSError))
def cmd_synth(args, config: ExperimentConfig) -> int:
    if args.templates < 1:
        raise UsageError("--templates must be >= 1")
    if args.per_type < 2:
        raise UsageError("--per-type must be >= 2 (each type needs a support and a query document)")

    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise DatasetError(f"output directory {out} is not empty (use --force to overwrite)")
        for old in out.glob("*.json"):
            old.unlink()

    seed = config.seed
    if args.preset == 'crowded':
        specs = crowded_suite_specs(seed, args.templates)
    else:
        n_test = max(1, int(round(args.templates / 4.0))) if args.templates > 1 else 0
        specs = default_suite_specs(seed, args.templates - n_test, n_test, crowded=False)

    manifest = synth_generate(specs, args.per_type, seed)
    metadata = {
        "config": config.effective(),
        "generator": {"preset": args.preset, "templates": args.templates, "per_type": args.per_type,
                      "seed": seed},
    }
    written = save_dataset(manifest, out, metadata)
    print(f"Wrote {len(written) - 1} documents and {out / 'manifest.json'}")
    return EXIT_OK


def _split(manifest: DatasetManifest, split: str) -> DatasetManifest:
    if split == 'all':
        return manifest
    subset = manifest.subset(split)
    if not subset.documents:
        raise DatasetError(f"dataset has no '{split}' split")
    return subset


@exception_handler(logger=logger, handled_exceptions=(BaseLabelingError, OSError))
def cmd_train(args, config: ExperimentConfig) -> int:
    cfg = config.train_config()
    dataset = _split(load_dataset(args.data), 'train')
    resume = load_checkpoint(args.resume) if args.resume else None

    result = train(dataset, cfg, resume=resume, checkpoint_path=args.out)
    save_checkpoint(result.checkpoint, args.out)

    loss_csv = Path(args.loss_csv) if args.loss_csv else Path(args.out).with_suffix(".loss.csv")
    save_loss_trace(result.loss_trace, loss_csv)
    Path(args.out).with_suffix(".config.json").write_text(
        _dump({"config": config.effective(), "final_iteration": result.checkpoint.iteration}),
        encoding="utf-8",
    )

    if result.loss_trace:
        print(f"Trained {len(result.loss_trace)} iterations, final loss {result.loss_trace[-1][2]:.6f}")
    else:
        print("No training iterations run; checkpoint holds the initial parameters")
    return EXIT_OK


def _parse_int_list(text: str, flag: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}")
    if not values or any(v < 0 for v in values):
        raise UsageError(f"{flag} expects non-negative integers")
    return values


@exception_handler(logger=logger, handled_exceptions=(BaseLabelingError, OSError))
def cmd_eval(args, config: ExperimentConfig) -> int:
    sweep = _parse_int_list(args.sweep_landmarks, '--sweep-landmarks') if args.sweep_landmarks else None
    ck = load_checkpoint(args.ckpt)
    dataset = _split(load_dataset(args.data), args.split)
    settings = config.eval_settings()
    ray_cfg = ck.ray_config
    seed = config.seed

    outcomes, skipped = run_predictions(
        dataset, ck.params, settings['shots'], settings['landmark_drop'], settings['landmark_keep'],
        seed, ray_cfg, settings['workers'], settings['max_subsets'],
    )
    run_settings = {
        "shots": settings['shots'],
        "drop_background": settings['drop_background'],
        "landmark_drop": settings['landmark_drop'],
        "landmark_keep": settings['landmark_keep'],
        "seed": seed,
        "max_subsets": settings['max_subsets'],
        "ray_count": ray_cfg.ray_count,
        "ray_step_deg": ray_cfg.ray_step_deg,
    }
    report = aggregate(outcomes, settings['drop_background'], run_settings, skipped)

    extra: Dict[str, Any] = {"config": config.effective(), "checkpoint": str(args.ckpt),
                             "model_config": ck.params.config.to_dict()}
    print(report.to_text())

    if settings['drop_background']:
        with_bg = aggregate(outcomes, False, skipped=skipped).overall
        impact = {"acc_with_bg": with_bg, "acc_without_bg": report.overall, "incre": report.overall - with_bg}
        extra["background_impact"] = impact
        print(f"incre (drop background): {impact['incre']:+.4f}")

    if sweep is not None:
        frame = landmark_sweep(dataset, ck.params, drops=sweep, shots=settings['shots'], seed=seed,
                               ray_cfg=ray_cfg, workers=settings['workers'])
        extra["landmark_sweep"] = frame.to_dict(orient="records")
        print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))

    if args.report:
        report.write_json(args.report, extra)
    if args.confusion_dir:
        report.write_confusion_csv(args.confusion_dir)
    return EXIT_OK


@exception_handler(logger=logger, handled_exceptions=(BaseLabelingError, OSError))
def cmd_predict(args, config: ExperimentConfig) -> int:
    ck = load_checkpoint(args.ckpt)
    support = load_document(args.support)
    query = load_document(args.query)
    prediction = predict(support, query, ck.params, ck.ray_config)

    confidences = prediction.confidences
    labels = prediction.labels
    result = {
        "support": support.doc_id,
        "query": query.doc_id,
        "regions": [{"id": rid, "label": labels[rid], "confidence": confidences[rid]}
                    for rid in prediction.field_ids],
        "config": config.effective(),
        "model_config": ck.params.config.to_dict(),
    }
    text = _dump(result)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def stats_frame(manifest: DatasetManifest, ray_cfg) -> pd.DataFrame:
    """每个文档自身的图（全部landmark + 全部field）的稀疏度统计"""
    rows = []
    for t, docs in manifest.by_type().items():
        for doc in docs:
            space = LabelSpace.from_documents(doc)
            g = build_graph(doc, None, space, ray_cfg)
            row = {"doc_id": doc.doc_id, "type_id": t}
            row.update(graph_stats(g, space.size).to_dict())
            rows.append(row)
    return pd.DataFrame(rows)


@exception_handler(logger=logger, handled_exceptions=(BaseLabelingError, OSError))
def cmd_stats(args, config: ExperimentConfig) -> int:
    frame = stats_frame(load_dataset(args.data, min_per_type=1), config.ray_config())
    if frame.empty:
        raise DatasetError("dataset has no documents")

    shown = frame[["doc_id", "type_id", "n_fields", "n_ff_edges", "beta", "reduction"]].copy()
    mean = {"doc_id": "mean", "type_id": ""}
    for col in ("n_fields", "n_ff_edges", "beta", "reduction"):
        mean[col] = float(np.mean(frame[col]))
    shown = pd.concat([shown, pd.DataFrame([mean])], ignore_index=True)
    shown["reduction"] = shown["reduction"].map(lambda v: f"{100.0 * v:.1f}%")
    print(shown.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# main
# ---------------------------------------------------------------------------

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config(args, _command_overrides(args))
    except (UsageError, ConfigurationError) as e:
        print(f"error: {e.message}", file=sys.stderr)
        return EXIT_USAGE

    log = config.logging_settings()
    setup_logging(log_level=log['log_level'], log_dir=log['log_dir'], json_format=log['json_logs'])

    try:
        return args.handler(args, config)
    except (UsageError, ConfigurationError) as e:
        print(f"error: {e.message}", file=sys.stderr)
        return EXIT_USAGE
    except BaseLabelingError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
