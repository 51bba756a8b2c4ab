"""
评估模块

逐对准确率 -> 每个查询取平均 -> 每个类型取平均 -> 所有类型的无加权平均。
1-shot 对同类型其余每个文档各做一次预测；5-shot 对每个查询抽取至多20个
5文档支持子集。评估对在线程池中并发执行，结果按 (类型, 查询, 支持) 顺序汇总。
"""
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from docgraph import BACKGROUND, Document, LabelSpace
from exceptions import EvaluationError, NoCorrespondenceError
from geometry import RayConfig
from model import ModelParams, fewshot_predict, predict
from tensorcore import make_rng

logger = logging.getLogger(__name__)

MAX_FEWSHOT_SUBSETS = 20
DEFAULT_WORKERS = 4


def pair_accuracy(
    pred: Mapping[str, str],
    gt: Mapping[str, str],
    drop_background: bool = False,
) -> float:
    """
    一个 (查询, 支持) 对的准确率

    分母为查询文档中带真值标签的field区域（landmark不计入）；
    drop_background 时背景区域也不计入。预测中缺少任何真值区域视为区域集合不一致。
    """
    missing = sorted(set(gt) - set(pred))
    if missing:
        raise EvaluationError(f"region-set mismatch: predictions missing {missing[:10]}")
    scored = [rid for rid, label in gt.items() if not (drop_background and label == BACKGROUND)]
    if not scored:
        raise EvaluationError("no regions to score")
    correct = sum(1 for rid in scored if pred[rid] == gt[rid])
    return correct / len(scored)


def confusion_matrix(
    predictions: Iterable[Tuple[Mapping[str, str], Mapping[str, str]]],
    label_space: LabelSpace,
) -> np.ndarray:
    """counts[真值][预测]，对所有 (预测, 真值) 对累加"""
    counts = np.zeros((label_space.size, label_space.size), dtype=np.int64)
    for pred, gt in predictions:
        for rid, label in gt.items():
            counts[label_space.index(label), label_space.index(pred[rid])] += 1
    return counts


@dataclass(frozen=True)
class PairOutcome:
    """一次预测（1-shot为一个支持文档，5-shot为一个支持子集）"""
    type_index: int
    type_id: str
    query_id: str
    support_ids: Tuple[str, ...]
    pred: Dict[str, str]
    gt: Dict[str, str]


@dataclass
class EvalReport:
    per_type: Dict[str, float]
    overall: float
    per_query: List[Dict[str, Any]]
    confusion: Dict[str, np.ndarray]
    confusion_labels: Dict[str, Tuple[str, ...]]
    settings: Dict[str, Any]
    skipped_pairs: int = 0
    unscored_pairs: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "overall": self.overall,
            "per_type": dict(self.per_type),
            "per_query": list(self.per_query),
            "confusion": {
                t: {"labels": list(self.confusion_labels[t]), "counts": m.tolist()}
                for t, m in self.confusion.items()
            },
            "settings": dict(self.settings),
            "skipped_pairs": self.skipped_pairs,
            "unscored_pairs": self.unscored_pairs,
        }

    def table(self) -> pd.DataFrame:
        rows = [{"type": t, "accuracy": acc} for t, acc in self.per_type.items()]
        rows.append({"type": "overall", "accuracy": self.overall})
        return pd.DataFrame(rows, columns=["type", "accuracy"])

    def to_text(self) -> str:
        return self.table().to_string(index=False, float_format=lambda v: f"{v:.4f}")

    def write_json(self, path, extra: Optional[Mapping[str, Any]] = None):
        data = self.to_dict()
        if extra:
            data.update(extra)
        Path(path).write_text(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
        logger.info("Report written to %s", path)

    def write_confusion_csv(self, out_dir) -> List[Path]:
        """每个类型一个CSV：行为真值标签，列为预测标签"""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for t, counts in self.confusion.items():
            labels = list(self.confusion_labels[t])
            frame = pd.DataFrame(counts, index=pd.Index(labels, name="gt"), columns=labels)
            path = out / f"confusion_{t}.csv"
            frame.to_csv(path, lineterminator="\n")
            written.append(path)
        return written


@dataclass(frozen=True)
class BackgroundImpact:
    acc_with_bg: float
    acc_without_bg: float
    incre: float

    def to_dict(self) -> Dict[str, float]:
        return {"acc_with_bg": self.acc_with_bg, "acc_without_bg": self.acc_without_bg, "incre": self.incre}


@dataclass(frozen=True)
class _Task:
    type_index: int
    type_id: str
    query_index: int
    query: Document
    support_indices: Tuple[int, ...]
    supports: Tuple[Document, ...] = field(default=())


def _grouped(dataset) -> Dict[str, List[Document]]:
    if hasattr(dataset, "by_type"):
        dataset = dataset.by_type()
    return {t: list(dataset[t]) for t in sorted(dataset)}


def support_subsets(n_docs: int, query_index: int, shots: int, seed: int,
                    type_index: int, max_subsets: int = MAX_FEWSHOT_SUBSETS) -> List[Tuple[int, ...]]:
    """
    查询之外的文档中选 shots 个作为支持集

    1-shot 返回全部单个文档；多shot时组合数不超过 max_subsets 则全部枚举，
    否则用种子抽取 max_subsets 个不同子集
    """
    others = [i for i in range(n_docs) if i != query_index]
    if shots == 1:
        return [(i,) for i in others]
    if math.comb(len(others), shots) <= max_subsets:
        return list(itertools.combinations(others, shots))

    rng = make_rng([seed, type_index, query_index, shots])
    chosen, seen = [], set()
    while len(chosen) < max_subsets:
        subset = tuple(sorted(int(others[i]) for i in rng.choice(len(others), size=shots, replace=False)))
        if subset not in seen:
            seen.add(subset)
            chosen.append(subset)
    return chosen


def _ground_truth(query: Document) -> Dict[str, str]:
    return query.field_labels()


def _build_tasks(groups: Dict[str, List[Document]], shots: int, seed: int, max_subsets: int) -> List[_Task]:
    tasks = []
    for t_idx, (type_id, docs) in enumerate(groups.items()):
        if len(docs) <= shots:
            raise EvaluationError(f"type {type_id} has {len(docs)} documents, need > {shots} for {shots}-shot",
                                  type_id=type_id)
        for q_idx, query in enumerate(docs):
            for subset in support_subsets(len(docs), q_idx, shots, seed, t_idx, max_subsets):
                tasks.append(_Task(t_idx, type_id, q_idx, query, subset, tuple(docs[i] for i in subset)))
    return tasks


def _run_task(
    task: _Task,
    params: ModelParams,
    ray_cfg: RayConfig,
    seed: int,
    landmark_drop: int,
    landmark_keep: Optional[int],
) -> Optional[PairOutcome]:
    rng = make_rng([seed, task.type_index, task.query_index, *task.support_indices])
    try:
        if len(task.supports) == 1:
            prediction = predict(task.supports[0], task.query, params, ray_cfg,
                                 landmark_drop=landmark_drop, landmark_keep=landmark_keep, rng=rng)
        else:
            prediction = fewshot_predict(task.supports, task.query, params, ray_cfg,
                                         landmark_drop=landmark_drop, landmark_keep=landmark_keep, rng=rng)
    except NoCorrespondenceError:
        logger.warning("No correspondence for query %s with supports %s",
                       task.query.doc_id, [s.doc_id for s in task.supports])
        return None

    # 匹配为landmark的查询区域是已知锚点，不参与预测也不参与打分
    pred = prediction.labels
    gt = {rid: label for rid, label in _ground_truth(task.query).items() if rid in pred}
    logger.debug("Predicted %s with %d support(s), %d labeled region(s) matched as landmarks",
                 task.query.doc_id, len(task.supports), len(task.query.field_labels()) - len(gt))
    return PairOutcome(
        type_index=task.type_index,
        type_id=task.type_id,
        query_id=task.query.doc_id,
        support_ids=tuple(s.doc_id for s in task.supports),
        pred=pred,
        gt=gt,
    )


def run_predictions(
    dataset,
    params: ModelParams,
    shots: int = 1,
    landmark_drop: int = 0,
    landmark_keep: Optional[int] = None,
    seed: int = 0,
    ray_cfg: RayConfig = RayConfig(),
    workers: int = DEFAULT_WORKERS,
    max_subsets: int = MAX_FEWSHOT_SUBSETS,
) -> Tuple[List[PairOutcome], int]:
    """并发执行全部评估对；返回按任务顺序排列的结果和跳过的对数"""
    if shots < 1:
        raise EvaluationError(f"shots must be >= 1, got {shots}")
    groups = _grouped(dataset)
    if not groups:
        raise EvaluationError("dataset has no template types to evaluate")
    tasks = _build_tasks(groups, shots, seed, max_subsets)
    logger.info("Evaluating %d %d-shot tasks over %d types with %d workers",
                len(tasks), shots, len(groups), workers)

    def run(task: _Task) -> Optional[PairOutcome]:
        return _run_task(task, params, ray_cfg, seed, landmark_drop, landmark_keep)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    outcomes = [r for r in results if r is not None]
    return outcomes, len(results) - len(outcomes)


def aggregate(
    outcomes: Sequence[PairOutcome],
    drop_background: bool = False,
    settings: Optional[Mapping[str, Any]] = None,
    skipped: int = 0,
) -> EvalReport:
    """
    对 -> 查询 -> 类型 -> 总体，每一层都是无加权平均

    没有可打分区域的对（例如 drop_background 时查询只有背景字段）不计入平均，
    计数记在 unscored_pairs；所有对都无法打分时 overall 为 NaN。
    """
    by_query: Dict[Tuple[int, str], List[float]] = {}
    type_of: Dict[Tuple[int, str], str] = {}
    confusion_pairs: Dict[str, List[Tuple[Dict[str, str], Dict[str, str]]]] = {}
    unscored = 0
    for o in outcomes:
        confusion_pairs.setdefault(o.type_id, []).append((o.pred, o.gt))
        if all(drop_background and label == BACKGROUND for label in o.gt.values()):
            unscored += 1
            continue
        key = (o.type_index, o.query_id)
        by_query.setdefault(key, []).append(pair_accuracy(o.pred, o.gt, drop_background))
        type_of[key] = o.type_id

    if not outcomes:
        raise EvaluationError("no evaluation pair produced a prediction")
    if unscored:
        logger.warning("%d evaluation pair(s) have no region to score", unscored)

    per_query, per_type_values = [], {}
    for key, accs in by_query.items():
        acc = float(np.mean(accs))
        per_query.append({"type_id": type_of[key], "query_id": key[1], "accuracy": acc, "n_pairs": len(accs)})
        per_type_values.setdefault(type_of[key], []).append(acc)

    per_type = {t: float(np.mean(v)) for t, v in per_type_values.items()}
    overall = float(np.mean(list(per_type.values()))) if per_type else float("nan")

    confusion, confusion_labels = {}, {}
    for t, pairs in confusion_pairs.items():
        names = {label for pred, gt in pairs for label in list(gt.values()) + list(pred.values())}
        names.discard(BACKGROUND)
        space = LabelSpace((BACKGROUND,) + tuple(sorted(names)))
        confusion[t] = confusion_matrix(pairs, space)
        confusion_labels[t] = space.labels

    return EvalReport(
        per_type=per_type,
        overall=overall,
        per_query=per_query,
        confusion=confusion,
        confusion_labels=confusion_labels,
        settings=dict(settings or {}),
        skipped_pairs=skipped,
        unscored_pairs=unscored,
    )


def evaluate(
    dataset,
    params: ModelParams,
    shots: int = 1,
    drop_background: bool = False,
    landmark_drop: int = 0,
    landmark_keep: Optional[int] = None,
    seed: int = 0,
    ray_cfg: RayConfig = RayConfig(),
    workers: int = DEFAULT_WORKERS,
    max_subsets: int = MAX_FEWSHOT_SUBSETS,
) -> EvalReport:
    """
    评估协议

    Args:
        dataset: {type_id: [Document]} 或数据集清单（测试集）
        params: 模型参数
        shots: 1 或 5
        drop_background: 背景区域不计入准确率分母
        landmark_drop: 每对随机丢弃的已匹配landmark数（带种子）
        landmark_keep: 每对只保留的已匹配landmark数
    """
    outcomes, skipped = run_predictions(dataset, params, shots, landmark_drop, landmark_keep,
                                        seed, ray_cfg, workers, max_subsets)
    settings = {
        "shots": shots,
        "drop_background": drop_background,
        "landmark_drop": landmark_drop,
        "landmark_keep": landmark_keep,
        "seed": seed,
        "max_subsets": max_subsets,
        "ray_count": ray_cfg.ray_count,
        "ray_step_deg": ray_cfg.ray_step_deg,
    }
    report = aggregate(outcomes, drop_background, settings, skipped)
    logger.info("Evaluation done: overall %.4f over %d types", report.overall, len(report.per_type))
    return report


def background_impact(
    dataset,
    params: ModelParams,
    shots: int = 1,
    seed: int = 0,
    ray_cfg: RayConfig = RayConfig(),
    workers: int = DEFAULT_WORKERS,
) -> BackgroundImpact:
    """同一批预测分别计入/不计入背景区域打分；incre = 不计入 - 计入"""
    outcomes, skipped = run_predictions(dataset, params, shots, seed=seed, ray_cfg=ray_cfg, workers=workers)
    with_bg = aggregate(outcomes, False, skipped=skipped).overall
    without_bg = aggregate(outcomes, True, skipped=skipped).overall
    return BackgroundImpact(with_bg, without_bg, without_bg - with_bg)


def landmark_sweep(
    dataset,
    params: ModelParams,
    drops: Sequence[int] = (0, 1, 2),
    keeps: Sequence[int] = (),
    shots: int = 1,
    seed: int = 0,
    ray_cfg: RayConfig = RayConfig(),
    workers: int = DEFAULT_WORKERS,
) -> pd.DataFrame:
    """准确率随landmark数量变化的曲线：丢弃N个，或只保留N个"""
    rows = []
    for n in drops:
        report = evaluate(dataset, params, shots, landmark_drop=int(n), seed=seed, ray_cfg=ray_cfg, workers=workers)
        rows.append({"mode": "drop", "landmarks": int(n), "overall": report.overall})
    for n in keeps:
        report = evaluate(dataset, params, shots, landmark_keep=int(n), seed=seed, ray_cfg=ray_cfg, workers=workers)
        rows.append({"mode": "keep", "landmarks": int(n), "overall": report.overall})
    return pd.DataFrame(rows, columns=["mode", "landmarks", "overall"])
