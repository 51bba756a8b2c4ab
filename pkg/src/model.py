"""
One-shot字段标注模型

LF原型聚合 -> LFAttn打分 (一阶信息)
FF原型聚合 -> FFAttn成对表 (二阶信息)
固定步数的同步置信传播，把两者合并为最终的字段分布。
整个前向计算都记录在当前Tape上，可端到端训练两个MLP。
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import tensorcore as tc
from docgraph import (
    DocumentGraph, Document, LabelSpace, build_pair_graphs,
    ff_feature_tensor, lf_feature_tensor,
)
from exceptions import (
    ConfigurationError, GraphError, NoCorrespondenceError, ShapeMismatchError, ValidationError,
)
from geometry import FEATURE_DIM, RayConfig, pair_features
from tensorcore import MLPParams, Tensor

logger = logging.getLogger(__name__)

UNARY_SOURCES = ("lfattn", "uniform")
LANDMARK_REDUCES = ("mean", "max")


@dataclass(frozen=True)
class ModelConfig:
    """
    模型配置

    bp_steps: 置信传播步数，0 时退化为纯LFAttn
    avg_before_attention: AvgAttn消融，先在landmark维上平均再做attention
    unary_source: "lfattn" 或 "uniform"（只用AttnBP）
    landmark_reduce: AvgAttn在landmark维上的聚合方式
    absent_score: 支持文档中未出现的标签/标签对的固定分数
    fill_unobserved_pairs: 两个标签都在支持文档中出现、但没有可见边相连时，
        用这两类字段的全部区域对特征的均值作为FF原型，而不是固定分数
    prob_floor: 取对数前的概率下限
    """
    bp_steps: int = 2
    avg_before_attention: bool = False
    unary_source: str = "lfattn"
    hidden_dims: Tuple[int, ...] = (32, 32)
    landmark_reduce: str = "mean"
    absent_score: float = -30.0
    prob_floor: float = 1e-30
    fill_unobserved_pairs: bool = True

    def __post_init__(self):
        if self.bp_steps < 0:
            raise ConfigurationError(f"bp_steps must be >= 0, got {self.bp_steps}", config_key="bp_steps")
        if self.unary_source not in UNARY_SOURCES:
            raise ConfigurationError(f"unary_source must be one of {UNARY_SOURCES}", config_key="unary_source")
        if self.landmark_reduce not in LANDMARK_REDUCES:
            raise ConfigurationError(f"landmark_reduce must be one of {LANDMARK_REDUCES}",
                                     config_key="landmark_reduce")
        if not self.hidden_dims or any(int(h) < 1 for h in self.hidden_dims):
            raise ConfigurationError(f"invalid hidden_dims {self.hidden_dims}", config_key="hidden_dims")
        if not self.prob_floor > 0:
            raise ConfigurationError("prob_floor must be positive", config_key="prob_floor")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        data = dict(data)
        if "hidden_dims" in data:
            data["hidden_dims"] = tuple(data["hidden_dims"])
        return cls(**data)


@dataclass(frozen=True)
class ModelParams:
    """两个MLP打分器（LF、FF，输入均为16维）及模型配置"""
    lf_mlp: MLPParams
    ff_mlp: MLPParams
    config: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name, mlp in (("lf_mlp", self.lf_mlp), ("ff_mlp", self.ff_mlp)):
            if mlp.dims[0] != 2 * FEATURE_DIM or mlp.dims[-1] != 1:
                raise ShapeMismatchError(f"{name} must map {2 * FEATURE_DIM} -> 1, got {mlp.dims}")

    def parameters(self) -> List[Tensor]:
        return self.lf_mlp.parameters() + self.ff_mlp.parameters()

    def with_parameters(self, values: Sequence[np.ndarray]) -> "ModelParams":
        n_lf = len(self.lf_mlp.parameters())
        return ModelParams(
            self.lf_mlp.with_values(values[:n_lf]),
            self.ff_mlp.with_values(values[n_lf:]),
            self.config,
        )


def init_model(seed: int, config: Optional[ModelConfig] = None) -> ModelParams:
    """两个MLP使用从同一种子派生的两个独立PCG64流"""
    config = config or ModelConfig()
    dims = (2 * FEATURE_DIM,) + config.hidden_dims + (1,)
    return ModelParams(
        lf_mlp=tc.init_params([seed, 0], dims),
        ff_mlp=tc.init_params([seed, 1], dims),
        config=config,
    )


@dataclass(frozen=True, eq=False)
class LFPrototypes:
    """c[k, j]: 标签为k的支持字段相对landmark j 的平均LF特征"""
    c: np.ndarray
    count: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return self.count > 0


@dataclass(frozen=True, eq=False)
class FFPrototypes:
    """
    c[k1, k2]: 端点标签为 (k1, k2) 的支持FF边的平均特征

    count 只统计可见边；filled 标记由区域对均值补齐的标签对
    """
    c: np.ndarray
    count: np.ndarray
    filled: Optional[np.ndarray] = None

    @property
    def present(self) -> np.ndarray:
        if self.filled is None:
            return self.count > 0
        return (self.count > 0) | self.filled

    def get(self, k1: int, k2: int) -> Optional[np.ndarray]:
        return self.c[k1, k2] if self.present[k1, k2] else None


@dataclass(eq=False)
class ForwardResult:
    """
    前向输出

    S: (|F|, K) LFAttn分数（uniform一元时为None）
    P0: (|F|, K) 初始置信
    Q: (E, K, K) 成对表（bp_steps=0 时为None）
    P_final: (|F|, K) 最终置信
    history: 每一步BP之后的置信
    """
    S: Optional[Tensor]
    P0: Tensor
    Q: Optional[Tensor]
    P_final: Tensor
    history: List[Tensor] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Prediction:
    """每个查询field区域的预测标签及其概率"""
    field_ids: Tuple[str, ...]
    probabilities: np.ndarray
    label_space: LabelSpace
    n_supports: int = 1

    @property
    def label_indices(self) -> np.ndarray:
        # np.argmax 并列时取最小索引
        return np.argmax(self.probabilities, axis=1)

    @property
    def labels(self) -> Dict[str, str]:
        return {fid: self.label_space.labels[k] for fid, k in zip(self.field_ids, self.label_indices)}

    @property
    def confidences(self) -> Dict[str, float]:
        return {fid: float(p) for fid, p in zip(self.field_ids, self.probabilities.max(axis=1))}


# ---------------------------------------------------------------------------
# 原型
# ---------------------------------------------------------------------------

def _require_labels(g: DocumentGraph):
    if not g.supervised:
        raise GraphError("support graph has no labeled fields", doc_id=g.doc_id)


def lf_prototypes(support: DocumentGraph) -> LFPrototypes:
    """按标签对支持文档的LF特征求均值"""
    _require_labels(support)
    feats = lf_feature_tensor(support)
    k = support.label_space.size
    c = np.zeros((k, support.n_landmarks, FEATURE_DIM))
    count = np.zeros(k, dtype=np.int64)
    for label in range(k):
        members = support.labels == label
        count[label] = int(np.count_nonzero(members))
        if count[label]:
            c[label] = feats[:, members, :].mean(axis=1)
    return LFPrototypes(c, count)


def _label_pair_means(k: int, y_a: np.ndarray, y_b: np.ndarray, feats: np.ndarray):
    sums = np.zeros((k, k, FEATURE_DIM))
    count = np.zeros((k, k), dtype=np.int64)
    np.add.at(sums, (y_a, y_b), feats)
    np.add.at(count, (y_a, y_b), 1)
    return np.divide(sums, np.maximum(count, 1)[..., None]), count


def ff_prototypes(support: DocumentGraph, fill_unobserved: bool = False) -> FFPrototypes:
    """
    按端点标签对求支持文档FF边特征的均值（含自环产生的 (k, k)）

    fill_unobserved 为真时，两端标签都出现过但没有可见边的标签对，
    取这两类字段所有有序区域对的特征均值，并在 filled 中标记。
    """
    _require_labels(support)
    feats = ff_feature_tensor(support)
    k = support.label_space.size
    y_src = support.labels[support.edge_src]
    y_dst = support.labels[support.edge_dst]
    labeled = (y_src >= 0) & (y_dst >= 0)
    c, count = _label_pair_means(k, y_src[labeled], y_dst[labeled], feats[labeled])
    if not fill_unobserved:
        return FFPrototypes(c, count)

    idx = np.flatnonzero(support.labels >= 0)
    a, b = (m.ravel() for m in np.meshgrid(idx, idx, indexing="ij"))
    y = support.labels
    dense_c, dense_count = _label_pair_means(
        k, y[a], y[b], pair_features(support.field_boxes[a], support.field_boxes[b]))
    filled = (count == 0) & (dense_count > 0)
    c[filled] = dense_c[filled]
    return FFPrototypes(c, count, filled)


# ---------------------------------------------------------------------------
# 注意力
# ---------------------------------------------------------------------------

def _mask_absent(scores: Tensor, present: np.ndarray, absent_score: float) -> Tensor:
    """缺失原型对应位置替换为固定分数，且不回传梯度"""
    present = np.broadcast_to(present, scores.shape)
    if present.all():
        return scores
    keep = present.astype(np.float64)
    offset = np.where(present, 0.0, absent_score)
    return tc.add(tc.mul(scores, keep), offset)


def lfattn_scores(
    q_lf: np.ndarray,
    protos: LFPrototypes,
    lf_mlp: MLPParams,
    absent_score: float = -30.0,
) -> Tensor:
    """
    对每个 (landmark j, field i, label k) 用MLP比较查询LF特征与原型，
    再在landmark维上取平均得到 S: (|F|, K)
    """
    n_l, n_f, _ = q_lf.shape
    n_k = protos.c.shape[0]
    if n_l == 0:
        raise GraphError("LFAttn needs at least one landmark")
    if protos.c.shape[1] != n_l:
        raise ShapeMismatchError("query and support landmark counts differ",
                                 shapes=(q_lf.shape, protos.c.shape))

    query_part = np.broadcast_to(q_lf[:, :, None, :], (n_l, n_f, n_k, FEATURE_DIM))
    proto_part = np.broadcast_to(protos.c.transpose(1, 0, 2)[:, None, :, :], (n_l, n_f, n_k, FEATURE_DIM))
    x = np.concatenate([query_part, proto_part], axis=-1)

    raw = tc.reshape(tc.mlp_apply(lf_mlp, x), (n_l, n_f, n_k))
    return _mask_absent(tc.mean(raw, axis=0), protos.present[None, :], absent_score)


def avgattn_scores(
    q_lf: np.ndarray,
    protos: LFPrototypes,
    lf_mlp: MLPParams,
    absent_score: float = -30.0,
    reduce: str = "mean",
) -> Tensor:
    """AvgAttn：先在landmark维上聚合查询特征和原型，再对每个 (i, k) 做一次MLP"""
    n_l, n_f, _ = q_lf.shape
    n_k = protos.c.shape[0]
    if n_l == 0:
        raise GraphError("AvgAttn needs at least one landmark")
    if protos.c.shape[1] != n_l:
        raise ShapeMismatchError("query and support landmark counts differ",
                                 shapes=(q_lf.shape, protos.c.shape))

    pool = np.max if reduce == "max" else np.mean
    q_avg = pool(q_lf, axis=0)
    c_avg = pool(protos.c, axis=1)
    x = np.concatenate([
        np.broadcast_to(q_avg[:, None, :], (n_f, n_k, FEATURE_DIM)),
        np.broadcast_to(c_avg[None, :, :], (n_f, n_k, FEATURE_DIM)),
    ], axis=-1)

    raw = tc.reshape(tc.mlp_apply(lf_mlp, x), (n_f, n_k))
    return _mask_absent(raw, protos.present[None, :], absent_score)


def ffattn_tables(
    q_ff: np.ndarray,
    protos: FFPrototypes,
    ff_mlp: MLPParams,
    absent_score: float = -30.0,
) -> Tensor:
    """
    每条边在 K*K 个标签对上的MLP分数，softmax后得到成对表 Q: (E, K, K)

    MLP只在有原型的标签对上求值（输入为 原型 ⊕ 边特征），
    再用0/1选择矩阵放回 K*K 个位置，其余位置为固定分数。
    """
    n_e = q_ff.shape[0]
    n_k = protos.c.shape[0]
    k2 = n_k * n_k
    present = protos.present.reshape(k2)
    cols = np.flatnonzero(present)

    if len(cols) == 0:
        raw = Tensor(np.full((n_e, k2), absent_score))
    else:
        scores = tc.reshape(
            tc.mlp_apply_outer(ff_mlp, q_ff, protos.c.reshape(k2, FEATURE_DIM)[cols], cols_first=True),
            (n_e, len(cols)))
        if len(cols) == k2:
            raw = scores
        else:
            select = np.zeros((len(cols), k2))
            select[np.arange(len(cols)), cols] = 1.0
            raw = tc.add(tc.matmul(scores, select), np.where(present, 0.0, absent_score))
    return tc.reshape(tc.exp(tc.log_softmax(raw)), (n_e, n_k, n_k))


# ---------------------------------------------------------------------------
# 置信传播
# ---------------------------------------------------------------------------

def belief_propagation(
    p0: tc.ArrayLike,
    edges: Sequence[Tuple[int, int]],
    q: tc.ArrayLike,
    steps: int,
    prob_floor: float = 1e-30,
    history: Optional[List[Tensor]] = None,
) -> Tensor:
    """
    固定步数的同步BP

    每一步: log P_i <- sum_{e=(j->i)} log(sum_l P_j(l) Q_e(l, .))，再按行归一化。
    同一步内所有消息都读取上一步的P；一元分布只作为初始置信经自环传递。
    """
    p0 = tc.as_tensor(p0)
    q = tc.as_tensor(q)
    n_f, n_k = p0.shape
    if steps < 0:
        raise ValidationError(f"steps must be >= 0, got {steps}", field="steps")
    if q.shape != (len(edges), n_k, n_k):
        raise ShapeMismatchError("pairwise tables do not align with edges",
                                 shapes=(q.shape, (len(edges), n_k, n_k)))

    src = np.array([s for s, _ in edges], dtype=np.int64)
    dst = np.array([d for _, d in edges], dtype=np.int64)
    loops = set(src[src == dst].tolist())
    missing = sorted(set(range(n_f)) - loops)
    if missing:
        raise GraphError(f"fields without a self-loop edge: {missing[:10]}")

    p = p0
    n_e = len(edges)
    for _ in range(steps):
        sender = tc.reshape(tc.gather_rows(p, src), (n_e, 1, n_k))
        messages = tc.reshape(tc.matmul(sender, q), (n_e, n_k))
        incoming = tc.scatter_add_rows(tc.log(messages, prob_floor), dst, n_f)
        p = tc.exp(tc.log_softmax(incoming))
        if history is not None:
            history.append(p)
    return p


# ---------------------------------------------------------------------------
# 前向、损失、预测
# ---------------------------------------------------------------------------

def forward(support: DocumentGraph, query: DocumentGraph, params: ModelParams) -> ForwardResult:
    """支持图+查询图 -> S, P0, Q, P_final；在当前Tape上记录"""
    cfg = params.config
    if support.label_space != query.label_space:
        raise GraphError("support and query graphs use different label spaces")
    if support.n_landmarks != query.n_landmarks:
        raise GraphError("support and query graphs are not landmark-aligned")

    n_k = support.label_space.size
    scores = None
    if cfg.unary_source == "lfattn":
        q_lf = lf_feature_tensor(query)
        protos = lf_prototypes(support)
        if cfg.avg_before_attention:
            scores = avgattn_scores(q_lf, protos, params.lf_mlp, cfg.absent_score, cfg.landmark_reduce)
        else:
            scores = lfattn_scores(q_lf, protos, params.lf_mlp, cfg.absent_score)
        p0 = tc.exp(tc.log_softmax(scores))
    else:
        p0 = Tensor(np.full((query.n_fields, n_k), 1.0 / n_k))

    tables = None
    history: List[Tensor] = []
    p_final = p0
    if cfg.bp_steps > 0:
        tables = ffattn_tables(ff_feature_tensor(query), ff_prototypes(support, cfg.fill_unobserved_pairs),
                               params.ff_mlp, cfg.absent_score)
        p_final = belief_propagation(p0, query.ff_edges, tables, cfg.bp_steps, cfg.prob_floor, history)

    return ForwardResult(S=scores, P0=p0, Q=tables, P_final=p_final, history=history)


def loss(p_final: Tensor, labels: np.ndarray, prob_floor: float = 1e-30) -> Tensor:
    """有标签字段上 -log P_final[i, y_i] 的平均"""
    return tc.negative_log_likelihood(tc.log(p_final, prob_floor), labels)


def predict(
    support: Document,
    query: Document,
    params: ModelParams,
    ray_cfg: RayConfig = RayConfig(),
    label_space: Optional[LabelSpace] = None,
    landmark_drop: int = 0,
    landmark_keep: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Prediction:
    """用一个支持文档标注查询文档；landmark无法匹配时抛出 no correspondence"""
    graphs = build_pair_graphs(
        support, query, label_space=label_space, ray_cfg=ray_cfg,
        landmark_drop=landmark_drop, landmark_keep=landmark_keep, rng=rng, query_labels=False,
    )
    result = forward(graphs.support, graphs.query, params)
    return Prediction(graphs.query.field_ids, result.P_final.data.copy(), graphs.label_space)


def fewshot_predict(
    supports: Sequence[Document],
    query: Document,
    params: ModelParams,
    ray_cfg: RayConfig = RayConfig(),
    landmark_drop: int = 0,
    landmark_keep: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Prediction:
    """
    多个支持文档的one-shot概率取平均后再argmax

    标签空间取所有支持文档标签的并集；某个支持文档匹配失败时跳过，
    全部失败才报错。不同支持文档匹配到的landmark不同，查询field集合
    可能不同，按区域id对齐后求平均。
    """
    if not supports:
        raise ValidationError("few-shot prediction needs at least one support", field="supports")

    label_space = LabelSpace.from_documents(*supports)
    sums: Dict[str, np.ndarray] = {}
    counts: Dict[str, int] = {}
    used = 0
    for support in supports:
        try:
            pred = predict(support, query, params, ray_cfg, label_space,
                           landmark_drop, landmark_keep, rng)
        except NoCorrespondenceError:
            logger.warning("Skipping support %s: no correspondence with %s", support.doc_id, query.doc_id)
            continue
        used += 1
        for fid, row in zip(pred.field_ids, pred.probabilities):
            if fid in sums:
                sums[fid] = sums[fid] + row
                counts[fid] += 1
            else:
                sums[fid] = row.copy()
                counts[fid] = 1

    if used == 0:
        raise NoCorrespondenceError(details={"query": query.doc_id, "supports": len(supports)})

    field_ids = tuple(r.id for r in query.regions if r.id in sums)
    probs = np.stack([sums[fid] / counts[fid] for fid in field_ids])
    return Prediction(field_ids, probs, label_space, n_supports=used)
