"""
文档图模块

文档模型、支持文档与查询文档之间的landmark文本匹配，
以及文档图 G = {L, F, LF, FF, Y} 的构建和边特征张量。
"""
import re
import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from exceptions import EmptyFieldsError, GraphError, NoCorrespondenceError, ValidationError
from geometry import BBox, Point, RayConfig, boxes_to_array, pair_features, visibility_edges

logger = logging.getLogger(__name__)

BACKGROUND = "background"
ROLE_LANDMARK = "landmark"
ROLE_FIELD = "field"
ROLES = (ROLE_LANDMARK, ROLE_FIELD)

_WHITESPACE = re.compile(r"\s+")


@dataclass(frozen=True)
class TextRegion:
    """OCR文本区域：框 + 文本 + 角色 + 可选标签"""
    id: str
    box: BBox
    text: str
    role: str
    label: Optional[str] = None
    quad: Optional[Tuple[Point, Point, Point, Point]] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"Region {self.id}: unknown role '{self.role}'", field="role")
        if self.role == ROLE_LANDMARK and self.label is not None:
            raise ValidationError(f"Region {self.id}: landmark must not carry a label", field="label")

    @property
    def is_landmark(self) -> bool:
        return self.role == ROLE_LANDMARK


@dataclass(frozen=True)
class Document:
    """一张文档：所属模板类型、页面尺寸和全部文本区域"""
    doc_id: str
    type_id: str
    width: float
    height: float
    regions: Tuple[TextRegion, ...]

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(f"Document {self.doc_id}: width/height must be positive")
        ids = [r.id for r in self.regions]
        if len(ids) != len(set(ids)):
            duplicates = sorted(k for k, v in Counter(ids).items() if v > 1)
            raise ValidationError(f"Document {self.doc_id}: duplicate region ids {duplicates}")

    def region(self, region_id: str) -> TextRegion:
        for r in self.regions:
            if r.id == region_id:
                return r
        raise KeyError(region_id)

    @property
    def landmarks(self) -> List[TextRegion]:
        return [r for r in self.regions if r.role == ROLE_LANDMARK]

    @property
    def fields(self) -> List[TextRegion]:
        return [r for r in self.regions if r.role == ROLE_FIELD]

    def field_labels(self) -> Dict[str, str]:
        """有标签的field区域 id -> 标签"""
        return {r.id: r.label for r in self.fields if r.label is not None}


@dataclass(frozen=True)
class LabelSpace:
    """有序标签空间，总是包含 background"""
    labels: Tuple[str, ...]

    def __post_init__(self):
        if BACKGROUND not in self.labels:
            raise ValidationError("label space must contain 'background'")
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError(f"label space has duplicates: {self.labels}")

    @classmethod
    def from_documents(cls, *docs: Document) -> "LabelSpace":
        """background 在首位，其余标签按字典序，保证多个支持文档之间索引一致"""
        names = {r.label for d in docs for r in d.fields if r.label is not None}
        names.discard(BACKGROUND)
        return cls((BACKGROUND,) + tuple(sorted(names)))

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise GraphError(f"label '{label}' is not in the label space {list(self.labels)}")


@dataclass(frozen=True)
class LandmarkMatch:
    """匹配结果：(支持landmark id, 查询区域id) 列表和被丢弃的支持landmark"""
    pairs: Tuple[Tuple[str, str], ...]
    dropped: Tuple[str, ...] = ()

    @property
    def support_ids(self) -> List[str]:
        return [s for s, _ in self.pairs]

    @property
    def query_ids(self) -> List[str]:
        return [q for _, q in self.pairs]


@dataclass(frozen=True, eq=False)
class DocumentGraph:
    """
    文档图

    landmark_boxes: (|L|, 4)，顺序与支持文档landmark顺序一致
    field_boxes: (|F|, 4)
    ff_edges: 有向稀疏边，包含每个field的自环，按 (src, dst) 排序
    labels: (|F|,) 标签索引，无标签为 -1
    LF边是隐式的完全二部图 |L| x |F|
    """
    doc_id: str
    landmark_ids: Tuple[str, ...]
    landmark_boxes: np.ndarray
    field_ids: Tuple[str, ...]
    field_boxes: np.ndarray
    ff_edges: Tuple[Tuple[int, int], ...]
    labels: np.ndarray
    label_space: LabelSpace

    @property
    def n_landmarks(self) -> int:
        return len(self.landmark_ids)

    @property
    def n_fields(self) -> int:
        return len(self.field_ids)

    @property
    def edge_src(self) -> np.ndarray:
        return np.array([s for s, _ in self.ff_edges], dtype=np.int64)

    @property
    def edge_dst(self) -> np.ndarray:
        return np.array([d for _, d in self.ff_edges], dtype=np.int64)

    @property
    def supervised(self) -> bool:
        return bool(np.any(self.labels >= 0))


@dataclass(frozen=True)
class GraphStats:
    """稀疏FF边的规模统计"""
    n_fields: int
    n_landmarks: int
    n_ff_edges: int
    beta: float
    mem_sparse_units: int
    mem_full_units: int
    reduction: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "n_fields": self.n_fields,
            "n_landmarks": self.n_landmarks,
            "n_ff_edges": self.n_ff_edges,
            "beta": self.beta,
            "mem_sparse_units": self.mem_sparse_units,
            "mem_full_units": self.mem_full_units,
            "reduction": self.reduction,
        }


def normalize_text(text: str) -> str:
    """NFKC、去首尾空白、合并内部空白、casefold"""
    text = unicodedata.normalize("NFKC", text)
    return _WHITESPACE.sub(" ", text.strip()).casefold()


def match_landmarks(support: Document, query: Document) -> LandmarkMatch:
    """
    按文本内容匹配landmark

    只有当支持文档中某个landmark的文本唯一、且查询文档中恰好有一个区域
    的文本与之相同时才建立对应；其余landmark都被丢弃（有歧义或缺失）。
    """
    support_landmarks = support.landmarks
    if not support_landmarks:
        raise GraphError("support document has no landmark regions", doc_id=support.doc_id)

    support_counts = Counter(normalize_text(r.text) for r in support_landmarks)
    query_index: Dict[str, List[str]] = {}
    for r in query.regions:
        query_index.setdefault(normalize_text(r.text), []).append(r.id)

    pairs, dropped = [], []
    for r in support_landmarks:
        key = normalize_text(r.text)
        candidates = query_index.get(key, [])
        if key and support_counts[key] == 1 and len(candidates) == 1:
            pairs.append((r.id, candidates[0]))
        else:
            dropped.append(r.id)

    if dropped:
        logger.debug(
            "Dropped %d of %d landmarks matching %s -> %s",
            len(dropped), len(support_landmarks), support.doc_id, query.doc_id
        )
    if not pairs:
        raise NoCorrespondenceError(details={"support": support.doc_id, "query": query.doc_id})

    return LandmarkMatch(tuple(pairs), tuple(dropped))


def reduce_match(
    match: LandmarkMatch,
    rng: np.random.Generator,
    drop: int = 0,
    keep: Optional[int] = None,
) -> LandmarkMatch:
    """随机丢弃 drop 个已匹配landmark，或只保留 keep 个；至少保留一个"""
    n = len(match.pairs)
    n_keep = n
    if drop > 0:
        n_keep = max(1, n - drop)
    if keep is not None:
        n_keep = max(1, min(n_keep, keep))
    if n_keep == n:
        return match

    kept = np.sort(rng.choice(n, size=n_keep, replace=False))
    kept_set = set(int(i) for i in kept)
    pairs = tuple(match.pairs[i] for i in range(n) if i in kept_set)
    removed = tuple(match.pairs[i][0] for i in range(n) if i not in kept_set)
    return LandmarkMatch(pairs, match.dropped + removed)


def build_graph(
    doc: Document,
    match: Optional[LandmarkMatch],
    label_space: LabelSpace,
    ray_cfg: RayConfig = RayConfig(),
    side: str = "query",
    with_labels: bool = True,
) -> DocumentGraph:
    """
    构建文档图

    Args:
        doc: 文档
        match: landmark匹配；为None时使用文档自身全部landmark
        label_space: 标签空间
        ray_cfg: 可见性射线参数
        side: "support" 或 "query"，决定使用match中的哪一侧id
        with_labels: 为False时忽略区域上的标签（推理时查询文档的标签不可用）

    查询文档中未被匹配为landmark的区域全部作为field；支持文档只取field区域。
    """
    if side not in ("support", "query"):
        raise ValidationError(f"side must be 'support' or 'query', got '{side}'", field="side")

    if match is None:
        landmarks = doc.landmarks
        fields = doc.fields
    else:
        ids = match.support_ids if side == "support" else match.query_ids
        landmarks = [doc.region(i) for i in ids]
        if side == "support":
            fields = doc.fields
        else:
            matched = set(ids)
            fields = [r for r in doc.regions if r.id not in matched]

    if not fields:
        raise EmptyFieldsError(doc_id=doc.doc_id)

    field_boxes = [r.box for r in fields]
    edges = set(visibility_edges(field_boxes, ray_cfg.ray_count, ray_cfg.ray_step_deg))
    edges.update((i, i) for i in range(len(fields)))

    labels = np.array(
        [label_space.index(r.label) if with_labels and r.label is not None else -1
         for r in fields],
        dtype=np.int64,
    )

    return DocumentGraph(
        doc_id=doc.doc_id,
        landmark_ids=tuple(r.id for r in landmarks),
        landmark_boxes=boxes_to_array(r.box for r in landmarks),
        field_ids=tuple(r.id for r in fields),
        field_boxes=boxes_to_array(field_boxes),
        ff_edges=tuple(sorted(edges)),
        labels=labels,
        label_space=label_space,
    )


@dataclass(frozen=True, eq=False)
class PairGraphs:
    """一个 (support, query) 对的两张图及其匹配"""
    support: DocumentGraph
    query: DocumentGraph
    match: LandmarkMatch
    label_space: LabelSpace


def build_pair_graphs(
    support: Document,
    query: Document,
    label_space: Optional[LabelSpace] = None,
    ray_cfg: RayConfig = RayConfig(),
    landmark_drop: int = 0,
    landmark_keep: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    query_labels: bool = True,
) -> PairGraphs:
    """匹配landmark并分别构建支持图和查询图，两张图的landmark索引对齐"""
    match = match_landmarks(support, query)
    if landmark_drop > 0 or landmark_keep is not None:
        if rng is None:
            raise ValidationError("landmark dropout needs a seeded rng", field="rng")
        match = reduce_match(match, rng, drop=landmark_drop, keep=landmark_keep)

    if label_space is None:
        docs = (support, query) if query_labels else (support,)
        label_space = LabelSpace.from_documents(*docs)

    return PairGraphs(
        support=build_graph(support, match, label_space, ray_cfg, side="support"),
        query=build_graph(query, match, label_space, ray_cfg, side="query", with_labels=query_labels),
        match=match,
        label_space=label_space,
    )


def lf_feature_tensor(g: DocumentGraph) -> np.ndarray:
    """LF边特征 (|L|, |F|, 8)，(j, i) = pair_feature(landmark_j, field_i)"""
    if g.n_landmarks < 1:
        raise GraphError("graph has no landmarks", doc_id=g.doc_id)
    n_l, n_f = g.n_landmarks, g.n_fields
    lm = np.broadcast_to(g.landmark_boxes[:, None, :], (n_l, n_f, 4))
    fb = np.broadcast_to(g.field_boxes[None, :, :], (n_l, n_f, 4))
    return pair_features(lm, fb)


def ff_feature_tensor(g: DocumentGraph) -> np.ndarray:
    """FF边特征 (E, 8)，顺序与 ff_edges 一致"""
    return pair_features(g.field_boxes[g.edge_src], g.field_boxes[g.edge_dst])


def graph_stats(g: DocumentGraph, n_labels: int) -> GraphStats:
    """稀疏边与全连接边的内存对比（单位：K^2 个浮点）"""
    n_f = g.n_fields
    n_e = len(g.ff_edges)
    k2 = n_labels * n_labels
    return GraphStats(
        n_fields=n_f,
        n_landmarks=g.n_landmarks,
        n_ff_edges=n_e,
        beta=n_e / n_f,
        mem_sparse_units=n_e * k2,
        mem_full_units=n_f * n_f * k2,
        reduction=1.0 - n_e / float(n_f * n_f),
    )
