"""
数据集读写与合成模板生成

文档JSON格式:
    {doc_id, type_id, width, height,
     regions: [{id, box: [x_min, y_min, x_max, y_max], quad?: [8个数], text,
                role: "landmark" | "field", label?}]}

数据集目录: 每个文档一个JSON文件，外加 manifest.json 列出文件和 train/test 划分。
"""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from docgraph import BACKGROUND, ROLE_FIELD, ROLE_LANDMARK, ROLES, Document, TextRegion
from exceptions import BaseLabelingError, DatasetError, SynthesisError
from geometry import BBox, Point, clamp_box
from tensorcore import make_rng

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SPLITS = ("train", "test")
MAX_RESAMPLES = 100
COORD_DECIMALS = 2

_REQUIRED_DOC_KEYS = ("doc_id", "type_id", "width", "height", "regions")
_REQUIRED_REGION_KEYS = ("id", "box", "text", "role")


# ---------------------------------------------------------------------------
# 文档 <-> JSON
# ---------------------------------------------------------------------------

def document_to_dict(doc: Document) -> Dict[str, Any]:
    regions = []
    for r in doc.regions:
        item: Dict[str, Any] = {
            "id": r.id,
            "box": list(r.box.as_tuple()),
            "text": r.text,
            "role": r.role,
        }
        if r.quad is not None:
            item["quad"] = [c for p in r.quad for c in (p.x, p.y)]
        if r.label is not None:
            item["label"] = r.label
        regions.append(item)
    return {
        "doc_id": doc.doc_id,
        "type_id": doc.type_id,
        "width": doc.width,
        "height": doc.height,
        "regions": regions,
    }


def _number(value: Any, what: str, doc_id: str, region_id: Optional[str] = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DatasetError(f"{what} must be a number, got {value!r}", doc_id=doc_id, region_id=region_id)
    return float(value)


def _region_from_dict(item: Mapping, doc_id: str, width: float, height: float, clamp: bool) -> TextRegion:
    if not isinstance(item, Mapping):
        raise DatasetError("region entry must be an object", doc_id=doc_id)
    rid = item.get("id")
    missing = [k for k in _REQUIRED_REGION_KEYS if k not in item]
    if missing:
        raise DatasetError(f"region {rid}: missing required keys {missing}", doc_id=doc_id,
                           region_id=str(rid) if rid is not None else None)
    rid = str(rid)

    raw_box = item["box"]
    if not isinstance(raw_box, Sequence) or len(raw_box) != 4:
        raise DatasetError(f"region {rid}: box must have 4 numbers", doc_id=doc_id, region_id=rid)
    coords = [_number(v, "box coordinate", doc_id, rid) for v in raw_box]

    quad = None
    if item.get("quad") is not None:
        raw_quad = item["quad"]
        if not isinstance(raw_quad, Sequence) or len(raw_quad) != 8:
            raise DatasetError(f"region {rid}: quad must have 8 numbers", doc_id=doc_id, region_id=rid)
        q = [_number(v, "quad coordinate", doc_id, rid) for v in raw_quad]
        quad = tuple(Point(q[i], q[i + 1]) for i in range(0, 8, 2))

    if item["role"] not in ROLES:
        raise DatasetError(f"region {rid}: unknown role {item['role']!r}", doc_id=doc_id, region_id=rid)
    if item["role"] == ROLE_LANDMARK and item.get("label") is not None:
        raise DatasetError(f"region {rid}: landmark must not carry a label", doc_id=doc_id, region_id=rid)

    try:
        box = BBox(*coords)
        if clamp:
            box = clamp_box(box, width, height)
        return TextRegion(
            id=rid,
            box=box,
            text=str(item["text"]),
            role=item["role"],
            label=item.get("label"),
            quad=quad,
        )
    except BaseLabelingError as e:
        raise DatasetError(f"region {rid}: {e.message}", doc_id=doc_id, region_id=rid, cause=e)


def document_from_dict(data: Mapping, clamp: bool = True) -> Document:
    """解析并校验一个文档；框裁剪到页面内。错误信息带文档id和区域id"""
    if not isinstance(data, Mapping):
        raise DatasetError("document must be a JSON object")
    doc_id = str(data.get("doc_id"))
    missing = [k for k in _REQUIRED_DOC_KEYS if k not in data]
    if missing:
        raise DatasetError(f"missing required keys {missing}", doc_id=doc_id)

    width = _number(data["width"], "width", doc_id)
    height = _number(data["height"], "height", doc_id)
    if not (width > 0 and height > 0):
        raise DatasetError("width and height must be positive", doc_id=doc_id)

    raw_regions = data["regions"]
    if not isinstance(raw_regions, list):
        raise DatasetError("regions must be a list", doc_id=doc_id)
    regions = tuple(_region_from_dict(item, doc_id, width, height, clamp) for item in raw_regions)
    if not any(r.role == ROLE_FIELD for r in regions):
        raise DatasetError("empty F: document has no field regions", doc_id=doc_id)

    try:
        return Document(doc_id, str(data["type_id"]), width, height, regions)
    except BaseLabelingError as e:
        raise DatasetError(e.message, doc_id=doc_id, cause=e)


def load_document(path) -> Document:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON in {path.name}: {e}", cause=e)
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}", cause=e)
    return document_from_dict(data)


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def save_document(doc: Document, path):
    Path(path).write_text(_dump_json(document_to_dict(doc)), encoding="utf-8")


# ---------------------------------------------------------------------------
# 数据集清单
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """按模板类型分组的文档集合及 train/test 划分"""
    documents: Tuple[Document, ...]
    splits: Dict[str, str]
    root: Optional[str] = None
    files: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for t in {d.type_id for d in self.documents}:
            split = self.splits.get(t)
            if split not in SPLITS:
                raise DatasetError(f"type {t}: split must be one of {SPLITS}, got {split!r}")

    def types(self, split: Optional[str] = None) -> List[str]:
        return sorted(t for t in {d.type_id for d in self.documents}
                      if split is None or self.splits[t] == split)

    def by_type(self, split: Optional[str] = None) -> Dict[str, List[Document]]:
        """{type_id: 按doc_id排序的文档}，类型按字典序"""
        groups: Dict[str, List[Document]] = {t: [] for t in self.types(split)}
        for d in self.documents:
            if d.type_id in groups:
                groups[d.type_id].append(d)
        return {t: sorted(docs, key=lambda d: d.doc_id) for t, docs in groups.items()}

    def subset(self, split: str) -> "DatasetManifest":
        types = set(self.types(split))
        return DatasetManifest(
            documents=tuple(d for d in self.documents if d.type_id in types),
            splits={t: s for t, s in self.splits.items() if t in types},
            root=self.root,
            files={k: v for k, v in self.files.items()},
        )

    @property
    def n_documents(self) -> int:
        return len(self.documents)

    def validate(self, min_per_type: int = 2):
        """每个类型至少 min_per_type 个文档；doc_id 全局唯一"""
        ids = [d.doc_id for d in self.documents]
        if len(ids) != len(set(ids)):
            raise DatasetError("duplicate document ids in dataset")
        for t, docs in self.by_type().items():
            if len(docs) < min_per_type:
                raise DatasetError(f"type {t} has {len(docs)} documents, need >= {min_per_type}",
                                   details={"type_id": t})


def load_dataset(path, min_per_type: int = 2) -> DatasetManifest:
    """
    读取数据集目录

    有 manifest.json 时按其列出的文件和划分读取；否则读取目录下全部
    文档JSON，全部视为训练集。
    """
    root = Path(path)
    if not root.exists():
        raise DatasetError(f"dataset path does not exist: {root}")
    if root.is_file():
        doc = load_document(root)
        manifest = DatasetManifest((doc,), {doc.type_id: "train"}, str(root.parent), {doc.doc_id: root.name})
        manifest.validate(min_per_type)
        return manifest

    manifest_path = root / MANIFEST_NAME
    splits: Dict[str, str] = {}
    entries: List[Tuple[str, Optional[str]]] = []
    if manifest_path.exists():
        try:
            meta = json.loads(manifest_path.read_text(encoding="utf-8"))
            for item in meta["documents"]:
                entries.append((item["file"], item.get("split")))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DatasetError(f"malformed {MANIFEST_NAME}: {e}", cause=e)
    else:
        entries = [(p.name, None) for p in sorted(root.glob("*.json"))]

    documents, files = [], {}
    for rel, split in entries:
        doc = load_document(root / rel)
        split = split or "train"
        if splits.setdefault(doc.type_id, split) != split:
            raise DatasetError(f"type {doc.type_id} appears in more than one split", doc_id=doc.doc_id)
        documents.append(doc)
        files[doc.doc_id] = rel

    manifest = DatasetManifest(tuple(documents), splits, str(root), files)
    manifest.validate(min_per_type)
    logger.info("Loaded dataset %s: %d documents, %d types (%d train / %d test)",
                root, manifest.n_documents, len(manifest.types()),
                len(manifest.types("train")), len(manifest.types("test")))
    return manifest


def save_dataset(manifest: DatasetManifest, out_dir, metadata: Optional[Mapping] = None) -> List[Path]:
    """写出每个文档的JSON和 manifest.json；metadata（如生效配置）写入清单"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, entries = [], []
    for doc in sorted(manifest.documents, key=lambda d: (d.type_id, d.doc_id)):
        rel = f"{doc.doc_id}.json"
        save_document(doc, out / rel)
        written.append(out / rel)
        entries.append({"doc_id": doc.doc_id, "file": rel, "split": manifest.splits[doc.type_id],
                        "type_id": doc.type_id})

    meta: Dict[str, Any] = {"version": MANIFEST_VERSION, "documents": entries}
    if metadata:
        meta["metadata"] = dict(metadata)
    (out / MANIFEST_NAME).write_text(_dump_json(meta), encoding="utf-8")
    written.append(out / MANIFEST_NAME)
    logger.info("Wrote %d documents to %s", len(entries), out)
    return written


# ---------------------------------------------------------------------------
# 合成模板
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JitterModel:
    """
    实例化扰动

    translate_sigma / region_sigma 以页面尺寸为单位；background_range 为每个实例
    使用的背景槽位数范围（闭区间），从模板背景槽位中随机选取
    """
    translate_sigma: float = 0.05
    scale_range: Tuple[float, float] = (0.9, 1.1)
    region_sigma: float = 0.01
    landmark_dropout: float = 0.0
    background_range: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise SynthesisError(f"invalid scale_range {self.scale_range}")
        if self.translate_sigma < 0 or self.region_sigma < 0:
            raise SynthesisError("jitter sigmas must be >= 0")
        if not 0 <= self.landmark_dropout < 1:
            raise SynthesisError("landmark_dropout must be in [0, 1)")
        b_lo, b_hi = self.background_range
        if not 0 <= b_lo <= b_hi:
            raise SynthesisError(f"invalid background_range {self.background_range}")

    @classmethod
    def none(cls, n_background: int = 0) -> "JitterModel":
        return cls(0.0, (1.0, 1.0), 0.0, 0.0, (n_background, n_background))


@dataclass(frozen=True)
class LandmarkSlot:
    text: str
    box: BBox


@dataclass(frozen=True)
class FieldSlot:
    """
    一个字段槽位；multi_region > 1 时名义框被横向切成多个子框，共享同一标签

    parts 非空时直接给出各个子框（如小票中隔行出现的同类字段），box 取其外接框
    """
    label: str
    box: BBox
    multi_region: int = 1
    parts: Tuple[BBox, ...] = ()

    @classmethod
    def spread(cls, label: str, parts: Sequence[BBox]) -> "FieldSlot":
        parts = tuple(parts)
        box = BBox(min(b.x_min for b in parts), min(b.y_min for b in parts),
                   max(b.x_max for b in parts), max(b.y_max for b in parts))
        return cls(label, box, len(parts), parts)

    def sub_boxes(self) -> List[BBox]:
        if self.parts:
            return list(self.parts)
        n = self.multi_region
        if n == 1:
            return [self.box]
        gap = 0.04 * self.box.width
        step = (self.box.width - gap * (n - 1)) / n
        return [
            BBox(self.box.x_min + i * (step + gap), self.box.y_min,
                 self.box.x_min + i * (step + gap) + step, self.box.y_max)
            for i in range(n)
        ]


@dataclass(frozen=True)
class TemplateSpec:
    name: str
    width: float
    height: float
    landmarks: Tuple[LandmarkSlot, ...]
    fields: Tuple[FieldSlot, ...]
    background_slots: Tuple[BBox, ...] = ()
    jitter: JitterModel = field(default_factory=JitterModel)
    split: str = "train"

    def __post_init__(self):
        if not self.landmarks:
            raise SynthesisError("template needs at least one landmark", template=self.name)
        if not self.fields:
            raise SynthesisError("template needs at least one field slot", template=self.name)
        labels = [f.label for f in self.fields]
        if len(labels) != len(set(labels)) or BACKGROUND in labels:
            raise SynthesisError(f"field labels must be distinct and not '{BACKGROUND}'", template=self.name)
        texts = [lm.text for lm in self.landmarks]
        if len(texts) != len(set(texts)):
            raise SynthesisError("landmark texts must be unique", template=self.name)
        if self.split not in SPLITS:
            raise SynthesisError(f"split must be one of {SPLITS}", template=self.name)
        if any(f.multi_region < 1 for f in self.fields):
            raise SynthesisError("multi_region must be >= 1", template=self.name)
        for box in self.nominal_boxes():
            if box.x_min < 0 or box.y_min < 0 or box.x_max > self.width or box.y_max > self.height:
                raise SynthesisError(f"nominal box {box.as_tuple()} is outside the page", template=self.name)

    def nominal_boxes(self) -> List[BBox]:
        boxes = [lm.box for lm in self.landmarks]
        for f in self.fields:
            boxes.extend(f.sub_boxes())
        boxes.extend(self.background_slots)
        return boxes

    def slot_table(self) -> Tuple[np.ndarray, List[str]]:
        """全部field/背景子框的名义中心及其标签，供最近槽位校验"""
        centers, labels = [], []
        for f in self.fields:
            for b in f.sub_boxes():
                centers.append((b.center.x, b.center.y))
                labels.append(f.label)
        for b in self.background_slots:
            centers.append((b.center.x, b.center.y))
            labels.append(BACKGROUND)
        return np.array(centers, dtype=np.float64), labels


_LANDMARK_WORDS = (
    "Invoice No", "Date", "Customer", "Address", "Phone", "Total", "Subtotal", "Tax",
    "Due Date", "Order", "Reference", "Account", "Amount", "Balance", "Cashier", "Terminal",
)
_FIELD_LABELS = (
    "invoice_no", "date", "customer", "address", "phone", "total", "subtotal", "tax",
    "due_date", "order_no", "reference", "account", "amount", "balance", "cashier", "terminal",
    "company", "email", "item", "price", "quantity", "discount", "payment", "change",
)


def _cell_box(rng: np.random.Generator, x0: float, y0: float, cw: float, ch: float) -> BBox:
    """在网格单元内放一个随机大小的框，四周留白"""
    w = cw * rng.uniform(0.45, 0.8)
    h = ch * rng.uniform(0.35, 0.6)
    x = x0 + (cw - w) * rng.uniform(0.1, 0.9)
    y = y0 + (ch - h) / 2.0
    return BBox(round(x, COORD_DECIMALS), round(y, COORD_DECIMALS),
                round(x + w, COORD_DECIMALS), round(y + h, COORD_DECIMALS))


def random_template_spec(
    rng: np.random.Generator,
    name: str,
    n_landmarks: int = 6,
    n_fields: int = 10,
    multi_region_prob: float = 0.1,
    background_fraction: float = 0.15,
    width: float = 1000.0,
    height: float = 1400.0,
    jitter: Optional[JitterModel] = None,
    split: str = "train",
) -> TemplateSpec:
    """
    曼哈顿布局的随机模板：页面中央区域划分为4列网格，
    landmark、字段槽位和背景槽位各占不重叠的单元
    """
    n_landmarks = min(n_landmarks, len(_LANDMARK_WORDS))
    n_fields = min(n_fields, len(_FIELD_LABELS))
    n_background = int(round(background_fraction * (n_landmarks + n_fields) / (1.0 - background_fraction)))
    n_cells = n_landmarks + n_fields + n_background

    cols = 4
    rows = max(8, -(-n_cells // cols))
    margin_x, margin_y = 0.12 * width, 0.12 * height
    cw = (width - 2 * margin_x) / cols
    ch = (height - 2 * margin_y) / rows
    cells = rng.permutation(rows * cols)[:n_cells]
    boxes = [_cell_box(rng, margin_x + (c % cols) * cw, margin_y + (c // cols) * ch, cw, ch) for c in cells]

    words = rng.permutation(len(_LANDMARK_WORDS))[:n_landmarks]
    landmarks = tuple(
        LandmarkSlot(f"{_LANDMARK_WORDS[int(w)]}:", boxes[i]) for i, w in enumerate(words)
    )
    labels = rng.permutation(len(_FIELD_LABELS))[:n_fields]
    fields = tuple(
        FieldSlot(_FIELD_LABELS[int(k)], boxes[n_landmarks + i],
                  multi_region=2 if rng.random() < multi_region_prob else 1)
        for i, k in enumerate(labels)
    )
    background = tuple(boxes[n_landmarks + n_fields:])
    if jitter is None:
        jitter = JitterModel(background_range=(len(background) // 2, len(background)))
    return TemplateSpec(name, width, height, landmarks, fields, background, jitter, split)


def crowded_template_spec(
    rng: np.random.Generator,
    name: str,
    n_rows: int = 10,
    width: float = 600.0,
    height: float = 1400.0,
    jitter: Optional[JitterModel] = None,
    split: str = "test",
) -> TemplateSpec:
    """
    类似小票的拥挤模板：只有2个landmark（抬头和合计），
    中间是多行交错的商品列：偶数行为 item/price，奇数行为 item_code/discount。
    左列两种字段位置相同，只能靠同一行右侧字段区分。
    """
    header = LandmarkSlot("RECEIPT", BBox(200.0, 140.0, 400.0, 180.0))
    row_h = (height - 500.0) / n_rows
    total_y = 240.0 + n_rows * row_h + 20.0
    total = LandmarkSlot("TOTAL", BBox(60.0, total_y, 200.0, total_y + 30.0))

    row_labels = (("item", "price"), ("item_code", "discount"))
    cols = (((60.0, 300.0), (400.0, 540.0)), ((60.0, 300.0), (440.0, 540.0)))
    parts: Dict[str, List[BBox]] = {}
    for r in range(n_rows):
        y = 240.0 + r * row_h + rng.uniform(0.0, 0.1) * row_h
        for label, (x0, x1) in zip(row_labels[r % 2], cols[r % 2]):
            parts.setdefault(label, []).append(BBox(x0, y, x1, y + 0.6 * row_h))

    slots = [FieldSlot("store", BBox(150.0, 190.0, 450.0, 220.0))]
    slots.extend(FieldSlot.spread(label, boxes) for label, boxes in parts.items())
    slots.append(FieldSlot("total", BBox(400.0, total_y, 540.0, total_y + 30.0)))
    background = (
        BBox(60.0, 80.0, 260.0, 110.0),
        BBox(60.0, total_y + 60.0, 540.0, total_y + 90.0),
        BBox(60.0, total_y + 110.0, 300.0, total_y + 140.0),
        BBox(340.0, total_y + 110.0, 540.0, total_y + 140.0),
    )

    if jitter is None:
        jitter = JitterModel(translate_sigma=0.02, region_sigma=0.003, background_range=(2, len(background)))
    return TemplateSpec(name, width, height, (header, total), tuple(slots), background, jitter, split)


def default_suite_specs(seed: int, n_train: int = 12, n_test: int = 4, crowded: bool = True) -> List[TemplateSpec]:
    """默认合成套件：训练模板、留出测试模板，外加一个拥挤模板族"""
    specs = []
    for t in range(n_train + n_test):
        rng = make_rng([seed, 1000, t])
        specs.append(random_template_spec(
            rng, f"t{t:02d}",
            n_landmarks=int(rng.integers(4, 9)),
            n_fields=int(rng.integers(8, 15)),
            split="train" if t < n_train else "test",
        ))
    if crowded:
        specs.append(crowded_template_spec(make_rng([seed, 2000, 0]), "crowded00", split="test"))
    return specs


def crowded_suite_specs(seed: int, n_templates: int = 4) -> List[TemplateSpec]:
    """只有拥挤模板的套件；约四分之一为测试集"""
    n_test = max(1, int(round(n_templates / 4.0)))
    return [
        crowded_template_spec(make_rng([seed, 2000, t]), f"crowded{t:02d}",
                              n_rows=8 + 2 * (t % 3),
                              split="train" if t < n_templates - n_test else "test")
        for t in range(n_templates)
    ]


def _field_text(rng: np.random.Generator, label: str) -> str:
    return f"{label[:3].upper()}-{int(rng.integers(0, 100000)):05d}"


def _jitter_boxes(
    spec: TemplateSpec,
    boxes: Sequence[BBox],
    rng: np.random.Generator,
) -> Tuple[List[BBox], float, np.ndarray]:
    """全局缩放（绕页面中心）+ 全局平移 + 每个区域的位置噪声"""
    j = spec.jitter
    page = np.array([spec.width, spec.height])
    scale = float(rng.uniform(*j.scale_range)) if j.scale_range[0] < j.scale_range[1] else j.scale_range[0]
    shift = rng.normal(0.0, j.translate_sigma, size=2) * page if j.translate_sigma > 0 else np.zeros(2)
    center = page / 2.0

    out = []
    for b in boxes:
        noise = rng.normal(0.0, j.region_sigma, size=2) * page if j.region_sigma > 0 else np.zeros(2)
        offset = center * (1.0 - scale) + shift + noise
        out.append(BBox(
            round(b.x_min * scale + offset[0], COORD_DECIMALS),
            round(b.y_min * scale + offset[1], COORD_DECIMALS),
            round(b.x_max * scale + offset[0], COORD_DECIMALS),
            round(b.y_max * scale + offset[1], COORD_DECIMALS),
        ))
    return out, scale, shift


def _on_page(spec: TemplateSpec, boxes: Sequence[BBox]) -> bool:
    return all(b.x_min >= 0 and b.y_min >= 0 and b.x_max <= spec.width and b.y_max <= spec.height
               for b in boxes)


def _landmark_frame(nominal: np.ndarray, observed: np.ndarray) -> Tuple[float, np.ndarray]:
    """用landmark中心做最小二乘估计 observed = s * nominal + t；单个landmark时只估计平移"""
    if len(nominal) < 2:
        return 1.0, observed[0] - nominal[0]
    n_mean, o_mean = nominal.mean(axis=0), observed.mean(axis=0)
    dn, do = nominal - n_mean, observed - o_mean
    denom = float(np.sum(dn * dn))
    s = float(np.sum(dn * do)) / denom if denom > 0 else 1.0
    return s, o_mean - s * n_mean


def nearest_slot_labels(spec: TemplateSpec, doc: Document) -> Dict[str, str]:
    """
    把文档的field区域映射回模板的landmark坐标系，返回每个区域最近名义槽位的标签
    """
    by_text = {lm.text: lm for lm in spec.landmarks}
    nominal, observed = [], []
    for r in doc.landmarks:
        slot = by_text.get(r.text)
        if slot is not None:
            nominal.append((slot.box.center.x, slot.box.center.y))
            observed.append((r.box.center.x, r.box.center.y))
    if not nominal:
        raise SynthesisError("document has no template landmarks", template=spec.name)
    s, t = _landmark_frame(np.array(nominal), np.array(observed))

    centers, labels = spec.slot_table()
    out = {}
    for r in doc.fields:
        c = (np.array([r.box.center.x, r.box.center.y]) - t) / s
        nearest = int(np.argmin(np.sum((centers - c) ** 2, axis=1)))
        out[r.id] = labels[nearest]
    return out


def _instance(spec: TemplateSpec, index: int, rng: np.random.Generator) -> Document:
    j = spec.jitter
    doc_id = f"{spec.name}_{index:03d}"

    for _ in range(MAX_RESAMPLES):
        # 第一个landmark始终保留，同一模板的任意两个实例至少共享一个landmark
        keep_lm = [True] + [bool(rng.random() >= j.landmark_dropout) for _ in spec.landmarks[1:]]
        n_bg = min(int(rng.integers(j.background_range[0], j.background_range[1] + 1)),
                   len(spec.background_slots))
        bg_idx = sorted(int(i) for i in rng.choice(len(spec.background_slots), size=n_bg, replace=False)) \
            if n_bg else []

        nominal: List[BBox] = []
        meta: List[Tuple[str, str, Optional[str], str]] = []
        for i, lm in enumerate(spec.landmarks):
            if keep_lm[i]:
                nominal.append(lm.box)
                meta.append((f"L{i:02d}", ROLE_LANDMARK, None, lm.text))
        for i, fs in enumerate(spec.fields):
            subs = fs.sub_boxes()
            for m, b in enumerate(subs):
                nominal.append(b)
                rid = f"F{i:02d}" if len(subs) == 1 else f"F{i:02d}_{m}"
                meta.append((rid, ROLE_FIELD, fs.label, _field_text(rng, fs.label)))
        for b in bg_idx:
            nominal.append(spec.background_slots[b])
            meta.append((f"B{b:02d}", ROLE_FIELD, BACKGROUND, f"note {int(rng.integers(0, 1000)):03d}"))

        boxes, _, _ = _jitter_boxes(spec, nominal, rng)
        if not _on_page(spec, boxes):
            continue

        regions = tuple(
            TextRegion(id=rid, box=box, text=text, role=role, label=label)
            for (rid, role, label, text), box in zip(meta, boxes)
        )
        doc = Document(doc_id, spec.name, spec.width, spec.height, regions)
        oracle = nearest_slot_labels(spec, doc)
        if all(oracle[r.id] == r.label for r in doc.fields):
            return doc

    raise SynthesisError(f"could not place instance {index} on the page after {MAX_RESAMPLES} attempts",
                         template=spec.name)


def synth_generate(specs: Sequence[TemplateSpec], per_type: int, seed: int) -> DatasetManifest:
    """
    按模板生成合成数据集

    每个 (模板序号, 实例序号) 使用独立的PCG64流，结果只取决于 specs、per_type 和 seed
    """
    if per_type < 1:
        raise SynthesisError(f"per_type must be >= 1, got {per_type}")
    names = [s.name for s in specs]
    if len(names) != len(set(names)):
        raise SynthesisError("template names must be unique")

    documents, splits = [], {}
    for t_idx, spec in enumerate(specs):
        splits[spec.name] = spec.split
        for i in range(per_type):
            documents.append(_instance(spec, i, make_rng([seed, t_idx, i])))
    logger.info("Generated %d documents from %d templates (seed=%d)", len(documents), len(specs), seed)
    return DatasetManifest(tuple(documents), splits)


def template_with_jitter(spec: TemplateSpec, jitter: JitterModel) -> TemplateSpec:
    return replace(spec, jitter=jitter)
