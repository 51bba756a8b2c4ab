import os
import sys

import numpy as np
import pytest

SRC_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src")
if SRC_DIR not in sys.path:
    sys.path.insert(0, SRC_DIR)

from docgraph import BACKGROUND, Document, TextRegion  # noqa: E402
from geometry import BBox  # noqa: E402


def build_document(doc_id, type_id, landmarks, fields, width=200.0, height=200.0):
    """
    landmarks: [(id, (x0, y0, x1, y1), text)]
    fields: [(id, (x0, y0, x1, y1), label)]
    """
    regions = [TextRegion(rid, BBox(*box), text, "landmark") for rid, box, text in landmarks]
    regions += [TextRegion(rid, BBox(*box), f"value of {rid}", "field", label) for rid, box, label in fields]
    return Document(doc_id, type_id, width, height, tuple(regions))


INVOICE_LANDMARKS = [
    ("L0", (10.0, 10.0, 50.0, 20.0), "Invoice No:"),
    ("L1", (10.0, 40.0, 40.0, 50.0), "Date:"),
    ("L2", (10.0, 150.0, 40.0, 160.0), "Total:"),
]
INVOICE_FIELDS = [
    ("F0", (60.0, 10.0, 100.0, 20.0), "invoice_no"),
    ("F1", (60.0, 40.0, 100.0, 50.0), "date"),
    ("F2", (60.0, 150.0, 100.0, 160.0), "total"),
    ("F3", (120.0, 80.0, 160.0, 90.0), BACKGROUND),
]


def shifted(items, dx, dy):
    return [(rid, (b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy), extra) for rid, b, extra in items]


@pytest.fixture
def invoice_pair():
    """同一模板的两个文档；查询文档整体平移"""
    support = build_document("inv_a", "invoice", INVOICE_LANDMARKS, INVOICE_FIELDS)
    query = build_document("inv_b", "invoice", shifted(INVOICE_LANDMARKS, 5.0, 8.0),
                           shifted(INVOICE_FIELDS, 5.0, 8.0))
    return support, query


def random_document(rng, doc_id, n_landmarks, labels, texts=None, width=100.0, height=100.0):
    """在网格上随机放置不重叠的框；labels 给出每个field的标签"""
    n = n_landmarks + len(labels)
    cells = rng.permutation(25)[:n]
    boxes = []
    for c in cells:
        x0 = (c % 5) * 20.0 + rng.uniform(1.0, 6.0)
        y0 = (c // 5) * 20.0 + rng.uniform(1.0, 6.0)
        boxes.append((x0, y0, x0 + rng.uniform(5.0, 12.0), y0 + rng.uniform(4.0, 12.0)))
    texts = texts or [f"anchor {j}" for j in range(n_landmarks)]
    landmarks = [(f"L{j}", boxes[j], texts[j]) for j in range(n_landmarks)]
    fields = [(f"F{i}", boxes[n_landmarks + i], label) for i, label in enumerate(labels)]
    return build_document(doc_id, "random", landmarks, fields, width, height)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
