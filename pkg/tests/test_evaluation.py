import json
import math

import numpy as np
import pandas as pd
import pytest

from docgraph import BACKGROUND, Document, LabelSpace, TextRegion
from evaluation import (
    PairOutcome, aggregate, background_impact, confusion_matrix, evaluate, landmark_sweep,
    pair_accuracy, run_predictions, support_subsets,
)
from exceptions import EvaluationError
from geometry import BBox, RayConfig
from model import ModelConfig, init_model

from .conftest import INVOICE_FIELDS, INVOICE_LANDMARKS, build_document, shifted

RAYS = RayConfig(24, 15.0)


def _invoice_type(type_id, n_docs, fields=INVOICE_FIELDS):
    docs = []
    for i in range(n_docs):
        dx, dy = 4.0 * i, 3.0 * (i % 2)
        docs.append(build_document(f"{type_id}_{i}", type_id, shifted(INVOICE_LANDMARKS, dx, dy),
                                   shifted(fields, dx, dy)))
    return docs


def _params(seed=0):
    return init_model(seed, ModelConfig(hidden_dims=(8,)))


def _outcome(type_index, type_id, query_id, pred, gt, supports=("s",)):
    return PairOutcome(type_index, type_id, query_id, tuple(supports), pred, gt)


def test_pair_accuracy_values():
    gt = {"a": "total", "b": "date", "c": BACKGROUND, "d": "name"}
    assert pair_accuracy(dict(gt), gt) == 1.0
    assert pair_accuracy({k: "other" for k in gt}, gt) == 0.0
    pred = dict(gt, d="total")
    assert pair_accuracy(pred, gt) == 0.75
    assert pair_accuracy(pred, gt, drop_background=True) == pytest.approx(2 / 3)


def test_pair_accuracy_ignores_extra_predictions():
    gt = {"a": "total"}
    assert pair_accuracy({"a": "total", "L9": "date"}, gt) == 1.0


def test_pair_accuracy_errors():
    with pytest.raises(EvaluationError, match="region-set mismatch"):
        pair_accuracy({"a": "total"}, {"a": "total", "b": "date"})
    with pytest.raises(EvaluationError, match="no regions to score"):
        pair_accuracy({"a": BACKGROUND}, {"a": BACKGROUND}, drop_background=True)


def test_aggregate_is_unweighted_at_every_level():
    outcomes = [
        _outcome(0, "A", "a1", {"x": "k"}, {"x": "k"}),
        _outcome(1, "B", "b1", {"x": "k", "y": "k"}, {"x": "k", "y": "j"}),
        _outcome(1, "B", "b2", {"x": "j", "y": "j"}, {"x": "k", "y": "j"}),
    ]
    report = aggregate(outcomes)
    assert report.per_type == {"A": 1.0, "B": 0.5}
    assert report.overall == 0.75
    assert [q["n_pairs"] for q in report.per_query] == [1, 1, 1]


def test_aggregate_averages_pairs_within_a_query():
    outcomes = [
        _outcome(0, "A", "q", {"x": "k"}, {"x": "k"}, ("s1",)),
        _outcome(0, "A", "q", {"x": "j"}, {"x": "k"}, ("s2",)),
        _outcome(0, "A", "r", {"x": "k"}, {"x": "k"}, ("s1",)),
    ]
    report = aggregate(outcomes)
    assert report.per_type["A"] == pytest.approx(0.75)
    with pytest.raises(EvaluationError):
        aggregate([])


def test_confusion_matrix_counts():
    space = LabelSpace((BACKGROUND, "date", "total"))
    pairs = [
        ({"a": "date", "b": "total", "c": BACKGROUND}, {"a": "date", "b": "date", "c": BACKGROUND}),
        ({"a": "total"}, {"a": "total"}),
    ]
    m = confusion_matrix(pairs, space)
    assert m.tolist() == [[1, 0, 0], [0, 1, 1], [0, 0, 1]]
    assert m.sum(axis=1).tolist() == [1, 2, 1]


def test_support_subsets():
    assert support_subsets(4, 1, 1, seed=0, type_index=0) == [(0,), (2,), (3,)]
    assert len(support_subsets(6, 0, 5, seed=0, type_index=0)) == 1
    full = support_subsets(7, 0, 5, seed=0, type_index=0)
    assert len(full) == 6
    assert all(0 not in s for s in full)

    sampled = support_subsets(12, 3, 5, seed=1, type_index=2)
    assert len(sampled) == 20
    assert len(set(sampled)) == 20
    assert all(3 not in s and len(s) == 5 for s in sampled)
    assert sampled == support_subsets(12, 3, 5, seed=1, type_index=2)
    assert sampled != support_subsets(12, 3, 5, seed=2, type_index=2)


def test_evaluate_one_shot_report():
    data = {"invoice": _invoice_type("invoice", 3)}
    report = evaluate(data, _params(), ray_cfg=RAYS, workers=1)
    assert set(report.per_type) == {"invoice"}
    assert 0.0 <= report.overall <= 1.0
    assert len(report.per_query) == 3
    assert all(q["n_pairs"] == 2 for q in report.per_query)
    counts = report.confusion["invoice"]
    assert counts.sum() == 3 * 2 * len(INVOICE_FIELDS)
    assert report.confusion_labels["invoice"][0] == BACKGROUND
    assert report.skipped_pairs == 0
    assert list(report.table()["type"]) == ["invoice", "overall"]


def test_evaluate_is_independent_of_worker_count():
    data = {"a": _invoice_type("a", 3), "b": _invoice_type("b", 4)}
    params = _params(1)
    serial = evaluate(data, params, ray_cfg=RAYS, workers=1, landmark_drop=1, seed=5)
    threaded = evaluate(data, params, ray_cfg=RAYS, workers=4, landmark_drop=1, seed=5)
    assert serial.to_dict() == threaded.to_dict()


def test_pairs_without_correspondence_are_counted():
    docs = _invoice_type("mixed", 3)
    stranger = build_document("mixed_9", "mixed", [("Z", (0, 0, 5, 5), "Unrelated")],
                              [("G", (0, 20, 5, 25), "total")])
    outcomes, skipped = run_predictions({"mixed": docs + [stranger]}, _params(), ray_cfg=RAYS, workers=2)
    assert skipped == 6
    assert len(outcomes) == 6
    report = evaluate({"mixed": docs + [stranger]}, _params(), ray_cfg=RAYS, workers=2)
    assert report.skipped_pairs == 6


def test_five_shot_needs_enough_documents():
    with pytest.raises(EvaluationError):
        evaluate({"invoice": _invoice_type("invoice", 5)}, _params(), shots=5, ray_cfg=RAYS)
    report = evaluate({"invoice": _invoice_type("invoice", 6)}, _params(), shots=5, ray_cfg=RAYS, workers=2)
    assert all(q["n_pairs"] == 1 for q in report.per_query)
    assert report.settings["shots"] == 5


def test_background_impact_zero_without_background():
    fields = [f for f in INVOICE_FIELDS if f[2] != BACKGROUND]
    data = {"invoice": _invoice_type("invoice", 3, fields)}
    impact = background_impact(data, _params(), ray_cfg=RAYS, workers=1)
    assert impact.incre == 0.0
    assert impact.acc_with_bg == impact.acc_without_bg


def test_landmark_sweep_frame():
    data = {"invoice": _invoice_type("invoice", 3)}
    frame = landmark_sweep(data, _params(), drops=(0, 2), keeps=(1,), ray_cfg=RAYS, workers=1)
    assert list(frame.columns) == ["mode", "landmarks", "overall"]
    assert frame["mode"].tolist() == ["drop", "drop", "keep"]
    assert frame["overall"].between(0.0, 1.0).all()


def test_report_files(tmp_path):
    data = {"invoice": _invoice_type("invoice", 3)}
    report = evaluate(data, _params(), ray_cfg=RAYS, workers=1)
    path = tmp_path / "report.json"
    report.write_json(path, extra={"checkpoint": "model.ckpt"})
    saved = json.loads(path.read_text(encoding="utf-8"))
    assert saved["overall"] == report.overall
    assert saved["checkpoint"] == "model.ckpt"
    assert saved["confusion"]["invoice"]["labels"][0] == BACKGROUND

    written = report.write_confusion_csv(tmp_path / "confusion")
    frame = pd.read_csv(written[0], index_col=0)
    assert written[0].name == "confusion_invoice.csv"
    np.testing.assert_array_equal(frame.to_numpy(), report.confusion["invoice"])


def test_query_field_matched_as_landmark_is_not_scored():
    support = build_document("inv_0", "invoice", INVOICE_LANDMARKS, INVOICE_FIELDS)
    # 查询缺少 "Date:" landmark，但有一个文本恰好是 "Date:" 的背景字段
    base = build_document("inv_1", "invoice", [lm for lm in INVOICE_LANDMARKS if lm[0] != "L1"],
                          shifted(INVOICE_FIELDS, 3.0, 2.0))
    stray = TextRegion("X", BBox(12.0, 42.0, 42.0, 52.0), "Date:", "field", BACKGROUND)
    query = Document(base.doc_id, base.type_id, base.width, base.height, base.regions + (stray,))

    outcomes, skipped = run_predictions({"invoice": [support, query]}, _params(), ray_cfg=RAYS, workers=1)
    assert skipped == 0
    on_query = [o for o in outcomes if o.query_id == "inv_1"]
    assert len(on_query) == 1
    assert "X" not in on_query[0].gt
    assert set(on_query[0].gt) == {"F0", "F1", "F2", "F3"}

    report = evaluate({"invoice": [support, query]}, _params(), ray_cfg=RAYS, workers=1)
    assert len(report.per_query) == 2
    assert 0.0 <= report.overall <= 1.0


def test_background_only_pairs_are_counted_not_scored():
    blank = _invoice_type("blank", 2, [f for f in INVOICE_FIELDS if f[2] == BACKGROUND])
    data = {"invoice": _invoice_type("invoice", 3), "blank": blank}

    report = evaluate(data, _params(), drop_background=True, ray_cfg=RAYS, workers=1)
    assert report.unscored_pairs == 2
    assert set(report.per_type) == {"invoice"}
    assert report.overall == report.per_type["invoice"]
    assert report.to_dict()["unscored_pairs"] == 2

    kept = evaluate(data, _params(), ray_cfg=RAYS, workers=1)
    assert kept.unscored_pairs == 0
    assert kept.per_type["blank"] == 1.0

    impact = background_impact(data, _params(), ray_cfg=RAYS, workers=1)
    assert impact.acc_without_bg == report.overall


def test_nothing_to_score_gives_nan_overall():
    blank = _invoice_type("blank", 2, [f for f in INVOICE_FIELDS if f[2] == BACKGROUND])
    report = evaluate({"blank": blank}, _params(), drop_background=True, ray_cfg=RAYS, workers=1)
    assert report.per_type == {}
    assert math.isnan(report.overall)
    assert report.unscored_pairs == 2
