import numpy as np
import pandas as pd
import pytest

import tensorcore as tc
from docgraph import LabelSpace, build_pair_graphs
from exceptions import CheckpointError, ConfigurationError, SamplingError
from geometry import RayConfig
from model import forward
from train import (
    TrainConfig, checkpoint_from_bytes, checkpoint_to_bytes, initial_checkpoint, load_checkpoint,
    sample_batch, save_checkpoint, save_loss_trace, train, train_step,
)

from .conftest import build_document, random_document

LABELS = ["name", "date", "total", "background"]


def _toy_dataset(n_types=8, per_type=3, seed=0):
    """每个类型共享landmark文本，版式随机"""
    data = {}
    for t in range(n_types):
        texts = [f"type{t} anchor {j}" for j in range(3)]
        docs = []
        for i in range(per_type):
            rng = np.random.Generator(np.random.PCG64([seed, t, i]))
            doc = random_document(rng, f"t{t}_d{i}", 3, LABELS, texts=texts)
            docs.append(doc)
        data[f"type{t}"] = docs
    return data


def _tiny_config(**overrides):
    base = dict(batch_size=8, iterations=2, hidden_dims=(4,), ray_count=8, ray_step_deg=45.0,
                log_every=1, seed=3)
    base.update(overrides)
    return TrainConfig(**base)


def _param_arrays(params):
    return [t.data for t in params.parameters()]


def test_train_config_validation_and_round_trip():
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(unary_source="nope")
    cfg = _tiny_config(avg_before_attention=True)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.ray_config() == RayConfig(8, 45.0)


def test_sample_batch_covers_every_type_once():
    data = _toy_dataset()
    batch = sample_batch(data, tc.make_rng(1), batch_size=8)
    assert len(batch) == 8
    types = {s.doc_id.split("_")[0] for s, _ in batch}
    assert len(types) == 8
    for support, query in batch:
        assert support.doc_id != query.doc_id
        assert support.doc_id.split("_")[0] == query.doc_id.split("_")[0]


def test_sample_batch_is_deterministic():
    data = _toy_dataset()
    a = sample_batch(data, tc.make_rng(9), batch_size=4)
    b = sample_batch(data, tc.make_rng(9), batch_size=4)
    assert [(s.doc_id, q.doc_id) for s, q in a] == [(s.doc_id, q.doc_id) for s, q in b]


def test_sample_batch_needs_enough_types():
    data = _toy_dataset(n_types=8)
    data["type0"] = data["type0"][:1]
    with pytest.raises(SamplingError):
        sample_batch(data, tc.make_rng(0), batch_size=8)


def test_zero_iterations_leaves_params_untouched():
    cfg = _tiny_config(iterations=0)
    result = train(_toy_dataset(), cfg)
    init = initial_checkpoint(cfg)
    for a, b in zip(_param_arrays(result.checkpoint.params), _param_arrays(init.params)):
        np.testing.assert_array_equal(a, b)
    assert result.loss_trace == []
    assert result.checkpoint.iteration == 0


def test_train_records_trace_and_updates_params():
    cfg = _tiny_config(iterations=2)
    result = train(_toy_dataset(), cfg)
    frame = result.trace_frame()
    assert list(frame.columns) == ["iter", "lr", "loss"]
    assert frame["iter"].tolist() == [0, 1]
    assert np.all(np.isfinite(frame["loss"]))
    init = initial_checkpoint(cfg)
    changed = [not np.array_equal(a, b)
               for a, b in zip(_param_arrays(result.checkpoint.params), _param_arrays(init.params))]
    assert any(changed)
    assert result.checkpoint.optimizer.iteration == 2


def test_train_is_deterministic():
    cfg = _tiny_config(iterations=2)
    a = train(_toy_dataset(), cfg)
    b = train(_toy_dataset(), cfg)
    assert checkpoint_to_bytes(a.checkpoint) == checkpoint_to_bytes(b.checkpoint)
    assert a.loss_trace == b.loss_trace


def test_train_step_skips_pairs_without_correspondence():
    data = _toy_dataset(n_types=2)
    cfg = _tiny_config()
    ck = initial_checkpoint(cfg)
    good = (data["type0"][0], data["type0"][1])
    bad = (data["type0"][0], data["type1"][0])

    params_a, _, loss_a = train_step(ck.params, ck.optimizer, [good, bad], 0.01, cfg.ray_config())
    params_b, _, loss_b = train_step(ck.params, ck.optimizer, [good], 0.01, cfg.ray_config())
    assert loss_a == loss_b
    for a, b in zip(_param_arrays(params_a), _param_arrays(params_b)):
        np.testing.assert_array_equal(a, b)

    with pytest.raises(SamplingError):
        train_step(ck.params, ck.optimizer, [bad], 0.01, cfg.ray_config())


def test_query_labels_missing_from_support_are_left_out_of_the_loss():
    data = _toy_dataset(n_types=1)
    texts = [f"type0 anchor {j}" for j in range(3)]
    support = data["type0"][0]
    rng = np.random.Generator(np.random.PCG64([7, 0]))
    partial = random_document(rng, "type0_p", 3, ["name", "stamp", "total", "stamp"], texts=texts)
    foreign = random_document(rng, "type0_f", 3, ["stamp"] * 4, texts=texts)
    cfg = _tiny_config()
    ck = initial_checkpoint(cfg)

    _, _, value = train_step(ck.params, ck.optimizer, [(support, partial)], 0.01, cfg.ray_config())
    graphs = build_pair_graphs(support, partial, label_space=LabelSpace.from_documents(support, partial),
                               ray_cfg=cfg.ray_config())
    result = forward(graphs.support, graphs.query, ck.params)
    stamp = graphs.label_space.index("stamp")
    rows = np.flatnonzero(graphs.query.labels != stamp)
    assert len(rows) == 2
    expected = -np.mean(np.log(result.P_final.data[rows, graphs.query.labels[rows]]))
    assert value == pytest.approx(expected, rel=1e-12)

    with pytest.raises(SamplingError):
        train_step(ck.params, ck.optimizer, [(support, foreign)], 0.01, cfg.ray_config())
    good = (support, data["type0"][1])
    params_a, _, loss_a = train_step(ck.params, ck.optimizer, [good, (support, foreign)], 0.01, cfg.ray_config())
    params_b, _, loss_b = train_step(ck.params, ck.optimizer, [good], 0.01, cfg.ray_config())
    assert loss_a == loss_b
    for a, b in zip(_param_arrays(params_a), _param_arrays(params_b)):
        np.testing.assert_array_equal(a, b)


def test_sample_batch_type_frequencies_are_uniform():
    data = _toy_dataset(n_types=10, per_type=2)
    rng = tc.make_rng(11)
    n_batches, batch_size = 10000, 8
    counts = {f"t{t}": 0 for t in range(10)}
    ordered = {}
    for _ in range(n_batches):
        for support, query in sample_batch(data, rng, batch_size):
            t = support.doc_id.split("_")[0]
            counts[t] += 1
            if t == "t0":
                ordered[support.doc_id] = ordered.get(support.doc_id, 0) + 1

    p = batch_size / len(data)
    mean, sigma = n_batches * p, np.sqrt(n_batches * p * (1 - p))
    for t, n in counts.items():
        assert abs(n - mean) <= 3 * sigma, t
    # 类型内两个有序对各占一半
    assert sorted(ordered) == ["t0_d0", "t0_d1"]
    n0 = counts["t0"]
    for n in ordered.values():
        assert abs(n - n0 / 2) <= 3 * np.sqrt(n0 / 4)


def test_learning_rate_schedule_of_default_config():
    cfg = TrainConfig()
    assert tc.lr_at(4999, cfg.base_lr, cfg.lr_decay, cfg.lr_period) == 0.01
    assert tc.lr_at(5000, cfg.base_lr, cfg.lr_decay, cfg.lr_period) == pytest.approx(0.001)


# ---------------------------------------------------------------------------
# 检查点
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact():
    result = train(_toy_dataset(), _tiny_config(iterations=1))
    data = checkpoint_to_bytes(result.checkpoint)
    restored = checkpoint_from_bytes(data)
    assert checkpoint_to_bytes(restored) == data
    for a, b in zip(_param_arrays(restored.params), _param_arrays(result.checkpoint.params)):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(restored.optimizer.velocities, result.checkpoint.optimizer.velocities):
        np.testing.assert_array_equal(a, b)
    assert restored.train_config == result.checkpoint.train_config
    assert restored.iteration == 1
    assert restored.make_rng().integers(1 << 30) == result.checkpoint.make_rng().integers(1 << 30)


def test_save_load_save_gives_identical_files(tmp_path):
    ck = initial_checkpoint(_tiny_config())
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(ck, str(first))
    save_checkpoint(load_checkpoint(str(first)), str(second))
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes()[:8] == b"OSLCKPT\x00"


def test_truncated_or_corrupt_checkpoint_raises(tmp_path):
    data = checkpoint_to_bytes(initial_checkpoint(_tiny_config()))
    path = tmp_path / "bad.ckpt"
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))

    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(bytes(flipped))

    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(b"short")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "missing.ckpt"))


def test_resume_matches_uninterrupted_run(tmp_path):
    data = _toy_dataset()
    full = train(data, _tiny_config(iterations=4))

    path = tmp_path / "half.ckpt"
    half = train(data, _tiny_config(iterations=2))
    save_checkpoint(half.checkpoint, str(path))
    resumed = train(data, _tiny_config(iterations=4), resume=load_checkpoint(str(path)))

    for a, b in zip(_param_arrays(resumed.checkpoint.params), _param_arrays(full.checkpoint.params)):
        np.testing.assert_array_equal(a, b)
    assert half.loss_trace + resumed.loss_trace == full.loss_trace


def test_resume_rejects_different_model_config():
    ck = initial_checkpoint(_tiny_config())
    with pytest.raises(ConfigurationError):
        train(_toy_dataset(), _tiny_config(bp_steps=1), resume=ck)


def test_periodic_checkpoints_and_loss_csv(tmp_path):
    path = tmp_path / "run.ckpt"
    result = train(_toy_dataset(), _tiny_config(iterations=2, checkpoint_every=1), checkpoint_path=str(path))
    assert load_checkpoint(str(path)).iteration == 2

    csv = tmp_path / "loss.csv"
    save_loss_trace(result.loss_trace, str(csv))
    frame = pd.read_csv(csv)
    assert frame["iter"].tolist() == [0, 1]
    assert frame["loss"].tolist() == [v for _, _, v in result.loss_trace]


@pytest.mark.slow
def test_training_reduces_loss_on_a_single_template():
    docs = []
    for i in range(4):
        dx, dy = 3.0 * i, 2.0 * i
        docs.append(build_document(
            f"d{i}", "inv",
            [("L0", (10 + dx, 10 + dy, 50 + dx, 20 + dy), "Invoice No:"),
             ("L1", (10 + dx, 60 + dy, 40 + dx, 70 + dy), "Total:")],
            [("F0", (60 + dx, 10 + dy, 100 + dx, 20 + dy), "invoice_no"),
             ("F1", (60 + dx, 60 + dy, 100 + dx, 70 + dy), "total"),
             ("F2", (120 + dx, 35 + dy, 160 + dx, 45 + dy), "background")],
        ))
    cfg = TrainConfig(batch_size=1, iterations=300, hidden_dims=(16,), seed=1, log_every=100)
    result = train({"inv": docs}, cfg)
    losses = [v for _, _, v in result.loss_trace]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
