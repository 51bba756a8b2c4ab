"""
训练模块

按模板类型采样 (support, query) 对，逐对前向+交叉熵，批内取平均后反向，
用带动量的SGD和阶梯学习率更新两个MLP。检查点为带校验的二进制格式，
保存参数、速度、配置、迭代数和随机数状态，可逐位复现地续训。
"""
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import tensorcore as tc
from docgraph import Document, LabelSpace, build_pair_graphs
from exceptions import (
    CheckpointError, ConfigurationError, ErrorCode, NoCorrespondenceError, NumericError,
    SamplingError, TrainingError,
)
from geometry import RayConfig
from model import ModelConfig, ModelParams, forward, init_model, loss as pair_loss
from tensorcore import OptimizerState, Tape

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"OSLCKPT\x00"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_CRC = struct.Struct("<I")

LOSS_TRACE_COLUMNS = ("iter", "lr", "loss")


@dataclass(frozen=True)
class TrainConfig:
    """训练超参数；默认值为 batch 8、20000 次迭代、lr 0.01 每5000次衰减为0.1倍、动量0.9"""
    batch_size: int = 8
    iterations: int = 20000
    base_lr: float = 0.01
    lr_decay: float = 0.1
    lr_period: int = 5000
    momentum: float = 0.9
    seed: int = 0
    bp_steps: int = 2
    avg_before_attention: bool = False
    unary_source: str = "lfattn"
    checkpoint_every: int = 0
    hidden_dims: Tuple[int, ...] = (32, 32)
    landmark_reduce: str = "mean"
    fill_unobserved_pairs: bool = True
    ray_count: int = 72
    ray_step_deg: float = 5.0
    log_every: int = 100

    def __post_init__(self):
        positive = ("batch_size", "lr_period", "log_every", "ray_count")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive", config_key=name)
        for name in ("iterations", "checkpoint_every", "seed", "bp_steps"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(f"{name} must be >= 0", config_key=name)
        if not self.base_lr > 0:
            raise ConfigurationError("base_lr must be positive", config_key="base_lr")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr_decay must be in (0, 1]", config_key="lr_decay")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)", config_key="momentum")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        # 校验模型相关字段
        self.model_config()
        self.ray_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            bp_steps=self.bp_steps,
            avg_before_attention=self.avg_before_attention,
            unary_source=self.unary_source,
            hidden_dims=self.hidden_dims,
            landmark_reduce=self.landmark_reduce,
            fill_unobserved_pairs=self.fill_unobserved_pairs,
        )

    def ray_config(self) -> RayConfig:
        return RayConfig(self.ray_count, self.ray_step_deg)

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        data = dict(data)
        if "hidden_dims" in data:
            data["hidden_dims"] = tuple(data["hidden_dims"])
        return cls(**data)


@dataclass(eq=False)
class Checkpoint:
    """训练状态快照"""
    params: ModelParams
    optimizer: OptimizerState
    train_config: TrainConfig
    ray_config: RayConfig
    iteration: int
    rng_state: Dict
    version: int = CHECKPOINT_VERSION

    def make_rng(self) -> np.random.Generator:
        rng = np.random.Generator(np.random.PCG64(0))
        rng.bit_generator.state = self.rng_state
        return rng


@dataclass(eq=False)
class TrainResult:
    checkpoint: Checkpoint
    loss_trace: List[Tuple[int, float, float]] = field(default_factory=list)

    def trace_frame(self) -> pd.DataFrame:
        return loss_trace_frame(self.loss_trace)


def _grouped(dataset) -> Dict[str, List[Document]]:
    """接受 {type_id: [Document]} 或带 by_type() 的数据集清单"""
    if hasattr(dataset, "by_type"):
        dataset = dataset.by_type()
    return {t: list(dataset[t]) for t in sorted(dataset)}


def sample_batch(
    dataset,
    rng: np.random.Generator,
    batch_size: int = 8,
) -> List[Tuple[Document, Document]]:
    """
    无放回地均匀选出 batch_size 个模板类型，每个类型内再均匀选出
    一对不同的文档作为有序的 (support, query)
    """
    groups = _grouped(dataset)
    types = [t for t, docs in groups.items() if len(docs) >= 2]
    if len(types) < batch_size:
        raise SamplingError(
            f"need {batch_size} template types with >= 2 documents, found {len(types)}",
            details={"eligible_types": len(types), "batch_size": batch_size},
        )

    batch = []
    for t_idx in rng.choice(len(types), size=batch_size, replace=False):
        docs = groups[types[int(t_idx)]]
        s_idx, q_idx = rng.choice(len(docs), size=2, replace=False)
        batch.append((docs[int(s_idx)], docs[int(q_idx)]))
    return batch


def _pair_gradients(
    support: Document,
    query: Document,
    params: ModelParams,
    ray_cfg: RayConfig,
) -> Optional[Tuple[float, List[np.ndarray]]]:
    """单个支持-查询对的损失和梯度；查询中没有可学习的标签时返回 None"""
    graphs = build_pair_graphs(support, query, label_space=LabelSpace.from_documents(support, query),
                               ray_cfg=ray_cfg)
    # 支持文档里没有的标签只能得到固定分数，不参与损失
    labels = graphs.query.labels.copy()
    seen = np.unique(graphs.support.labels[graphs.support.labels >= 0])
    labels[~np.isin(labels, seen)] = -1
    if not np.any(labels >= 0):
        return None
    with Tape() as tape:
        result = forward(graphs.support, graphs.query, params)
        value = pair_loss(result.P_final, labels, params.config.prob_floor)
    return value.item(), tc.backward(tape, value, params.parameters())


def train_step(
    params: ModelParams,
    state: OptimizerState,
    batch: Sequence[Tuple[Document, Document]],
    lr: float,
    ray_cfg: RayConfig = RayConfig(),
) -> Tuple[ModelParams, OptimizerState, float]:
    """一次参数更新；梯度按批内顺序累加后取平均"""
    total_loss = 0.0
    total_grads: Optional[List[np.ndarray]] = None
    used = 0
    for support, query in batch:
        try:
            out = _pair_gradients(support, query, params, ray_cfg)
        except NoCorrespondenceError:
            logger.warning("Skipping training pair %s -> %s: no correspondence",
                           support.doc_id, query.doc_id)
            continue
        if out is None:
            logger.warning("Skipping training pair %s -> %s: no query label occurs in the support",
                           support.doc_id, query.doc_id)
            continue
        value, grads = out
        used += 1
        total_loss += value
        total_grads = grads if total_grads is None else [a + g for a, g in zip(total_grads, grads)]

    if used == 0:
        raise SamplingError("no usable pair in batch")

    mean_grads = [g / used for g in total_grads]
    new_values, new_state = tc.sgd_momentum_step(params.parameters(), mean_grads, state, lr)
    return params.with_parameters(new_values), new_state, total_loss / used


def initial_checkpoint(cfg: TrainConfig) -> Checkpoint:
    """迭代0的状态：初始参数、零速度、新的采样随机数流"""
    params = init_model(cfg.seed, cfg.model_config())
    rng = tc.make_rng([cfg.seed, 2])
    return Checkpoint(
        params=params,
        optimizer=tc.init_optimizer_state(params.parameters(), cfg.momentum),
        train_config=cfg,
        ray_config=cfg.ray_config(),
        iteration=0,
        rng_state=rng.bit_generator.state,
    )


def train(
    dataset,
    cfg: TrainConfig,
    resume: Optional[Checkpoint] = None,
    checkpoint_path: Optional[str] = None,
) -> TrainResult:
    """
    训练共享模型

    Args:
        dataset: {type_id: [Document]} 或数据集清单（训练集）
        cfg: 训练配置
        resume: 从该检查点继续，迭代数、速度和随机数状态都沿用
        checkpoint_path: checkpoint_every > 0 时定期写入的路径

    Returns:
        TrainResult: 最终检查点与损失轨迹 (iter, lr, loss)
    """
    ck = resume if resume is not None else initial_checkpoint(cfg)
    if resume is not None and resume.params.config != cfg.model_config():
        raise ConfigurationError("resume checkpoint model config differs from training config",
                                 config_key="model")

    params, state = ck.params, ck.optimizer
    rng = ck.make_rng()
    ray_cfg = cfg.ray_config()
    trace: List[Tuple[int, float, float]] = []
    last_lr = None

    logger.info("Training from iteration %d to %d (batch=%d, bp_steps=%d, unary=%s)",
                ck.iteration, cfg.iterations, cfg.batch_size, cfg.bp_steps, cfg.unary_source)

    iteration = ck.iteration
    while iteration < cfg.iterations:
        lr = tc.lr_at(iteration, cfg.base_lr, cfg.lr_decay, cfg.lr_period)
        if lr != last_lr:
            logger.info("Learning rate set to %g at iteration %d", lr, iteration)
            last_lr = lr

        batch = sample_batch(dataset, rng, cfg.batch_size)
        try:
            params, state, value = train_step(params, state, batch, lr, ray_cfg)
        except NumericError as e:
            raise TrainingError(f"non-finite value during training: {e.message}",
                                iteration=iteration, cause=e)
        if not np.isfinite(value):
            raise TrainingError(f"loss diverged to {value}", iteration=iteration,
                                error_code=ErrorCode.TRAINING_DIVERGED)

        trace.append((iteration, lr, value))
        iteration += 1

        if iteration % cfg.log_every == 0:
            logger.info("iter %d loss %.6f lr %g", iteration, value, lr,
                        extra={"iteration": iteration, "loss": value})

        if checkpoint_path and cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
            save_checkpoint(Checkpoint(params, state, cfg, ray_cfg, iteration, rng.bit_generator.state),
                            checkpoint_path)

    final = Checkpoint(params, state, cfg, ray_cfg, iteration, rng.bit_generator.state)
    return TrainResult(final, trace)


def loss_trace_frame(trace: Sequence[Tuple[int, float, float]]) -> pd.DataFrame:
    return pd.DataFrame(list(trace), columns=list(LOSS_TRACE_COLUMNS))


def save_loss_trace(trace: Sequence[Tuple[int, float, float]], path: str):
    loss_trace_frame(trace).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


# ---------------------------------------------------------------------------
# 检查点
# ---------------------------------------------------------------------------

def _named_arrays(ck: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    named = []
    for prefix, mlp in (("lf", ck.params.lf_mlp), ("ff", ck.params.ff_mlp)):
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            named.append((f"{prefix}/W{i}", w.data))
            named.append((f"{prefix}/b{i}", b.data))
    for i, v in enumerate(ck.optimizer.velocities):
        named.append((f"velocity/{i}", v))
    return named


def checkpoint_to_bytes(ck: Checkpoint) -> bytes:
    """
    MAGIC(8) | version u32 | 头长度 u64 | JSON头 | 小端f64数据 | CRC32

    JSON头按键排序，数组按固定顺序拼接，同一状态总是得到相同字节
    """
    arrays = _named_arrays(ck)
    header = {
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
        "iteration": int(ck.iteration),
        "model_config": ck.params.config.to_dict(),
        "momentum": float(ck.optimizer.momentum),
        "optimizer_iteration": int(ck.optimizer.iteration),
        "ray_config": {"ray_count": ck.ray_config.ray_count, "ray_step_deg": ck.ray_config.ray_step_deg},
        "rng_state": ck.rng_state,
        "train_config": ck.train_config.to_dict(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    body = _PREFIX.pack(CHECKPOINT_MAGIC, ck.version, len(header_bytes)) + header_bytes + payload
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def checkpoint_from_bytes(data: bytes, path: Optional[str] = None) -> Checkpoint:
    if len(data) < _PREFIX.size + _CRC.size:
        raise CheckpointError("checkpoint file is truncated", path=path)
    body, (crc,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)", path=path)

    magic, version, header_len = _PREFIX.unpack_from(body, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file", path=path)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}",
                              path=path)

    try:
        offset = _PREFIX.size
        header = json.loads(body[offset:offset + header_len].decode("utf-8"))
        offset += header_len
        values = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape, dtype=np.int64))
            values[spec["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=offset) \
                .astype(np.float64).reshape(shape)
            offset += 8 * n
        if offset != len(body):
            raise CheckpointError("checkpoint payload size mismatch", path=path)

        model_config = ModelConfig.from_dict(header["model_config"])
        params = init_model(0, model_config)
        ordered = []
        for prefix, mlp in (("lf", params.lf_mlp), ("ff", params.ff_mlp)):
            for i in range(len(mlp.weights)):
                ordered.append(values[f"{prefix}/W{i}"])
                ordered.append(values[f"{prefix}/b{i}"])
        params = params.with_parameters(ordered)
        velocities = tuple(values[f"velocity/{i}"] for i in range(len(ordered)))
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}", path=path, cause=e)

    return Checkpoint(
        params=params,
        optimizer=OptimizerState(velocities, header["momentum"], header["optimizer_iteration"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        ray_config=RayConfig(**header["ray_config"]),
        iteration=header["iteration"],
        rng_state=header["rng_state"],
        version=version,
    )


def save_checkpoint(ck: Checkpoint, path: str):
    """先写临时文件再替换，避免留下半个检查点"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(checkpoint_to_bytes(ck))
        tmp.replace(path)
    except OSError as e:
        raise CheckpointError(f"failed to write checkpoint: {e}", path=str(path), cause=e)
    logger.info("Checkpoint saved to %s (iteration %d)", path, ck.iteration)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"failed to read checkpoint: {e}", path=str(path), cause=e)
    return checkpoint_from_bytes(data, path=str(path))
