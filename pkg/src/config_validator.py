"""
配置验证和管理模块

配置分层（优先级从低到高）：字段默认值 -> 环境变量 ONESHOT_<KEY>（可来自 .env）
-> 配置文件（TOML 或 JSON，分 model/train/eval/rays/logging 几节）-> 命令行参数。
"""
import os
import sys
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from dotenv import dotenv_values

from exceptions import BaseLabelingError, ConfigurationError, ValidationError
from geometry import RayConfig
from train import TrainConfig

try:
    import tomllib
except ImportError:  # Python < 3.11
    tomllib = None

logger = logging.getLogger(__name__)

ENV_PREFIX = "ONESHOT_"
SECTIONS = ("general", "model", "train", "eval", "rays", "logging")


@dataclass
class ConfigField:
    """配置字段定义"""
    name: str
    section: str
    required: bool = False
    default: Any = None
    validator: Optional[Callable[[Any], Any]] = None
    description: str = ""

    @property
    def env_key(self) -> str:
        return f"{ENV_PREFIX}{self.name.upper()}"


class ConfigValidator:
    """配置验证器"""

    def __init__(self, config_fields: List[ConfigField]):
        self.config_fields = {f.name: f for f in config_fields}
        self.validated_config: Dict[str, Any] = {}

    def validate_field(self, field: ConfigField, value: Any) -> Any:
        """验证单个字段"""
        if value is None:
            if field.required:
                raise ValidationError(
                    f"Required configuration field '{field.name}' is missing",
                    field=field.name
                )
            return field.default

        if field.validator:
            try:
                return field.validator(value)
            except Exception as e:
                raise ValidationError(
                    f"Validation failed for field '{field.name}': {e}",
                    field=field.name,
                    cause=e
                )

        return value

    def validate_all(self, config_dict: Mapping[str, Any]) -> Dict[str, Any]:
        """验证所有配置字段"""
        validated = {}
        for field_name, field in self.config_fields.items():
            validated[field_name] = self.validate_field(field, config_dict.get(field_name))
        self.validated_config = validated
        return validated


def load_env_file(env_file: Optional[str] = None) -> Dict[str, str]:
    """读取 .env 文件（不修改 os.environ）；文件不存在时返回空字典"""
    if env_file:
        env_path = Path(env_file)
    elif getattr(sys, 'frozen', False):
        env_path = Path(sys.executable).parent / '.env'
    else:
        env_path = Path.cwd() / '.env'

    if env_path.exists():
        logger.debug(f"Loaded environment variables from {env_path}")
        return {k: v for k, v in dotenv_values(env_path).items() if v is not None}
    if env_file:
        raise ConfigurationError(f"Environment file not found: {env_path}", config_key="env_file")
    return {}


# ---------------------------------------------------------------------------
# 校验函数：环境变量里的值都是字符串，需要在这里转换
# ---------------------------------------------------------------------------

def validate_positive_int(value: Any) -> int:
    """验证正整数"""
    int_val = _to_int(value)
    if int_val <= 0:
        raise ValidationError("Value must be positive")
    return int_val


def validate_non_negative_int(value: Any) -> int:
    int_val = _to_int(value)
    if int_val < 0:
        raise ValidationError("Value must be >= 0")
    return int_val


def validate_optional_positive_int(value: Any) -> Optional[int]:
    if isinstance(value, str) and value.strip().lower() in ("", "none", "null"):
        return None
    return validate_positive_int(value)


def validate_positive_float(value: Any) -> float:
    float_val = _to_float(value)
    if not float_val > 0:
        raise ValidationError("Value must be positive")
    return float_val


def validate_unit_interval(value: Any) -> float:
    """[0, 1) 区间"""
    float_val = _to_float(value)
    if not 0 <= float_val < 1:
        raise ValidationError("Value must be in [0, 1)")
    return float_val


def validate_decay(value: Any) -> float:
    float_val = _to_float(value)
    if not 0 < float_val <= 1:
        raise ValidationError("Value must be in (0, 1]")
    return float_val


def validate_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"Value must be a boolean, got {value!r}")


def validate_int_tuple(value: Any) -> Tuple[int, ...]:
    """"64,64" 或 [64, 64]"""
    items = value.split(",") if isinstance(value, str) else list(value)
    dims = tuple(validate_positive_int(v) for v in items if str(v).strip())
    if not dims:
        raise ValidationError("Value must list at least one positive integer")
    return dims


def validate_choice(*choices: str) -> Callable[[Any], str]:
    def check(value: Any) -> str:
        text = str(value).strip()
        if text not in choices:
            raise ValidationError(f"Value must be one of {choices}, got {text!r}")
        return text
    return check


def validate_log_level(value: Any) -> str:
    return validate_choice("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")(str(value).upper())


def validate_optional_path(value: Any) -> Optional[str]:
    text = str(value).strip()
    return text or None


def _to_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValidationError("Value must be a valid integer")
    try:
        if isinstance(value, float):
            if not value.is_integer():
                raise ValueError(value)
            return int(value)
        return int(str(value).strip())
    except (ValueError, TypeError):
        raise ValidationError("Value must be a valid integer")


def _to_float(value: Any) -> float:
    if isinstance(value, bool):
        raise ValidationError("Value must be a number")
    try:
        return float(value)
    except (ValueError, TypeError):
        raise ValidationError("Value must be a number")


# 定义配置字段
_TRAIN_DEFAULTS = TrainConfig()

CONFIG_FIELDS = [
    ConfigField("seed", "general", default=0, validator=validate_non_negative_int,
                description="全局随机种子"),

    ConfigField("bp_steps", "model", default=_TRAIN_DEFAULTS.bp_steps, validator=validate_non_negative_int,
                description="置信传播步数，0为纯LFAttn"),
    ConfigField("avg_before_attention", "model", default=False, validator=validate_bool,
                description="AvgAttn消融"),
    ConfigField("unary_source", "model", default="lfattn", validator=validate_choice("lfattn", "uniform"),
                description="一元分布来源"),
    ConfigField("hidden_dims", "model", default=_TRAIN_DEFAULTS.hidden_dims, validator=validate_int_tuple,
                description="MLP隐藏层宽度"),
    ConfigField("landmark_reduce", "model", default="mean", validator=validate_choice("mean", "max"),
                description="AvgAttn的landmark聚合方式"),
    ConfigField("fill_unobserved_pairs", "model", default=True, validator=validate_bool,
                description="为支持文档中没有可见边的标签对补齐FF原型"),

    ConfigField("batch_size", "train", default=_TRAIN_DEFAULTS.batch_size, validator=validate_positive_int,
                description="每批模板类型数"),
    ConfigField("iterations", "train", default=_TRAIN_DEFAULTS.iterations, validator=validate_non_negative_int,
                description="训练迭代数"),
    ConfigField("base_lr", "train", default=_TRAIN_DEFAULTS.base_lr, validator=validate_positive_float,
                description="初始学习率"),
    ConfigField("lr_decay", "train", default=_TRAIN_DEFAULTS.lr_decay, validator=validate_decay,
                description="学习率衰减系数"),
    ConfigField("lr_period", "train", default=_TRAIN_DEFAULTS.lr_period, validator=validate_positive_int,
                description="学习率衰减周期"),
    ConfigField("momentum", "train", default=_TRAIN_DEFAULTS.momentum, validator=validate_unit_interval,
                description="动量系数"),
    ConfigField("checkpoint_every", "train", default=0, validator=validate_non_negative_int,
                description="中间检查点间隔，0为不写"),
    ConfigField("log_every", "train", default=_TRAIN_DEFAULTS.log_every, validator=validate_positive_int,
                description="训练日志间隔"),

    ConfigField("shots", "eval", default=1, validator=validate_choice("1", "5"), description="支持文档数"),
    ConfigField("drop_background", "eval", default=False, validator=validate_bool,
                description="背景区域不计入准确率"),
    ConfigField("landmark_drop", "eval", default=0, validator=validate_non_negative_int,
                description="每对丢弃的landmark数"),
    ConfigField("landmark_keep", "eval", default=None, validator=validate_optional_positive_int,
                description="每对只保留的landmark数"),
    ConfigField("workers", "eval", default=4, validator=validate_positive_int, description="评估线程数"),
    ConfigField("max_subsets", "eval", default=20, validator=validate_positive_int,
                description="5-shot每个查询的支持子集数上限"),

    ConfigField("ray_count", "rays", default=72, validator=validate_positive_int, description="射线条数"),
    ConfigField("ray_step_deg", "rays", default=5.0, validator=validate_positive_float,
                description="相邻射线夹角（度）"),

    ConfigField("log_level", "logging", default="INFO", validator=validate_log_level, description="日志级别"),
    ConfigField("log_dir", "logging", default=None, validator=validate_optional_path,
                description="日志文件目录，不设则只输出到控制台"),
    ConfigField("json_logs", "logging", default=False, validator=validate_bool, description="JSON格式日志"),
]


def _normalize_shots(config: Dict[str, Any]):
    config["shots"] = int(config["shots"])


def load_config_file(path: str) -> Dict[str, Any]:
    """读取TOML/JSON配置文件并展平为 {key: value}；未知节或键报错"""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}", config_key="config")
    try:
        if path.suffix.lower() == ".toml":
            if tomllib is None:
                raise ConfigurationError("TOML config files need Python 3.11+; use JSON", config_key="config")
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        else:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
    except (json.JSONDecodeError, ValueError) as e:
        raise ConfigurationError(f"Malformed config file {path}: {e}", config_key="config", cause=e)

    if not isinstance(raw, dict):
        raise ConfigurationError(f"Config file {path} must contain a table/object", config_key="config")

    known = {f.name: f.section for f in CONFIG_FIELDS}
    flat: Dict[str, Any] = {}
    for section, body in raw.items():
        if section == "seed":
            flat["seed"] = body
            continue
        if section not in SECTIONS or not isinstance(body, dict):
            raise ConfigurationError(f"Unknown config section '{section}'", config_key=section)
        for key, value in body.items():
            if known.get(key) != section:
                raise ConfigurationError(f"Unknown config key '{section}.{key}'", config_key=f"{section}.{key}")
            flat[key] = value
    return flat


class ExperimentConfig:
    """实验配置管理器"""

    def __init__(
        self,
        config_file: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        env_file: Optional[str] = None,
        environ: Optional[Mapping[str, str]] = None,
    ):
        self.config_file = config_file
        self._config: Dict[str, Dict[str, Any]] = {}
        self._sources: Dict[str, str] = {}
        self._load_and_validate(overrides or {}, env_file, environ)

    def _load_and_validate(self, overrides: Mapping[str, Any], env_file: Optional[str],
                           environ: Optional[Mapping[str, str]]):
        """加载并验证配置"""
        env = dict(load_env_file(env_file))
        env.update(os.environ if environ is None else environ)

        merged: Dict[str, Any] = {}
        for f in CONFIG_FIELDS:
            self._sources[f.name] = "default"
            if f.env_key in env:
                merged[f.name] = env[f.env_key]
                self._sources[f.name] = "env"

        if self.config_file:
            for key, value in load_config_file(self.config_file).items():
                merged[key] = value
                self._sources[key] = "file"

        known = {f.name for f in CONFIG_FIELDS}
        for key, value in overrides.items():
            if key not in known:
                raise ConfigurationError(f"Unknown configuration key '{key}'", config_key=key)
            if value is not None:
                merged[key] = value
                self._sources[key] = "cli"

        for section in SECTIONS:
            fields = [f for f in CONFIG_FIELDS if f.section == section]
            try:
                self._config[section] = ConfigValidator(fields).validate_all(merged)
            except ValidationError as e:
                logger.error(f"Configuration validation failed for group '{section}': {e}")
                raise ConfigurationError(
                    f"Invalid configuration for {section}: {e.message}",
                    config_key=f"{section}.{e.details.get('field')}",
                    cause=e
                )
        _normalize_shots(self._config["eval"])

        # 组合后的约束由各自的配置类再校验一次
        try:
            self.train_config()
        except BaseLabelingError as e:
            raise ConfigurationError(f"Invalid configuration: {e.message}",
                                     config_key=e.details.get("config_key"), cause=e)

    def get(self, key: str) -> Any:
        for section in self._config.values():
            if key in section:
                return section[key]
        raise KeyError(key)

    @property
    def seed(self) -> int:
        return self._config["general"]["seed"]

    def ray_config(self) -> RayConfig:
        rays = self._config["rays"]
        return RayConfig(rays["ray_count"], rays["ray_step_deg"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed,
            ray_count=self._config["rays"]["ray_count"],
            ray_step_deg=self._config["rays"]["ray_step_deg"],
            **self._config["model"],
            **self._config["train"],
        )

    def model_config(self):
        return self.train_config().model_config()

    def eval_settings(self) -> Dict[str, Any]:
        return dict(self._config["eval"])

    def logging_settings(self) -> Dict[str, Any]:
        return dict(self._config["logging"])

    def sources(self) -> Dict[str, str]:
        """每个键的生效来源：default / env / file / cli"""
        return dict(self._sources)

    def effective(self) -> Dict[str, Any]:
        """写入输出文件的生效配置（不含日志设置）"""
        out: Dict[str, Any] = {}
        for section, values in self._config.items():
            if section == "logging":
                continue
            for key, value in values.items():
                out[key] = list(value) if isinstance(value, tuple) else value
        return out
