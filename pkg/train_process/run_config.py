"""
模块名称: 实验配置 (run_config.py)

功能描述:
    用 dataclass 描述一次实验的全部设置，并负责 JSON 读写与命令行覆盖。
        - ModelSpec:  主干拓扑、SNR 插入位置、变体 (baseline / in_only / snr / snr_no_dual_loss)
        - RunConfig:  协议 (dg / uda)、源域/目标域、优化器与学习率、λ、随机种子、精度
        - DataConfig: 数据集生成参数（域预设、样本数、类别数、数据种子）
    覆盖语法为 `点分键=值`，值按 JSON 解析，失败时按字符串处理。
    优先级: 命令行 > 配置文件 > 默认值。未知键和类型错误都会抛出 ConfigError。

配置:
    - `SNR_DATA_ROOT`:   默认数据集根目录（默认 data/styleshapes）
    - `SNR_OUTPUT_ROOT`: 默认输出目录（默认 runs）
"""
import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import List, Optional, Sequence

from snr_core.errors import ConfigError

VARIANTS = ("baseline", "in_only", "snr", "snr_no_dual_loss")
PROTOCOLS = ("dg", "uda")
PRECISIONS = ("float32", "float64")
LOSS_TERMS = ("dual", "plus_only", "minus_only", "no_compare")
PRESET_NAMES = ["D-id", "D-dim", "D-hue", "D-noisy"]


@dataclass
class ModelSpec:
    stages: List[List[int]] = field(default_factory=lambda: [[16, 2], [32, 2], [64, 2], [64, 1]])
    snr_after_stage: List[bool] = field(default_factory=lambda: [True, True, True, True])
    variant: str = "snr"
    num_classes: int = 4
    in_channels: int = 3
    kernel_size: int = 3
    reduction: int = 16
    eps: float = 1e-5
    gate_bias: bool = True

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant 必须是 {VARIANTS} 之一，收到 '{self.variant}'")
        if len(self.snr_after_stage) != len(self.stages):
            raise ConfigError("model.snr_after_stage 的长度必须与 model.stages 一致")
        if self.variant == "baseline" and any(self.snr_after_stage):
            raise ConfigError("baseline 变体不能插入 SNR 模块（snr_after_stage 必须全为 false）")
        for stage in self.stages:
            if len(stage) != 2 or stage[0] < 1 or stage[1] < 1:
                raise ConfigError(f"model.stages 的每一项应为 [输出通道, 步长]，收到 {stage}")

    def for_variant(self, variant: str, placement: Optional[Sequence[bool]] = None) -> "ModelSpec":
        """复制一份并切换变体；baseline 自动关闭所有插入点。"""
        spec = copy.deepcopy(self)
        spec.variant = variant
        if placement is not None:
            spec.snr_after_stage = list(placement)
        if variant == "baseline":
            spec.snr_after_stage = [False] * len(spec.stages)
        elif not any(spec.snr_after_stage):
            spec.snr_after_stage = [True] * len(spec.stages)
        return spec


@dataclass
class DataConfig:
    root: str = field(default_factory=lambda: os.getenv("SNR_DATA_ROOT", "data/styleshapes"))
    domains: List[str] = field(default_factory=lambda: list(PRESET_NAMES))
    n_train: int = 2000
    n_test: int = 500
    num_classes: int = 4
    seed: int = 0


@dataclass
class RunConfig:
    protocol: str = "dg"
    source_domains: List[str] = field(default_factory=lambda: ["D-id", "D-dim", "D-hue"])
    target_domain: str = "D-noisy"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    lr_min: float = 0.0
    momentum: float = 0.9
    snr_weight: float = 1.0
    loss_terms: str = "dual"
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    precision: str = "float32"
    train_subset: int = 0
    checkpoint_every_epoch: bool = True
    eval_workers: int = 0
    output_dir: str = field(default_factory=lambda: os.getenv("SNR_OUTPUT_ROOT", "runs"))

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"run.protocol 必须是 {PROTOCOLS} 之一，收到 '{self.protocol}'")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"run.precision 必须是 {PRECISIONS} 之一，收到 '{self.precision}'")
        if self.loss_terms not in LOSS_TERMS:
            raise ConfigError(f"run.loss_terms 必须是 {LOSS_TERMS} 之一，收到 '{self.loss_terms}'")
        if self.target_domain in self.source_domains:
            raise ConfigError(f"目标域 '{self.target_domain}' 不能同时出现在源域中")
        if not self.source_domains:
            raise ConfigError("run.source_domains 不能为空")
        if self.snr_weight < 0:
            raise ConfigError("run.snr_weight (λ) 必须 ≥ 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("run.epochs 与 run.batch_size 必须 ≥ 1")
        if not self.seeds:
            raise ConfigError("run.seeds 至少需要一个种子")


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.run.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        config = cls()
        _merge(config, raw, prefix="")
        return config

    def with_overrides(self, overrides: Sequence[str]) -> "ExperimentConfig":
        config = copy.deepcopy(self)
        for item in overrides:
            key, value = parse_override(item)
            set_dotted(config, key, value)
        return config


# --- JSON 读写 ---
def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> ExperimentConfig:
    config = ExperimentConfig()
    if path:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"找不到配置文件: '{config_path}'")
        try:
            with config_path.open("r", encoding="utf-8") as handle:
                raw = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件 '{config_path}' 不是合法的 JSON：{e}") from e
        config = ExperimentConfig.from_dict(raw)
    return config.with_overrides(overrides)


def save_config(config: ExperimentConfig, path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        json.dump(config.to_dict(), handle, ensure_ascii=False, indent=2)


# --- 覆盖与类型检查 ---
def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"覆盖项 '{item}' 的格式应为 key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _coerce(key: str, current, value):
    """按默认值的类型检查新值；int 可以赋给 float 字段。"""
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"配置键 '{key}' 需要 bool 类型，收到 {type(value).__name__}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"配置键 '{key}' 需要 int 类型，收到 {type(value).__name__}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"配置键 '{key}' 需要 float 类型，收到 {type(value).__name__}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"配置键 '{key}' 需要 str 类型，收到 {type(value).__name__}")
        return value
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"配置键 '{key}' 需要 list 类型，收到 {type(value).__name__}")
        return value
    return value


def set_dotted(config, key: str, value, label: Optional[str] = None):
    label = label or key
    parts = key.split(".")
    target = config
    for depth, part in enumerate(parts):
        if not is_dataclass(target) or part not in {f.name for f in fields(target)}:
            raise ConfigError(f"未知的配置键: '{label}'")
        if depth == len(parts) - 1:
            current = getattr(target, part)
            if is_dataclass(current):
                if not isinstance(value, dict):
                    raise ConfigError(f"配置键 '{label}' 需要一个对象")
                _merge(current, value, prefix=label + ".")
            else:
                setattr(target, part, _coerce(label, current, value))
        else:
            target = getattr(target, part)


def _merge(target, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"配置节 '{prefix.rstrip('.') or '<root>'}' 需要一个对象")
    for key, value in raw.items():
        set_dotted(target, key, value, label=prefix + key)
