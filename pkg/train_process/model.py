"""
模块名称: 玩具主干网络 (model.py)

功能描述:
    四个 3×3 卷积阶段（默认通道 16/32/64/64，步长 2/2/2/1），每个阶段后接 ReLU，
    按 ModelSpec 在阶段末尾插入：
        - in_only:           只做实例归一化（带可学习 γ、β），没有还原；
        - snr / snr_no_dual_loss: 完整 SNR 模块（两者前向完全相同，只是训练时损失不同）；
        - baseline:          什么都不插。
    分类头为全局平均池化 + 全连接。

    另外负责检查点的保存与读取：checkpoint.snrt（按顺序拼接的 SNRT0001 记录）
    + checkpoint.json（模型规格、张量名、形状、字节偏移、SNR 模块所在阶段）。
"""
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from snr_core.errors import CheckpointMismatchError, ConfigError, FormatError
from snr_core.seeding import named_stream
from snr_core.snr import SnrOutputs, SnrParams, init_snr_params, instance_normalize, param_count, snr_forward
from snr_core.snrt_io import load_tensors, save_tensors
from snr_core.tensor_core import Tensor, conv2d, global_avg_pool, linear, relu, reshape
from train_process.run_config import ModelSpec

CHECKPOINT_TENSORS = "checkpoint.snrt"
CHECKPOINT_MANIFEST = "checkpoint.json"


@dataclass
class InParams:
    gamma: Tensor
    beta: Tensor
    eps: float

    def tensors(self) -> Dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


@dataclass
class ForwardResult:
    logits: Tensor
    embedding: Tensor
    snr_outputs: List[Tuple[int, SnrOutputs]] = field(default_factory=list)
    stage_stats: List[dict] = field(default_factory=list)


class SnrNetwork:
    """参数集合 + 前向函数。参数按固定顺序注册，检查点与优化器都依赖这个顺序。"""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float64):
        spec.validate()
        self.spec = spec
        self.dtype = dtype
        rng = named_stream(seed, "init")
        self.kernels: List[Tensor] = []
        self.norms: Dict[int, object] = {}

        cin = spec.in_channels
        ks = spec.kernel_size
        for i, (cout, _stride) in enumerate(spec.stages):
            fan_in = ks * ks * cin
            kernel = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(ks, ks, cin, cout))
            self.kernels.append(Tensor(kernel.astype(dtype), requires_grad=True))
            if spec.snr_after_stage[i] and spec.variant == "in_only":
                self.norms[i] = InParams(Tensor(np.ones(cout, dtype=dtype), requires_grad=True),
                                         Tensor(np.zeros(cout, dtype=dtype), requires_grad=True), spec.eps)
            elif spec.snr_after_stage[i] and spec.variant in ("snr", "snr_no_dual_loss"):
                self.norms[i] = init_snr_params(cout, spec.num_classes, rng, r=spec.reduction, eps=spec.eps,
                                                use_bias=spec.gate_bias, dtype=dtype)
            cin = cout

        bound = 1.0 / math.sqrt(cin)
        self.head_w = Tensor(rng.uniform(-bound, bound, size=(spec.num_classes, cin)).astype(dtype),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(spec.num_classes, dtype=dtype), requires_grad=True)

    # --- 参数 ---
    def parameters(self) -> "OrderedDict[str, Tensor]":
        named = OrderedDict()
        for i, kernel in enumerate(self.kernels):
            named[f"stage{i}.conv"] = kernel
            module = self.norms.get(i)
            if module is not None:
                kind = "in" if isinstance(module, InParams) else "snr"
                for name, tensor in module.tensors().items():
                    named[f"stage{i}.{kind}.{name}"] = tensor
        named["head.w"] = self.head_w
        named["head.b"] = self.head_b
        return named

    def set_parameter(self, name: str, tensor: Tensor):
        """按 `parameters()` 中的名字替换一个参数张量（梯度检查时把参数换成叶子张量）。"""
        if name not in self.parameters():
            raise ConfigError(f"模型中没有名为 '{name}' 的参数")
        if name == "head.w":
            self.head_w = tensor
        elif name == "head.b":
            self.head_b = tensor
        else:
            stage, kind = name.split(".")[:2]
            i = int(stage[len("stage"):])
            if kind == "conv":
                self.kernels[i] = tensor
            else:
                setattr(self.norms[i], name.split(".", 2)[2], tensor)

    def snr_modules(self) -> List[Tuple[int, SnrParams]]:
        return [(i, m) for i, m in sorted(self.norms.items()) if isinstance(m, SnrParams)]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def snr_param_overhead(self) -> int:
        """按公式累加每个 SNR 模块的参数量。"""
        return sum(param_count(m.channels, m.r, m.num_classes, use_bias=m.b1 is not None)
                   for _, m in self.snr_modules())

    def zero_grad(self):
        for tensor in self.parameters().values():
            tensor.zero_grad()

    # --- 前向 ---
    def forward(self, x: Tensor, with_contaminated: bool = True) -> ForwardResult:
        if x.shape[-1] != self.spec.in_channels:
            raise ConfigError(f"输入通道 {x.shape[-1]} 与模型的 in_channels {self.spec.in_channels} 不一致")
        h = x
        outputs, stats = [], []
        pad = self.spec.kernel_size // 2
        for i, (_cout, stride) in enumerate(self.spec.stages):
            pre = conv2d(h, self.kernels[i], stride=stride, pad=pad)
            h = relu(pre)
            module = self.norms.get(i)
            if isinstance(module, InParams):
                h = instance_normalize(h, module.gamma, module.beta, module.eps)
            elif isinstance(module, SnrParams):
                out = snr_forward(h, module, with_contaminated=with_contaminated)
                outputs.append((i, out))
                h = out.f_plus
            stats.append(_activation_stats(i, h.data, pre.data))
        embedding = global_avg_pool(h)
        if embedding.data.ndim == 1:
            embedding = reshape(embedding, (1, embedding.shape[0]))
        logits = linear(embedding, self.head_w, self.head_b)
        return ForwardResult(logits, embedding, outputs, stats)


def _activation_stats(stage: int, data: np.ndarray, pre: np.ndarray) -> dict:
    # relu_margin: 卷积输出离 ReLU 拐点的最小距离
    return {"stage": stage, "mean": float(data.mean()), "std": float(data.std()),
            "min": float(data.min()), "max": float(data.max()),
            "relu_margin": float(np.abs(pre).min())}


def build_model(spec: ModelSpec, seed: int = 0, precision: str = "float64") -> SnrNetwork:
    dtype = np.float32 if precision == "float32" else np.float64
    return SnrNetwork(spec, seed=seed, dtype=dtype)


# --- 检查点 ---
def save_checkpoint(model: SnrNetwork, directory, extra: Optional[dict] = None) -> Path:
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    named = model.parameters()
    offsets = save_tensors(target / CHECKPOINT_TENSORS, [t.data for t in named.values()])
    manifest = {
        "format": "SNRT0001",
        "model_spec": asdict(model.spec),
        "tensors": [{"name": name, "shape": list(t.shape), "offset": off}
                    for (name, t), off in zip(named.items(), offsets)],
        "snr_module_stages": [i for i, _ in model.snr_modules()],
        "extra": extra or {},
    }
    with (target / CHECKPOINT_MANIFEST).open("w", encoding="utf-8") as handle:
        json.dump(manifest, handle, ensure_ascii=False, indent=2)
    return target


def load_checkpoint(directory, expected_spec: Optional[ModelSpec] = None, precision: str = "float64") -> SnrNetwork:
    target = Path(directory)
    manifest_path = target / CHECKPOINT_MANIFEST
    if not manifest_path.is_file() or not (target / CHECKPOINT_TENSORS).is_file():
        raise FormatError(f"'{target}' 中缺少 {CHECKPOINT_MANIFEST} 或 {CHECKPOINT_TENSORS}")
    with manifest_path.open("r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    spec = ModelSpec(**manifest["model_spec"])
    if expected_spec is not None and asdict(expected_spec) != asdict(spec):
        raise CheckpointMismatchError("检查点的模型规格与当前配置不一致")

    model = build_model(spec, precision=precision)
    arrays = load_tensors(target / CHECKPOINT_TENSORS)
    named = model.parameters()
    entries = manifest["tensors"]
    if len(arrays) != len(named) or [e["name"] for e in entries] != list(named):
        raise CheckpointMismatchError(f"检查点包含 {len(arrays)} 个张量，模型需要 {len(named)} 个")
    for (name, tensor), array in zip(named.items(), arrays):
        if tuple(array.shape) != tensor.shape:
            raise CheckpointMismatchError(f"张量 {name} 形状不一致：检查点 {array.shape}，模型 {tensor.shape}")
        tensor.data = array.astype(model.dtype)
    return model
