"""
模块名称: 风格归一化与还原模块 (snr.py)

功能描述:
    SNR 模块的完整前向计算：
        1. 实例归一化:      F̃ = IN(F)，逐样本、逐通道去除均值/方差（风格）。
        2. 残差:            R = F − F̃，即被 IN 去掉的信息。
        3. 通道门控:        a = sigmoid(W2·relu(W1·pool(R) + b1) + b2)。
        4. 解耦:            R⁺ = a⊙R，R⁻ = (1 − a)⊙R。
        5. 还原:            F̃⁺ = F̃ + R⁺ 送入下一阶段；F̃⁻ = F̃ + R⁻ 只用于计算损失。
    每个模块还带一个独立的熵头 φ（全连接 + softmax），只用于双重还原损失。

使用方法:
    params = init_snr_params(c=32, num_classes=4, rng=np.random.default_rng(0))
    out = snr_forward(feature, params)
    out.f_plus   # 主干网络继续使用的特征
"""
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from snr_core.errors import DimensionError
from snr_core.tensor_core import (
    DEFAULT_EPS,
    Tensor,
    channel_affine,
    channel_stats,
    elementwise,
    global_avg_pool,
    linear,
    normalize_channels,
    relu,
    reshape,
    scale_channels,
    sigmoid,
)

DEFAULT_REDUCTION = 16


def reduced_channels(c: int, r: int = DEFAULT_REDUCTION) -> int:
    """⌈c / r⌉，并且至少为 1。"""
    return max(1, math.ceil(c / r))


@dataclass
class SnrParams:
    gamma: Tensor
    beta: Tensor
    w1: Tensor
    b1: Optional[Tensor]
    w2: Tensor
    b2: Optional[Tensor]
    w_phi: Tensor
    b_phi: Tensor
    r: int = DEFAULT_REDUCTION
    eps: float = DEFAULT_EPS

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w_phi.shape[0]

    def tensors(self) -> Dict[str, Tensor]:
        """按固定顺序列出全部可学习张量（检查点依赖这个顺序）。"""
        named = {"gamma": self.gamma, "beta": self.beta, "w1": self.w1, "b1": self.b1,
                 "w2": self.w2, "b2": self.b2, "w_phi": self.w_phi, "b_phi": self.b_phi}
        return {k: v for k, v in named.items() if v is not None}

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors().values())


@dataclass
class SnrOutputs:
    f_norm: Tensor
    residual: Tensor
    r_plus: Tensor
    r_minus: Tensor
    gate: Tensor
    f_plus: Tensor
    f_minus: Optional[Tensor]


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_snr_params(c: int, num_classes: int, rng: np.random.Generator, r: int = DEFAULT_REDUCTION,
                    eps: float = DEFAULT_EPS, use_bias: bool = True, dtype=np.float64) -> SnrParams:
    """
    γ=1、β=0；W1、W2、Wφ 在 [−1/√fan_in, 1/√fan_in] 上均匀初始化；偏置为 0。
    use_bias=False 时门控的两个全连接层不带偏置（严格按门控公式）。
    """
    m = reduced_channels(c, r)
    zeros = lambda n: Tensor(np.zeros(n, dtype=dtype), requires_grad=True)
    return SnrParams(
        gamma=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        beta=zeros(c),
        w1=_uniform(rng, (m, c), c, dtype),
        b1=zeros(m) if use_bias else None,
        w2=_uniform(rng, (c, m), m, dtype),
        b2=zeros(c) if use_bias else None,
        w_phi=_uniform(rng, (num_classes, c), c, dtype),
        b_phi=zeros(num_classes),
        r=r,
        eps=eps,
    )


# --- 四个基本步骤 ---
def instance_normalize(f: Tensor, gamma: Tensor, beta: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    mu, sigma = channel_stats(f, eps)
    return channel_affine(normalize_channels(f, mu, sigma), gamma, beta)


def compute_residual(f: Tensor, f_norm: Tensor) -> Tensor:
    if f.shape != f_norm.shape:
        raise DimensionError(f"compute_residual: {f.shape} 与 {f_norm.shape} 形状不一致")
    return elementwise("sub", f, f_norm)


def channel_gate(residual: Tensor, params: SnrParams) -> Tensor:
    pooled = global_avg_pool(residual)
    single = pooled.data.ndim == 1
    if single:
        pooled = reshape(pooled, (1, pooled.shape[0]))
    hidden = relu(linear(pooled, params.w1, params.b1))
    gate = sigmoid(linear(hidden, params.w2, params.b2))
    return reshape(gate, (gate.shape[1],)) if single else gate


def disentangle(residual: Tensor, gate: Tensor):
    if gate.shape[-1] != residual.shape[-1]:
        raise DimensionError(f"disentangle: 门控长度 {gate.shape[-1]} 与通道数 {residual.shape[-1]} 不一致")
    complement = elementwise("add", elementwise("scale", gate, -1.0), 1.0)
    return scale_channels(residual, gate), scale_channels(residual, complement)


def snr_forward(f: Tensor, params: SnrParams, with_contaminated: bool = True) -> SnrOutputs:
    """
    组合上面四步。推理时可以令 with_contaminated=False，
    此时不生成 F̃⁻，F̃⁺ 的数值不受影响。
    """
    if f.shape[-1] != params.channels:
        raise DimensionError(f"snr_forward: 输入通道 {f.shape[-1]} 与模块通道 {params.channels} 不一致")
    f_norm = instance_normalize(f, params.gamma, params.beta, params.eps)
    residual = compute_residual(f, f_norm)
    gate = channel_gate(residual, params)
    r_plus, r_minus = disentangle(residual, gate)
    f_plus = elementwise("add", f_norm, r_plus)
    f_minus = elementwise("add", f_norm, r_minus) if with_contaminated else None
    return SnrOutputs(f_norm, residual, r_plus, r_minus, gate, f_plus, f_minus)


def param_count(c: int, r: int = DEFAULT_REDUCTION, k: int = 1, use_bias: bool = True) -> int:
    """2c (IN) + ⌈c/r⌉·c + ⌈c/r⌉ (W1, b1) + c·⌈c/r⌉ + c (W2, b2) + K·c + K (φ)。"""
    m = reduced_channels(c, r)
    gate = m * c + c * m + ((m + c) if use_bias else 0)
    return 2 * c + gate + k * c + k
