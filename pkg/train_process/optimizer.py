"""
模块名称: 优化器与学习率调度 (optimizer.py)

功能描述:
    - `SGDMomentum`: 带动量的 SGD，v ← μ·v + g，p ← p − lr·v。
    - `cosine_lr`:   余弦退火，第 0 个 epoch 为 lr₀，最后一个 epoch 降到 lr_min。
"""
import math
from typing import Dict

import numpy as np

from snr_core.tensor_core import Tensor


def cosine_lr(epoch: int, epochs: int, lr0: float, lr_min: float = 0.0) -> float:
    span = max(epochs - 1, 1)
    progress = min(max(epoch, 0), span) / span
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * progress))


class SGDMomentum:
    def __init__(self, params: Dict[str, Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr: float):
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            v = self.momentum * self.velocity[name] + tensor.grad
            self.velocity[name] = v.astype(tensor.data.dtype, copy=False)
            tensor.data = tensor.data - tensor.data.dtype.type(lr) * self.velocity[name]

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()
