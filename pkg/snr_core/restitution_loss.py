"""
模块名称: 双重还原损失 (restitution_loss.py)

功能描述:
    比较还原前后特征的"预测熵"，推动残差被正确地拆成任务相关 / 无关两部分：
        L⁺ = softplus(H(φ(f̃⁺)) − H(φ(f̃)))     还原 R⁺ 之后应当更确定
        L⁻ = softplus(H(φ(f̃)) − H(φ(f̃⁻)))     加入 R⁻ 之后应当更模糊
    三种任务形式只在"如何得到特征向量"上不同：
        - 分类: 整张特征图做空间平均池化；
        - 分割: 每个像素单独算熵，先对熵求平均再做一次 softplus；
        - 检测: 每个真值框内做区域平均池化，对所有框的熵求平均。
    另外提供 `LossTraceWriter`，按步把损失追加写入 CSV。
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from snr_core.errors import ContractError, DimensionError, GeometryError
from snr_core import tensor_core as tc
from snr_core.tensor_core import Tensor

LOSS_TERMS = ("dual", "plus_only", "minus_only", "no_compare")


@dataclass
class LossBundle:
    l_plus: Tensor
    l_minus: Tensor
    l_snr: Tensor
    per_module: List[Tuple[int, float, float]] = field(default_factory=list)
    # (模块序号, mean H(φ(f̃⁺)), mean H(φ(f̃)), mean H(φ(f̃⁻)))
    entropies: List[Tuple[int, float, float, float]] = field(default_factory=list)


@dataclass
class BoxSet:
    boxes: List[Tuple[int, int, int, int]]
    labels: List[int] = field(default_factory=list)

    def validate(self, h: int, w: int):
        if not self.boxes:
            raise ContractError("BoxSet 为空：检测损失至少需要一个真值框")
        for x0, y0, x1, y1 in self.boxes:
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise GeometryError(f"真值框 {(x0, y0, x1, y1)} 超出 {h}×{w} 特征图或面积为零")


def entropy(p: Tensor) -> Tensor:
    """H(p) = −Σ p·ln p，0·ln 0 记为 0。输入不是概率向量时抛出 ContractError。"""
    return tc.entropy(p)


def _phi_entropy(vectors: Tensor, phi) -> Tensor:
    """vectors: (m, c) → 每一行经 φ（全连接 + softmax）后的熵，形状 (m,)。"""
    return entropy(tc.softmax(tc.linear(vectors, phi.w_phi, phi.b_phi)))


def _pooled_rows(f: Tensor) -> Tensor:
    pooled = tc.global_avg_pool(f)
    return tc.reshape(pooled, (1, pooled.shape[0])) if pooled.data.ndim == 1 else pooled


def pooled_entropy(f: Tensor, phi) -> Tensor:
    """分类形式下每个样本的 H(φ(pool(f)))，形状 (n,)。评估时统计熵也用它。"""
    return _phi_entropy(_pooled_rows(f), phi)


def _compare(h_plus: Tensor, h_norm: Tensor, h_minus: Tensor, terms: str, module_index: int) -> LossBundle:
    """h_*: 每个样本的熵 (n,)。返回批内平均后的 L⁺、L⁻。"""
    if terms not in LOSS_TERMS:
        raise ContractError(f"未知的损失形式: {terms}，可选 {LOSS_TERMS}")
    zero = Tensor(np.zeros((), dtype=h_norm.dtype))
    if terms == "no_compare":
        l_plus = tc.reduce_mean(tc.softplus(h_plus))
        l_minus = tc.reduce_mean(tc.softplus(tc.elementwise("scale", h_minus, -1.0)))
    else:
        l_plus = tc.reduce_mean(tc.softplus(tc.elementwise("sub", h_plus, h_norm)))
        l_minus = tc.reduce_mean(tc.softplus(tc.elementwise("sub", h_norm, h_minus)))
        if terms == "plus_only":
            l_minus = zero
        elif terms == "minus_only":
            l_plus = zero
    l_snr = tc.elementwise("add", l_plus, l_minus)
    return LossBundle(
        l_plus=l_plus,
        l_minus=l_minus,
        l_snr=l_snr,
        per_module=[(module_index, l_plus.item(), l_minus.item())],
        entropies=[(module_index, float(h_plus.data.mean()), float(h_norm.data.mean()), float(h_minus.data.mean()))],
    )


def _check_triplet(f_norm: Tensor, f_plus: Tensor, f_minus: Tensor, phi):
    if not (f_norm.shape == f_plus.shape == f_minus.shape):
        raise DimensionError("三组特征图形状必须一致")
    if f_norm.shape[-1] != phi.w_phi.shape[1]:
        raise DimensionError(f"特征通道 {f_norm.shape[-1]} 与 φ 头输入维度 {phi.w_phi.shape[1]} 不一致")


def classification_dual_loss(f_norm: Tensor, f_plus: Tensor, f_minus: Tensor, phi,
                             terms: str = "dual", module_index: int = 0) -> LossBundle:
    _check_triplet(f_norm, f_plus, f_minus, phi)
    return _compare(pooled_entropy(f_plus, phi), pooled_entropy(f_norm, phi),
                    pooled_entropy(f_minus, phi), terms, module_index)


def _pixel_entropy(f: Tensor, phi) -> Tensor:
    """每个像素的熵，再按样本求空间平均，返回 (n,)（单样本时 n=1）。"""
    n = f.shape[0] if f.data.ndim == 4 else 1
    h, w, c = f.shape[-3:]
    per_pixel = _phi_entropy(tc.reshape(f, (n * h * w, c)), phi)
    return tc.reduce_mean(tc.reshape(per_pixel, (n, h * w)), axis=-1)


def segmentation_dual_loss(f_norm: Tensor, f_plus: Tensor, f_minus: Tensor, phi,
                           terms: str = "dual", module_index: int = 0) -> LossBundle:
    _check_triplet(f_norm, f_plus, f_minus, phi)
    return _compare(_pixel_entropy(f_plus, phi), _pixel_entropy(f_norm, phi),
                    _pixel_entropy(f_minus, phi), terms, module_index)


def _region_entropy(f: Tensor, boxes: BoxSet, phi) -> Tensor:
    rows = tc.stack([tc.region_avg_pool(f, box) for box in boxes.boxes])
    per_box = _phi_entropy(rows, phi)
    return tc.reduce_mean(tc.reshape(per_box, (1, len(boxes.boxes))), axis=-1)


def detection_dual_loss(f_norm: Tensor, f_plus: Tensor, f_minus: Tensor, boxes: BoxSet, phi,
                        terms: str = "dual", module_index: int = 0) -> LossBundle:
    """单张图的检测形式：每个框区域池化后算熵，框间平均，再做 softplus 比较。"""
    _check_triplet(f_norm, f_plus, f_minus, phi)
    if f_norm.data.ndim != 3:
        raise DimensionError("detection_dual_loss 一次只处理一张特征图 (h, w, c)")
    boxes.validate(f_norm.shape[0], f_norm.shape[1])
    return _compare(_region_entropy(f_plus, boxes, phi), _region_entropy(f_norm, boxes, phi),
                    _region_entropy(f_minus, boxes, phi), terms, module_index)


def combine_bundles(bundles: Sequence[LossBundle]) -> Optional[LossBundle]:
    """把多个 SNR 模块的损失相加，per_module 与 entropies 保持模块顺序。"""
    if not bundles:
        return None
    l_plus, l_minus = bundles[0].l_plus, bundles[0].l_minus
    for b in bundles[1:]:
        l_plus = tc.elementwise("add", l_plus, b.l_plus)
        l_minus = tc.elementwise("add", l_minus, b.l_minus)
    l_snr = bundles[0].l_snr
    for b in bundles[1:]:
        l_snr = tc.elementwise("add", l_snr, b.l_snr)
    return LossBundle(
        l_plus=l_plus,
        l_minus=l_minus,
        l_snr=l_snr,
        per_module=[row for b in bundles for row in b.per_module],
        entropies=[row for b in bundles for row in b.entropies],
    )


def aggregate_snr_loss(task_loss: Tensor, bundles: Sequence[LossBundle], weight: float = 1.0) -> Tensor:
    """total = task_loss + λ·Σ_modules (L⁺ + L⁻)。λ=0 时直接返回任务损失。"""
    if weight < 0:
        raise ContractError(f"SNR 损失权重 λ 必须 ≥ 0，收到 {weight}")
    if weight == 0 or not bundles:
        return task_loss
    snr_total = combine_bundles(bundles).l_snr
    return tc.elementwise("add", task_loss, tc.elementwise("scale", snr_total, float(weight)))


class LossTraceWriter:
    """
    按步记录损失：step, task_loss, l_plus_i, l_minus_i（每个模块）, total。
    先缓存在内存里，`flush` 时一次性用 pandas 追加写入 CSV。
    """

    def __init__(self, path, num_modules: int):
        self.path = Path(path)
        self.num_modules = num_modules
        self.rows = []
        self._header_written = False

    @property
    def columns(self):
        cols = ["step", "task_loss"]
        for i in range(self.num_modules):
            cols += [f"l_plus_{i}", f"l_minus_{i}"]
        return cols + ["total"]

    def append(self, step: int, task_loss: float, bundle: Optional[LossBundle], total: float):
        row = {"step": step, "task_loss": task_loss, "total": total}
        modules = bundle.per_module if bundle is not None else []
        for i in range(self.num_modules):
            lp, lm = (modules[i][1], modules[i][2]) if i < len(modules) else (0.0, 0.0)
            row[f"l_plus_{i}"] = lp
            row[f"l_minus_{i}"] = lm
        self.rows.append(row)

    def flush(self):
        if not self.rows:
            return
        frame = pd.DataFrame(self.rows, columns=self.columns)
        frame.to_csv(self.path, mode="a" if self._header_written else "w",
                     header=not self._header_written, index=False)
        self._header_written = True
        self.rows = []
