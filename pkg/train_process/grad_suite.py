"""
模块名称: 梯度检查套件 (grad_suite.py)

功能描述:
    用中心差分（64 位，步长 1e-5）核对自动微分给出的梯度，按范围分组：
        - ops:   tensor_core 的每一个原语
        - snr:   实例归一化、通道门控、完整 SNR 模块（对输入和每个参数）
        - loss:  分类 / 分割 / 检测三种双重还原损失，以及四种损失形式
        - model: 以上全部 + 小型主干网络的完整组合（交叉熵 + λ·L_SNR）
    每个检查在多个种子上重复；目标函数是输出与随机权重的内积，保证梯度量级为 O(1)。
    任一检查的最大相对误差 ≥ 容差时抛出 GradCheckFailure，失败记录里写明原语、种子和最差坐标。

使用方法:
    python snr_assistant.py grad-check --scope model --seeds 20
"""
import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterator, List, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from snr_core import tensor_core as tc
from snr_core.errors import ConfigError, GradCheckFailure
from snr_core.restitution_loss import (BoxSet, classification_dual_loss, detection_dual_loss,
                                       segmentation_dual_loss)
from snr_core.seeding import named_stream
from snr_core.snr import channel_gate, init_snr_params, instance_normalize, snr_forward
from snr_core.tensor_core import Tensor, grad_check_detailed
from train_process.model import build_model
from train_process.run_config import LOSS_TERMS, ModelSpec

SCOPES = ("ops", "snr", "loss", "model")
DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5

# (名称, 目标函数 f(Tensor) -> 标量 Tensor, 输入数组)
Check = Tuple[str, Callable[[Tensor], Tensor], np.ndarray]


@dataclass
class CheckRecord:
    scope: str
    op: str
    seed: int
    max_rel_error: float
    worst_index: Tuple[int, ...]
    passed: bool


def _weights(rng: np.random.Generator, shape) -> Tensor:
    """探针权重：幅值在 [0.5, 1.5]，符号随机，远离 0。"""
    return Tensor(rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape))


def _dot(out: Tensor, weights: Tensor) -> Tensor:
    """输出与固定探针权重的内积，得到标量。"""
    return tc.reduce_sum(tc.elementwise("mul", out, weights))


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    """ReLU 类原语的输入离拐点至少 0.1，差分不会跨过拐点。"""
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + 0.1)


def _simplex(rng: np.random.Generator, shape) -> np.ndarray:
    e = rng.uniform(0.2, 1.0, size=shape)
    return e / e.sum(axis=-1, keepdims=True)


# --- 1. 原语 ---
def _op_checks(rng: np.random.Generator) -> Iterator[Check]:
    shape = (3, 4)
    other = Tensor(rng.normal(size=shape))
    # 探针权重必须在构造检查时就固定下来
    p_add, p_sub, p_mul = (_weights(rng, shape) for _ in range(3))

    yield "add", lambda x: _dot(tc.elementwise("add", x, other), p_add), rng.normal(size=shape)
    yield "sub", lambda x: _dot(tc.elementwise("sub", other, x), p_sub), rng.normal(size=shape)
    yield "mul", lambda x: _dot(tc.elementwise("mul", x, other), p_mul), rng.normal(size=shape)
    p = _weights(rng, shape)
    yield "scale", lambda x: _dot(tc.elementwise("scale", x, -1.7), p), rng.normal(size=shape)
    p2 = _weights(rng, shape)
    yield "add_scalar", lambda x: _dot(tc.elementwise("add", x, 0.3), p2), rng.normal(size=shape)

    for kind in ("relu", "sigmoid", "softplus"):
        pk = _weights(rng, shape)
        yield kind, (lambda k, q: lambda x: _dot(tc.activations(k, x), q))(kind, pk), _away_from_zero(rng, shape)

    b = Tensor(rng.normal(size=(4, 5)))
    pm = _weights(rng, (3, 5))
    yield "matmul", lambda x: _dot(tc.matmul(x, b), pm), rng.normal(size=(3, 4))
    lw, lb = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=2))
    pl = _weights(rng, (3, 2))
    yield "linear", lambda x: _dot(tc.linear(x, lw, lb), pl), rng.normal(size=(3, 4))
    bias = Tensor(rng.normal(size=4))
    pb = _weights(rng, (3, 4))
    yield "add_bias", lambda x: _dot(tc.add_bias(x, bias), pb), rng.normal(size=(3, 4))

    kernel = Tensor(rng.normal(size=(3, 3, 2, 3)))
    pc1 = _weights(rng, (2, 4, 4, 3))
    yield "conv2d", lambda x: _dot(tc.conv2d(x, kernel, stride=1, pad=1), pc1), rng.normal(size=(2, 4, 4, 2))
    pc2 = _weights(rng, (3, 3, 3))
    yield "conv2d_stride2", lambda x: _dot(tc.conv2d(x, kernel, stride=2, pad=1), pc2), rng.normal(size=(5, 5, 2))
    image = Tensor(rng.normal(size=(4, 4, 2)))
    pk2 = _weights(rng, (2, 2, 3))
    yield "conv2d_kernel", lambda k: _dot(tc.conv2d(image, k, stride=2, pad=1), pk2), rng.normal(size=(3, 3, 2, 3))

    ps = _weights(rng, (3, 4))
    yield "softmax", lambda x: _dot(tc.softmax(x), ps), rng.normal(size=(3, 4))
    pe = _weights(rng, 3)
    yield "entropy", lambda x: _dot(tc.entropy(x, check=False), pe), _simplex(rng, (3, 4))
    labels = rng.integers(0, 4, size=3)
    yield "cross_entropy", lambda x: tc.cross_entropy(x, labels), rng.normal(size=(3, 4))

    pg = _weights(rng, (2, 3))
    yield "global_avg_pool", lambda x: _dot(tc.global_avg_pool(x), pg), rng.normal(size=(2, 4, 5, 3))
    pr = _weights(rng, 3)
    yield "region_avg_pool", lambda x: _dot(tc.region_avg_pool(x, (1, 0, 4, 3)), pr), rng.normal(size=(4, 5, 3))

    pmu, psig = _weights(rng, (2, 3)), _weights(rng, (2, 3))
    yield "channel_stats_mean", lambda x: _dot(tc.channel_stats(x)[0], pmu), rng.normal(size=(2, 4, 4, 3))
    yield "channel_stats_sigma", lambda x: _dot(tc.channel_stats(x)[1], psig), rng.normal(size=(2, 4, 4, 3))
    mu, sigma = Tensor(rng.normal(size=3)), Tensor(rng.uniform(0.5, 2.0, size=3))
    pn = _weights(rng, (4, 4, 3))
    yield "normalize_channels", lambda x: _dot(tc.normalize_channels(x, mu, sigma), pn), rng.normal(size=(4, 4, 3))
    xn = Tensor(rng.normal(size=(4, 4, 3)))
    yield "normalize_channels_sigma", lambda s: _dot(tc.normalize_channels(xn, mu, s), pn), \
        rng.uniform(0.5, 2.0, size=3)
    gamma, beta = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    pa = _weights(rng, (2, 4, 4, 3))
    yield "channel_affine", lambda x: _dot(tc.channel_affine(x, gamma, beta), pa), rng.normal(size=(2, 4, 4, 3))
    xa = Tensor(rng.normal(size=(2, 4, 4, 3)))
    yield "channel_affine_gamma", lambda g: _dot(tc.channel_affine(xa, g, beta), pa), rng.normal(size=3)
    gate = Tensor(rng.uniform(0.1, 0.9, size=(2, 3)))
    yield "scale_channels", lambda x: _dot(tc.scale_channels(x, gate), pa), rng.normal(size=(2, 4, 4, 3))
    yield "scale_channels_gate", lambda a: _dot(tc.scale_channels(xa, a), pa), rng.uniform(0.1, 0.9, size=(2, 3))

    pre = _weights(rng, (4, 3))
    yield "reshape", lambda x: _dot(tc.reshape(x, (4, 3)), pre), rng.normal(size=(3, 4))
    second = Tensor(rng.normal(size=(3, 4)))
    pst = _weights(rng, (2, 3, 4))
    yield "stack", lambda x: _dot(tc.stack([x, second]), pst), rng.normal(size=(3, 4))
    yield "reduce_sum", lambda x: tc.reduce_sum(tc.elementwise("mul", x, other)), rng.normal(size=shape)
    yield "reduce_mean", lambda x: tc.reduce_mean(tc.elementwise("mul", x, other)), rng.normal(size=shape)
    prm = _weights(rng, 3)
    yield "reduce_mean_last", lambda x: _dot(tc.reduce_mean(x, axis=-1), prm), rng.normal(size=shape)


# --- 2. SNR 模块 ---
def _snr_checks(rng: np.random.Generator) -> Iterator[Check]:
    c, k = 8, 3
    params = init_snr_params(c, k, rng, r=4)
    x_shape = (2, 4, 4, c)
    p_out = _weights(rng, x_shape)
    p_gate = _weights(rng, (2, c))

    yield "instance_normalize", lambda x: _dot(instance_normalize(x, params.gamma, params.beta, params.eps), p_out), \
        rng.normal(size=x_shape)
    yield "channel_gate", lambda x: _dot(channel_gate(x, params), p_gate), rng.normal(size=x_shape)

    def both_branches(out):
        return tc.elementwise("add", _dot(out.f_plus, p_out), _dot(out.f_minus, p_minus))

    p_minus = _weights(rng, x_shape)
    yield "snr_forward", lambda x: both_branches(snr_forward(x, params)), rng.normal(size=x_shape)
    single = rng.normal(size=x_shape[1:])
    p_single = _weights(rng, x_shape[1:])
    yield "snr_forward_single", lambda x: _dot(snr_forward(x, params).f_plus, p_single), single

    f = Tensor(rng.normal(size=x_shape))
    for name in ("gamma", "beta", "w1", "b1", "w2", "b2"):
        current = getattr(params, name).data

        def check(t, name=name):
            return both_branches(snr_forward(f, dataclasses.replace(params, **{name: t})))
        yield f"snr_param_{name}", check, current + rng.normal(scale=0.1, size=current.shape)


# --- 3. 双重还原损失 ---
def _loss_checks(rng: np.random.Generator) -> Iterator[Check]:
    c, k = 6, 4
    phi = init_snr_params(c, k, rng, r=4)
    # φ 的权重放大一些，让熵差明显偏离 0
    phi = dataclasses.replace(phi, w_phi=Tensor(rng.normal(size=(k, c))), b_phi=Tensor(rng.normal(size=k)))
    shape = (2, 3, 3, c)
    f_norm, f_plus, f_minus = (Tensor(rng.normal(size=shape)) for _ in range(3))
    box_map = (4, 5, c)
    b_norm, b_plus, b_minus = (Tensor(rng.normal(size=box_map)) for _ in range(3))
    boxes = BoxSet([(0, 0, 3, 2), (1, 1, 5, 4), (0, 0, 5, 4)], [0, 1, 2])

    forms = {
        "classification": lambda a, b, m, terms: classification_dual_loss(a, b, m, phi, terms).l_snr,
        "segmentation": lambda a, b, m, terms: segmentation_dual_loss(a, b, m, phi, terms).l_snr,
    }
    for form, loss in forms.items():
        yield f"{form}_f_plus", (lambda fn: lambda x: fn(f_norm, x, f_minus, "dual"))(loss), f_plus.data
        yield f"{form}_f_norm", (lambda fn: lambda x: fn(x, f_plus, f_minus, "dual"))(loss), f_norm.data
        yield f"{form}_f_minus", (lambda fn: lambda x: fn(f_norm, f_plus, x, "dual"))(loss), f_minus.data

    detect = lambda a, b, m: detection_dual_loss(a, b, m, boxes, phi).l_snr
    yield "detection_f_plus", lambda x: detect(b_norm, x, b_minus), b_plus.data
    yield "detection_f_norm", lambda x: detect(x, b_plus, b_minus), b_norm.data
    yield "detection_f_minus", lambda x: detect(b_norm, b_plus, x), b_minus.data

    for terms in LOSS_TERMS:
        if terms == "dual":
            continue
        yield f"classification_{terms}", (lambda t: lambda x: classification_dual_loss(
            x, f_plus, f_minus, phi, t).l_snr)(terms), f_norm.data
    yield "phi_weights", lambda w: classification_dual_loss(
        f_norm, f_plus, f_minus, dataclasses.replace(phi, w_phi=w)).l_snr, phi.w_phi.data


# --- 4. 完整组合 ---
COMPOSITE_SPEC = ModelSpec(stages=[[4, 2], [8, 1]], snr_after_stage=[True, True], variant="snr",
                           num_classes=3, reduction=4)


def _composite_input(model, rng: np.random.Generator, shape, attempts: int = 20) -> np.ndarray:
    """挑一个所有卷积输出都离 ReLU 拐点足够远的输入。"""
    x = rng.uniform(0.0, 1.0, size=shape)
    for _ in range(attempts):
        res = model.forward(Tensor(x))
        if min(s["relu_margin"] for s in res.stage_stats) > 1e-3:
            break
        x = rng.uniform(0.0, 1.0, size=shape)
    return x


def _model_checks(rng: np.random.Generator, seed: int) -> Iterator[Check]:
    model = build_model(COMPOSITE_SPEC, seed=seed, precision="float64")
    labels = rng.integers(0, COMPOSITE_SPEC.num_classes, size=2)
    x = _composite_input(model, rng, (2, 6, 6, 3))
    phis = dict(model.snr_modules())

    def total_loss(inputs: Tensor) -> Tensor:
        res = model.forward(inputs)
        task = tc.cross_entropy(res.logits, labels)
        loss = task
        for k, (stage, out) in enumerate(res.snr_outputs):
            bundle = classification_dual_loss(out.f_norm, out.f_plus, out.f_minus, phis[stage], module_index=k)
            loss = tc.elementwise("add", loss, bundle.l_snr)
        return loss

    yield "model_input", total_loss, x
    image = Tensor(x)
    for name, original in list(model.parameters().items()):
        def check(t, name=name, original=original):
            model.set_parameter(name, t)
            try:
                return total_loss(image)
            finally:
                model.set_parameter(name, original)
        yield f"model_param_{name}", check, original.data.copy()


# --- 5. 入口 ---
def _checks_for(scope: str, seed: int) -> Iterator[Tuple[str, Check]]:
    rng = named_stream(seed, f"grad_check:{scope}")
    groups = {
        "ops": [("ops", _op_checks)],
        "snr": [("snr", _snr_checks)],
        "loss": [("loss", _loss_checks)],
    }
    groups["model"] = groups["ops"] + groups["snr"] + groups["loss"]
    for group, build in groups[scope]:
        for check in build(rng):
            yield group, check
    if scope == "model":
        for check in _model_checks(rng, seed):
            yield "model", check


def run_grad_suite(scope: str = "ops", seeds: int = 20, tolerance: float = DEFAULT_TOLERANCE,
                   step: float = DEFAULT_STEP, verbose: bool = False) -> pd.DataFrame:
    """
    运行某个范围内的全部检查，返回每条检查的记录表 (scope, op, seed, max_rel_error, worst_index, passed)。
    有任何一条失败时抛出 GradCheckFailure，`failures` 中是失败的记录。
    """
    if scope not in SCOPES:
        raise ConfigError(f"未知的梯度检查范围 '{scope}'，可选 {SCOPES}")
    if seeds < 1:
        raise ConfigError("--seeds 至少为 1")

    records: List[CheckRecord] = []
    for seed in tqdm(range(seeds), desc=f"grad-check {scope}", disable=not verbose):
        for group, (name, fn, x) in _checks_for(scope, seed):
            result = grad_check_detailed(fn, np.asarray(x, dtype=np.float64), step)
            records.append(CheckRecord(group, name, seed, result.max_rel_error, result.worst_index,
                                       result.max_rel_error < tolerance))

    frame = pd.DataFrame([dataclasses.asdict(r) for r in records])
    failures = [r for r in records if not r.passed]
    if failures:
        worst = max(failures, key=lambda r: r.max_rel_error)
        raise GradCheckFailure(
            f"{len(failures)} 项梯度检查未通过（容差 {tolerance}）；最差: {worst.op} "
            f"seed={worst.seed} 坐标={worst.worst_index} 相对误差={worst.max_rel_error:.3e}",
            failures,
        )
    return frame
