"""
模块名称: 张量与自动微分核心 (tensor_core.py)

功能描述:
    一个基于 numpy 的小型反向模式自动微分库，为 SNR 模块提供全部数学原语。
    - `Tensor`: 稠密数组 + 梯度槽 + 节点编号。
    - `Tape`: 按拓扑顺序记录每一次原语调用，`backward` 倒序回放。
    - 原语: 逐元素运算、激活函数、矩阵乘、卷积、softmax、池化、
      通道统计、熵、交叉熵等。每个原语的反向规则登记在 `BACKWARD_RULES` 中。
    - `grad_check`: 中心差分梯度检查，作为测试的数值预言机。

约定:
    - 空间张量采用通道在后的布局 (h, w, c)，带批次时为 (n, h, w, c)。
      统计量与池化永远不跨越批次维。
    - 除了"张量与标量"之外不做任何隐式广播；按通道的运算由
      `channel_affine` / `scale_channels` / `normalize_channels` 等显式原语完成。
    - 默认 64 位浮点；训练时可以整体切换为 32 位。
"""
import itertools
import numbers
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from snr_core.errors import ContractError, DimensionError, GeometryError, NumericalError

DEFAULT_EPS = 1e-5
PROB_CLAMP = 1e-12

_node_ids = itertools.count(1)
_local = threading.local()


# --- 1. Tensor 与 Tape ---
class Tensor:
    """
    稠密张量。创建后数据不再修改（优化器更新参数时会替换 `data`，
    但只发生在两步之间、没有 Tape 正在引用它的时候）。
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __neg__(self):
        return elementwise("scale", self, -1.0)


@dataclass
class Node:
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    ctx: dict


class Tape:
    """
    计算记录带。`with Tape():` 期间产生的所有原语都记录在这条带上。
    每个线程拥有自己的带栈，不同线程的带互不干扰。
    没有活动的带时原语只做前向计算，输出是脱离计算图的张量。
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def record(self, kind, inputs, output, ctx):
        self.nodes.append(Node(kind, tuple(inputs), output, ctx))

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, ctx: Optional[dict] = None) -> Tensor:
    """创建输出张量；有活动的带且任一输入需要梯度时，把这次调用记录到该带上。"""
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, inputs, out, ctx or {})
        out._tape = tape
    return out


BACKWARD_RULES: Dict[str, Callable] = {}


def _rule(kind):
    def register(fn):
        BACKWARD_RULES[kind] = fn
        return fn
    return register


def backward(loss: Tensor) -> None:
    """
    从标量 loss 出发倒序回放带，把梯度写入所有可达的 requires_grad 张量。
    同一张量被多个分支使用时梯度相加；叶子张量上已有的梯度会被累加。
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward 只接受标量 loss，收到形状 {loss.shape}")
    if not loss.requires_grad or loss._tape is None:
        raise ContractError("loss 没有连接到任何计算记录带")

    tape = loss._tape
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        out_id = node.output.node_id
        if out_id > loss.node_id:
            continue
        g = grads.pop(out_id, None)
        if g is None:
            continue
        node.output.grad = g
        in_grads = BACKWARD_RULES[node.kind](g, node.ctx, node.inputs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi
            if t._tape is not tape:
                leaves[t.node_id] = t

    for leaf_id, leaf in leaves.items():
        g = grads.pop(leaf_id)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# --- 2. 逐元素运算与激活函数 ---
def _is_scalar(b) -> bool:
    return isinstance(b, numbers.Number) or (isinstance(b, np.ndarray) and b.ndim == 0)


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """
    kind ∈ {add, sub, mul, scale}。张量与张量必须形状完全一致；
    b 为标量时 add/sub/mul/scale 均可用。
    """
    if kind not in ("add", "sub", "mul", "scale"):
        raise ContractError(f"未知的逐元素运算: {kind}")
    if _is_scalar(b):
        s = a.data.dtype.type(b)
        if kind == "add":
            return _emit("add_scalar", (a,), a.data + s)
        if kind == "sub":
            return _emit("add_scalar", (a,), a.data - s)
        return _emit("scale", (a,), a.data * s, {"s": s})
    if kind == "scale":
        raise ContractError("scale 运算的第二个参数必须是标量")
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: 形状不一致 {a.shape} vs {b.shape}")
    if kind == "add":
        return _emit("add", (a, b), a.data + b.data)
    if kind == "sub":
        return _emit("sub", (a, b), a.data - b.data)
    return _emit("mul", (a, b), a.data * b.data)


@_rule("add_scalar")
def _add_scalar_bw(g, ctx, inputs):
    return (g,)


@_rule("scale")
def _scale_bw(g, ctx, inputs):
    return (g * ctx["s"],)


@_rule("add")
def _add_bw(g, ctx, inputs):
    return g, g


@_rule("sub")
def _sub_bw(g, ctx, inputs):
    return g, -g


@_rule("mul")
def _mul_bw(g, ctx, inputs):
    a, b = inputs
    return g * b.data, g * a.data


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def _stable_softplus(x: np.ndarray) -> np.ndarray:
    mid = np.log1p(np.exp(np.clip(x, -30.0, 30.0)))
    return np.where(x > 30.0, x, np.where(x < -30.0, np.exp(np.minimum(x, 0.0)), mid))


def activations(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return _emit("relu", (x,), np.maximum(x.data, 0.0))
    if kind == "sigmoid":
        out = _stable_sigmoid(x.data)
        return _emit("sigmoid", (x,), out, {"out": out})
    if kind == "softplus":
        return _emit("softplus", (x,), _stable_softplus(x.data))
    raise ContractError(f"未知的激活函数: {kind}")


def relu(x: Tensor) -> Tensor:
    return activations("relu", x)


def sigmoid(x: Tensor) -> Tensor:
    return activations("sigmoid", x)


def softplus(x: Tensor) -> Tensor:
    return activations("softplus", x)


@_rule("relu")
def _relu_bw(g, ctx, inputs):
    # 0 处的次梯度取 0
    return (g * (inputs[0].data > 0),)


@_rule("sigmoid")
def _sigmoid_bw(g, ctx, inputs):
    s = ctx["out"]
    return (g * s * (1.0 - s),)


@_rule("softplus")
def _softplus_bw(g, ctx, inputs):
    return (g * _stable_sigmoid(inputs[0].data),)


# --- 3. 线性代数 ---
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul 只接受二维矩阵，收到 {a.shape} 与 {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul 内维不一致: {a.shape} · {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data)


@_rule("matmul")
def _matmul_bw(g, ctx, inputs):
    a, b = inputs
    return g @ b.data.T, a.data.T @ g


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """全连接层: x[m×k] · wᵀ[k×n] (+ b[n])。w 的形状为 (n, k)。"""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: 输入 {x.shape} 与权重 {w.shape} 不匹配")
    out = x.data @ w.data.T
    if b is None:
        return _emit("linear", (x, w), out)
    if b.shape != (w.shape[0],):
        raise DimensionError(f"linear: 偏置形状 {b.shape} 应为 {(w.shape[0],)}")
    return _emit("linear", (x, w, b), out + b.data)


@_rule("linear")
def _linear_bw(g, ctx, inputs):
    x, w = inputs[0], inputs[1]
    grads = [g @ w.data, g.T @ x.data]
    if len(inputs) == 3:
        grads.append(g.sum(axis=0))
    return grads


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: {x.shape} 与偏置 {b.shape} 不匹配")
    return _emit("add_bias", (x, b), x.data + b.data)


@_rule("add_bias")
def _add_bias_bw(g, ctx, inputs):
    return g, g.sum(axis=0)


# --- 4. 卷积 ---
def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """
    互相关卷积。x: (h, w, cin) 或 (n, h, w, cin)；k: (kh, kw, cin, cout)。
    输出空间尺寸为 floor((h + 2·pad − kh) / stride) + 1。
    """
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4) or k.data.ndim != 4:
        raise DimensionError(f"conv2d: 输入 {x.shape} / 卷积核 {k.shape} 维数不对")
    kh, kw, cin, cout = k.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d: 输入通道 {x.shape[-1]} 与卷积核通道 {cin} 不一致")
    if stride < 1 or pad < 0:
        raise GeometryError(f"conv2d: 非法的 stride={stride} / pad={pad}")
    xb = x.data if batched else x.data[None]
    n, h, w, _ = xb.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise GeometryError(f"conv2d: 卷积核 {kh}×{kw} 大于填充后的输入 {h + 2 * pad}×{w + 2 * pad}")

    xp = np.pad(xb, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xb
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = windows.shape[1], windows.shape[2]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * cin)
    kmat = k.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, oh, ow, cout)
    ctx = {"cols": cols, "padded_shape": xp.shape, "stride": stride, "pad": pad, "batched": batched}
    return _emit("conv2d", (x, k), out if batched else out[0], ctx)


@_rule("conv2d")
def _conv2d_bw(g, ctx, inputs):
    x, k = inputs
    kh, kw, cin, cout = k.shape
    gb = g if ctx["batched"] else g[None]
    n, oh, ow, _ = gb.shape
    s, pad = ctx["stride"], ctx["pad"]
    g2 = gb.reshape(n * oh * ow, cout)

    dk = (ctx["cols"].T @ g2).reshape(k.shape)
    dcols = (g2 @ k.data.reshape(kh * kw * cin, cout).T).reshape(n, oh, ow, kh, kw, cin)
    dxp = np.zeros(ctx["padded_shape"], dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
    hp, wp = dxp.shape[1], dxp.shape[2]
    dx = dxp[:, pad:hp - pad, pad:wp - pad, :]
    return (dx if ctx["batched"] else dx[0]), dk


# --- 5. softmax / 熵 / 交叉熵 ---
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if axis not in (-1, x.data.ndim - 1):
        raise ContractError("softmax 只支持最后一个维度")
    if x.shape[-1] < 1:
        raise DimensionError("softmax: K 必须 ≥ 1")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", (x,), out, {"out": out})


@_rule("softmax")
def _softmax_bw(g, ctx, inputs):
    s = ctx["out"]
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def entropy(p: Tensor, check: bool = True) -> Tensor:
    """
    按最后一维计算 H = −Σ p·ln(max(p, 1e-12))，自然对数。
    输入 (K,) 得到标量，(m, K) 得到 (m,)。
    """
    if check:
        sums = p.data.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-5) or np.any(p.data < 0):
            raise ContractError("entropy: 输入不是概率向量（分量需非负且和为 1）")
    pc = np.maximum(p.data, PROB_CLAMP)
    log_pc = np.log(pc)
    return _emit("entropy", (p,), -(p.data * log_pc).sum(axis=-1), {"log_pc": log_pc})


@_rule("entropy")
def _entropy_bw(g, ctx, inputs):
    p = inputs[0].data
    dp = -(ctx["log_pc"] + (p > PROB_CLAMP))
    return (np.expand_dims(g, -1) * dp,)


def cross_entropy(logits: Tensor, label) -> Tensor:
    """
    −ln softmax(logits)[label]，用 log-sum-exp 保证数值稳定。
    logits 为 (K,) 时 label 为整数；为 (n, K) 时 label 为长度 n 的整数数组，结果取批内平均。
    """
    single = logits.data.ndim == 1
    z = logits.data[None] if single else logits.data
    labels = np.atleast_1d(np.asarray(label)).astype(np.int64)
    n, k = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: 标签数量 {labels.shape} 与 logits {logits.shape} 不一致")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ContractError(f"cross_entropy: 标签超出范围 [0, {k})")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[np.arange(n), labels]
    probs = np.exp(z - lse[:, None])
    ctx = {"probs": probs, "labels": labels, "single": single}
    return _emit("cross_entropy", (logits,), np.asarray(losses.mean(), dtype=logits.dtype), ctx)


@_rule("cross_entropy")
def _cross_entropy_bw(g, ctx, inputs):
    probs = ctx["probs"].copy()
    n = probs.shape[0]
    probs[np.arange(n), ctx["labels"]] -= 1.0
    d = g * probs / n
    return (d[0] if ctx["single"] else d,)


# --- 6. 池化与通道统计 ---
def _check_spatial(x: Tensor, name: str):
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"{name}: 需要 (h, w, c) 或 (n, h, w, c)，收到 {x.shape}")
    if x.shape[-3] < 1 or x.shape[-2] < 1:
        raise DimensionError(f"{name}: 空间尺寸必须 ≥ 1")


def _spatial_mean(arr: np.ndarray) -> np.ndarray:
    return arr.sum(axis=(-3, -2)) / (arr.shape[-3] * arr.shape[-2])


def _expand_channels(v: np.ndarray) -> np.ndarray:
    """(c,) → (1, 1, c)；(n, c) → (n, 1, 1, c)，用于沿空间维展开。"""
    return v[..., None, None, :]


def global_avg_pool(x: Tensor) -> Tensor:
    _check_spatial(x, "global_avg_pool")
    return _emit("spatial_mean", (x,), _spatial_mean(x.data))


@_rule("spatial_mean")
def _spatial_mean_bw(g, ctx, inputs):
    x = inputs[0].data
    hw = x.shape[-3] * x.shape[-2]
    return (np.broadcast_to(_expand_channels(g) / hw, x.shape),)


def region_avg_pool(x: Tensor, box) -> Tensor:
    """box = (x0, y0, x1, y1)，左闭右开，x 为列、y 为行。"""
    if x.data.ndim != 3:
        raise DimensionError(f"region_avg_pool: 需要 (h, w, c)，收到 {x.shape}")
    h, w, _ = x.shape
    x0, y0, x1, y1 = (int(v) for v in box)
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise GeometryError(f"region_avg_pool: 区域框 {tuple(box)} 在 {h}×{w} 特征图上不合法")
    region = x.data[y0:y1, x0:x1, :]
    return _emit("region_mean", (x,), _spatial_mean(region), {"box": (x0, y0, x1, y1)})


@_rule("region_mean")
def _region_mean_bw(g, ctx, inputs):
    x0, y0, x1, y1 = ctx["box"]
    dx = np.zeros_like(inputs[0].data)
    dx[y0:y1, x0:x1, :] = g / ((x1 - x0) * (y1 - y0))
    return (dx,)


def channel_stats(x: Tensor, eps: float = DEFAULT_EPS) -> Tuple[Tensor, Tensor]:
    """
    每个样本、每个通道在空间维上的总体均值与标准差。
    sigma = sqrt(var + eps)，var 以 h·w 为分母。
    """
    _check_spatial(x, "channel_stats")
    mu = _spatial_mean(x.data)
    centered = x.data - _expand_channels(mu)
    sigma = np.sqrt(_spatial_mean(centered * centered) + eps)
    mu_t = _emit("spatial_mean", (x,), mu)
    sigma_t = _emit("channel_sigma", (x,), sigma, {"centered": centered, "sigma": sigma})
    return mu_t, sigma_t


@_rule("channel_sigma")
def _channel_sigma_bw(g, ctx, inputs):
    x = inputs[0].data
    hw = x.shape[-3] * x.shape[-2]
    return (_expand_channels(g / (hw * ctx["sigma"])) * ctx["centered"],)


def normalize_channels(x: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """(x − μ) / σ，μ、σ 的形状为 x.shape[:-3] + (c,)。"""
    want = x.shape[:-3] + (x.shape[-1],)
    if mu.shape != want or sigma.shape != want:
        raise DimensionError(f"normalize_channels: 统计量形状应为 {want}")
    if not np.all(np.isfinite(sigma.data)) or np.any(sigma.data <= 0):
        raise NumericalError("normalize_channels: 存在 σ ≤ 0 的常值通道，请使用 eps > 0")
    inv = 1.0 / sigma.data
    xhat = (x.data - _expand_channels(mu.data)) * _expand_channels(inv)
    return _emit("normalize_channels", (x, mu, sigma), xhat, {"xhat": xhat, "inv": inv})


@_rule("normalize_channels")
def _normalize_channels_bw(g, ctx, inputs):
    inv = ctx["inv"]
    dx = g * _expand_channels(inv)
    dmu = -g.sum(axis=(-3, -2)) * inv
    dsigma = -(g * ctx["xhat"]).sum(axis=(-3, -2)) * inv
    return dx, dmu, dsigma


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """y = γ_k · x(…, k) + β_k，γ、β 的形状为 (c,)，所有样本共享。"""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"channel_affine: γ/β 形状应为 {(c,)}")
    return _emit("channel_affine", (x, gamma, beta), x.data * gamma.data + beta.data)


@_rule("channel_affine")
def _channel_affine_bw(g, ctx, inputs):
    x, gamma, _ = inputs
    axes = tuple(range(g.ndim - 1))
    return g * gamma.data, (g * x.data).sum(axis=axes), g.sum(axis=axes)


def scale_channels(x: Tensor, a: Tensor) -> Tensor:
    """y(…, k) = a_k · x(…, k)。a 为 (c,)（单样本）或 (n, c)（批次）。"""
    _check_spatial(x, "scale_channels")
    want = x.shape[:-3] + (x.shape[-1],)
    if a.shape != want:
        raise DimensionError(f"scale_channels: 门控形状 {a.shape} 应为 {want}")
    return _emit("scale_channels", (x, a), x.data * _expand_channels(a.data))


@_rule("scale_channels")
def _scale_channels_bw(g, ctx, inputs):
    x, a = inputs
    return g * _expand_channels(a.data), (g * x.data).sum(axis=(-3, -2))


# --- 7. 形状与归约 ---
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"reshape: {x.shape} 无法变为 {shape}")
    return _emit("reshape", (x,), x.data.reshape(shape))


@_rule("reshape")
def _reshape_bw(g, ctx, inputs):
    return (g.reshape(inputs[0].shape),)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ContractError("stack: 至少需要一个张量")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise DimensionError("stack: 所有张量形状必须一致")
    return _emit("stack", tuple(tensors), np.stack([t.data for t in tensors]))


@_rule("stack")
def _stack_bw(g, ctx, inputs):
    return [g[i] for i in range(len(inputs))]


def reduce_sum(x: Tensor) -> Tensor:
    return _emit("reduce_sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype))


@_rule("reduce_sum")
def _reduce_sum_bw(g, ctx, inputs):
    return (np.broadcast_to(g, inputs[0].shape),)


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """axis=None 得到标量；axis=-1 沿最后一维求平均。"""
    if axis is None:
        return _emit("reduce_mean", (x,), np.asarray(x.data.mean(), dtype=x.dtype), {"axis": None})
    if axis not in (-1, x.data.ndim - 1):
        raise ContractError("reduce_mean 只支持全部归约或沿最后一维归约")
    return _emit("reduce_mean", (x,), x.data.mean(axis=-1), {"axis": -1})


@_rule("reduce_mean")
def _reduce_mean_bw(g, ctx, inputs):
    shape = inputs[0].shape
    if ctx["axis"] is None:
        return (np.broadcast_to(g / inputs[0].data.size, shape),)
    return (np.broadcast_to(g[..., None] / shape[-1], shape),)


# --- 8. 梯度检查 ---
@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: Tuple[int, ...]
    analytic: np.ndarray
    numeric: np.ndarray


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        with Tape():
            f_plus = f(Tensor(x.copy())).item()
        x[idx] = orig - step
        with Tape():
            f_minus = f(Tensor(x.copy())).item()
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape():
        loss = f(leaf)
        backward(loss)
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)


def grad_check_detailed(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> GradCheckResult:
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    g_ad = analytic_gradient(f, data)
    g_fd = numerical_gradient(f, data, step)
    rel = np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    return GradCheckResult(float(rel.max()) if rel.size else 0.0, tuple(int(i) for i in worst), g_ad, g_fd)


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """中心差分对比，返回最大相对误差 |g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)。"""
    return grad_check_detailed(f, x, step).max_rel_error
