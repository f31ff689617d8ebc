"""
脚本名称: StyleShapes 多风格域合成数据集 (styleshapes.py)

功能描述:
    程序化生成一个小型多域图像数据集：所有域共享同样的"内容"（四类几何形状），
    每个域有自己的"风格"（亮度、对比度、颜色混合、gamma、噪声）。
    这是桌面规模下对多域泛化基准的模拟。

    - `render_shape`: 在 32×32 画布上以随机位置/尺度/旋转栅格化一个形状，返回图像和掩码。
    - `apply_style`:  按固定顺序施加风格变换 clamp(((mix·rgb)^gamma)·contrast + brightness + 噪声)。
    - `generate_domain`: 生成一个域；标签均衡，内容种子与风格噪声种子相互独立。
    - `save_dataset` / `load_dataset`: 目录格式 manifest.json + images/labels/masks.snrt，读取时校验 SHA-256。

使用方法:
    通常通过入口脚本调用：
        python snr_assistant.py gen-data --spec presets --out data/styleshapes --seed 0
"""
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from snr_core.errors import ContractError, CorruptionError, DatasetMissingError, FormatError
from snr_core.seeding import PRNG_NAME, derive_seed, generator, stream_key
from snr_core.snrt_io import load_tensor, save_tensor, sha256_files

IMAGE_SIZE = 32
SHAPE_CLASSES = ("circle", "square", "triangle", "cross")
DATA_FILES = ("images.snrt", "labels.snrt", "masks.snrt")
MANIFEST_NAME = "manifest.json"


# --- 1. 风格描述 ---
@dataclass
class StyleSpec:
    """
    取值范围（预设均在范围内）：
        brightness_shift ∈ [−0.3, 0.3]，contrast_scale ∈ [0.4, 1.6]，
        gamma ∈ [0.5, 2.0]，noise_std ∈ [0, 0.15]；channel_mix 为 3×3 近似行随机矩阵。
    """
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    channel_mix: List[List[float]] = field(default_factory=lambda: np.eye(3).tolist())
    gamma: float = 1.0
    noise_std: float = 0.0

    @classmethod
    def from_dict(cls, raw: dict) -> "StyleSpec":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"StyleSpec 中存在未知字段: {sorted(unknown)}")
        spec = cls(**raw)
        if np.asarray(spec.channel_mix).shape != (3, 3):
            raise ContractError("channel_mix 必须是 3×3 矩阵")
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


PRESET_DOMAINS: Dict[str, StyleSpec] = {
    "D-id": StyleSpec(),
    "D-dim": StyleSpec(brightness_shift=-0.2, contrast_scale=0.5),
    "D-hue": StyleSpec(channel_mix=[[0.15, 0.75, 0.10], [0.10, 0.15, 0.75], [0.75, 0.10, 0.15]], gamma=1.4),
    "D-noisy": StyleSpec(noise_std=0.12, gamma=0.7),
}


@dataclass
class DomainDataset:
    name: str
    spec: StyleSpec
    images: np.ndarray          # (n, 32, 32, 3) float32, 取值 [0, 1]
    labels: np.ndarray          # (n,) int64
    masks: Optional[np.ndarray]  # (n, 32, 32) uint8
    seed: int
    num_classes: int
    prng: str = PRNG_NAME

    def __len__(self):
        return len(self.labels)


# --- 2. 形状栅格化 ---
def _class_index(class_id) -> int:
    if isinstance(class_id, str):
        if class_id not in SHAPE_CLASSES:
            raise ContractError(f"未知的形状类别: {class_id}")
        return SHAPE_CLASSES.index(class_id)
    idx = int(class_id)
    if not 0 <= idx < len(SHAPE_CLASSES):
        raise ContractError(f"形状类别编号 {idx} 超出范围 [0, {len(SHAPE_CLASSES)})")
    return idx


def _shape_mask(idx: int, u: np.ndarray, v: np.ndarray, radius: float) -> np.ndarray:
    if idx == 0:
        return u * u + v * v <= radius * radius
    if idx == 1:
        half = radius * 0.8
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if idx == 2:
        # 外接圆半径为 radius 的正三角形：到三条边的有向距离都不超过内切圆半径
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            ang = math.pi / 2 + 2 * math.pi * k / 3
            inside &= (u * math.cos(ang) + v * math.sin(ang)) <= radius / 2
        return inside
    arm = radius / 3
    return ((np.abs(u) <= radius) & (np.abs(v) <= arm)) | ((np.abs(v) <= radius) & (np.abs(u) <= arm))


def render_shape(class_id, jitter_seed: int, size: int = IMAGE_SIZE) -> Tuple[np.ndarray, np.ndarray]:
    """
    灰度形状画在彩色背景上。位置抖动 ±6 像素，尺度为画幅的 0.5–0.9，旋转 0–360°。
    返回 (图像 size×size×3 float64, 掩码 size×size uint8)。
    """
    idx = _class_index(class_id)
    rng = generator(jitter_seed)
    cx = size / 2 + rng.uniform(-6, 6)
    cy = size / 2 + rng.uniform(-6, 6)
    radius = rng.uniform(0.5, 0.9) * size / 2
    theta = rng.uniform(0, 2 * math.pi)
    background = rng.uniform(0.05, 0.45, size=3)
    intensity = rng.uniform(0.6, 0.95)

    ys, xs = np.mgrid[0:size, 0:size]
    dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
    u = math.cos(theta) * dx + math.sin(theta) * dy
    v = -math.sin(theta) * dx + math.cos(theta) * dy
    mask = _shape_mask(idx, u, v, radius)

    image = np.broadcast_to(background, (size, size, 3)).copy()
    image[mask] = intensity
    return image, mask.astype(np.uint8)


# --- 3. 风格变换 ---
def apply_style(image: np.ndarray, spec: StyleSpec, noise_seed: int) -> np.ndarray:
    mix = np.asarray(spec.channel_mix, dtype=np.float64)
    mixed = np.clip(image @ mix.T, 0.0, None)
    out = np.power(mixed, spec.gamma) * spec.contrast_scale + spec.brightness_shift
    noise = generator(noise_seed).normal(0.0, 1.0, size=image.shape) * spec.noise_std
    return np.clip(out + noise, 0.0, 1.0)


def _render_one(args):
    label, content_seed, style_seed, spec = args
    image, mask = render_shape(label, content_seed)
    return apply_style(image, spec, style_seed), mask


def _worker_count() -> int:
    return max(1, int(os.getenv("SNR_NUM_THREADS", "1")))


def generate_domain(name: str, spec: StyleSpec, n: int, num_classes: int, seed: int,
                    verbose: bool = True) -> DomainDataset:
    """
    第 i 张图的内容种子只由 (seed, i) 决定，与域无关；风格噪声种子额外混入域名。
    因此同一 seed 下不同域的第 i 张图只在风格上不同。
    """
    if not 1 <= num_classes <= len(SHAPE_CLASSES):
        raise ContractError(f"类别数 K 必须在 1..{len(SHAPE_CLASSES)} 之间，收到 {num_classes}")
    if n % num_classes and verbose:
        print(f"⚠️ 警告：样本数 {n} 不是类别数 {num_classes} 的整数倍，各类数量会相差 1。")

    labels = generator(derive_seed(seed, stream_key("labels"))).permutation(np.arange(n) % num_classes)
    style_key = stream_key(f"style:{name}")
    jobs = [(int(labels[i]), derive_seed(seed, i), derive_seed(seed, i, style_key), spec) for i in range(n)]
    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        rendered = list(pool.map(_render_one, jobs))

    images = np.stack([img for img, _ in rendered]).astype(np.float32) if rendered else \
        np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    masks = np.stack([m for _, m in rendered]) if rendered else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), np.uint8)
    return DomainDataset(name, spec, images, labels.astype(np.int64), masks, seed, num_classes)


# --- 4. 保存与读取 ---
def save_dataset(dataset: DomainDataset, path) -> Path:
    target = Path(path)
    target.mkdir(parents=True, exist_ok=True)
    save_tensor(target / "images.snrt", dataset.images)
    save_tensor(target / "labels.snrt", dataset.labels.astype(np.float32))
    masks = dataset.masks if dataset.masks is not None else np.zeros(dataset.images.shape[:3], np.uint8)
    save_tensor(target / "masks.snrt", masks.astype(np.float32))
    manifest = {
        "name": dataset.name,
        "spec": dataset.spec.to_dict(),
        "seed": dataset.seed,
        "n": len(dataset),
        "K": dataset.num_classes,
        "prng": dataset.prng,
        "image_size": IMAGE_SIZE,
        "files": list(DATA_FILES),
        "checksum": sha256_files(target / f for f in DATA_FILES),
    }
    with (target / MANIFEST_NAME).open("w", encoding="utf-8") as handle:
        json.dump(manifest, handle, ensure_ascii=False, indent=2)
    return target


def read_manifest(path) -> dict:
    target = Path(path)
    if not target.is_dir():
        raise DatasetMissingError(f"找不到数据集目录: '{target}'（请先运行 gen-data 生成数据）")
    manifest_path = target / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FormatError(f"数据集目录 '{target}' 中缺少 {MANIFEST_NAME}")
    try:
        with manifest_path.open("r", encoding="utf-8") as handle:
            return json.load(handle)
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path} 不是合法的 JSON：{e}") from e


def load_dataset(path) -> DomainDataset:
    target = Path(path)
    manifest = read_manifest(target)
    for f in DATA_FILES:
        if not (target / f).is_file():
            raise FormatError(f"数据集目录 '{target}' 中缺少 {f}")
    actual = sha256_files(target / f for f in DATA_FILES)
    if actual != manifest.get("checksum"):
        raise CorruptionError(f"数据集 '{target}' 校验和不一致：manifest 为 {manifest.get('checksum')}，实际为 {actual}")

    images = load_tensor(target / "images.snrt")
    labels = load_tensor(target / "labels.snrt").astype(np.int64)
    masks = load_tensor(target / "masks.snrt").astype(np.uint8)
    if images.shape[0] != manifest["n"] or labels.shape != (manifest["n"],):
        raise FormatError(f"数据集 '{target}' 的样本数与 manifest 不一致")
    return DomainDataset(
        name=manifest["name"],
        spec=StyleSpec.from_dict(manifest["spec"]),
        images=images,
        labels=labels,
        masks=masks,
        seed=manifest["seed"],
        num_classes=manifest["K"],
        prng=manifest.get("prng", PRNG_NAME),
    )
