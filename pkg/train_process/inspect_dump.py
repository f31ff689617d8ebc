"""
模块名称: 激活图与嵌入导出 (inspect_dump.py)

功能描述:
    读取一个检查点和一个数据集，对选中的每张图导出：
        - 每个 SNR 模块处 F̃ / F̃⁺ / F̃⁻ 的激活图：沿通道求和后做空间 ℓ2 归一化，
          存为 `maps/img_<序号>_stage<阶段>.snrt`，形状 (3, h, w)，顺序为 F̃、F̃⁺、F̃⁻；
        - 倒数第二层（全局池化后）的嵌入向量，写入 `embeddings.csv`，供外部降维工具使用；
        - `inspect.json` 记录导出的文件清单。

使用方法:
    python snr_assistant.py inspect --checkpoint runs/.../checkpoint --dataset data/styleshapes/D-noisy --dump dumps/
"""
import json
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from data_process.styleshapes import load_dataset
from snr_core.errors import CheckpointMismatchError, ContractError
from snr_core.snrt_io import save_tensor
from snr_core.tensor_core import Tensor
from train_process.model import load_checkpoint

MAP_ORDER = ("f_norm", "f_plus", "f_minus")
INSPECT_BATCH = 64


def activation_map(feature: np.ndarray) -> np.ndarray:
    """(h, w, c) → (h, w)：通道求和后除以空间 ℓ2 范数；全零图保持为零。"""
    summed = feature.sum(axis=-1).astype(np.float64)
    norm = np.sqrt((summed * summed).sum())
    return summed / norm if norm > 0 else summed


def dump_activations(checkpoint_dir, dataset_dir, dump_dir, indices: Optional[Sequence[int]] = None,
                     limit: int = 16, verbose: bool = True) -> dict:
    model = load_checkpoint(checkpoint_dir, precision="float64")
    dataset = load_dataset(dataset_dir)
    if dataset.images.shape[-1] != model.spec.in_channels:
        raise CheckpointMismatchError(f"数据集图像有 {dataset.images.shape[-1]} 个通道，"
                                      f"检查点模型需要 {model.spec.in_channels} 个")

    if indices is None:
        indices = list(range(min(limit, len(dataset))))
    indices = [int(i) for i in indices]
    bad = [i for i in indices if not 0 <= i < len(dataset)]
    if bad:
        raise ContractError(f"图像序号 {bad} 超出数据集范围 [0, {len(dataset)})")

    target = Path(dump_dir)
    (target / "maps").mkdir(parents=True, exist_ok=True)
    if verbose and not model.snr_modules():
        print("⚠️ 警告：该检查点没有 SNR 模块，只导出嵌入向量。")

    map_files: List[str] = []
    embedding_rows = []
    for lo in range(0, len(indices), INSPECT_BATCH):
        chunk = indices[lo:lo + INSPECT_BATCH]
        res = model.forward(Tensor(dataset.images[chunk], dtype=model.dtype), with_contaminated=True)
        for j, idx in enumerate(chunk):
            for stage, out in res.snr_outputs:
                maps = np.stack([activation_map(getattr(out, name).data[j]) for name in MAP_ORDER])
                name = f"maps/img_{idx:05d}_stage{stage}.snrt"
                save_tensor(target / name, maps)
                map_files.append(name)
            embedding = res.embedding.data[j]
            row = {"image": idx, "label": int(dataset.labels[idx]), "domain": dataset.name}
            row.update({f"e{k}": float(v) for k, v in enumerate(embedding)})
            embedding_rows.append(row)

    pd.DataFrame(embedding_rows).to_csv(target / "embeddings.csv", index=False)
    summary = {
        "checkpoint": str(checkpoint_dir),
        "dataset": str(dataset_dir),
        "images": indices,
        "map_order": list(MAP_ORDER),
        "snr_module_stages": [s for s, _ in model.snr_modules()],
        "maps": map_files,
        "embeddings": "embeddings.csv",
    }
    with (target / "inspect.json").open("w", encoding="utf-8") as handle:
        json.dump(summary, handle, ensure_ascii=False, indent=2)
    if verbose:
        print(f"✅ 已导出 {len(indices)} 张图的激活图与嵌入向量到: {target}")
    return summary
