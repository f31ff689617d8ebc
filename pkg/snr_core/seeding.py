"""
模块名称: 随机数子流 (seeding.py)

功能描述:
    所有随机性都来自一个根种子，再按名字展开成互不干扰的子流（data / init / shuffle ...）。
    使用 numpy 的 PCG64 位生成器，算法身份写入数据集 manifest 与 report.json。
"""
import zlib

import numpy as np

PRNG_NAME = "numpy.PCG64"


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def named_stream(root_seed: int, name: str) -> np.random.Generator:
    """根种子 + 子流名 → 独立的 Generator。同样的 (root_seed, name) 永远得到同样的序列。"""
    seq = np.random.SeedSequence(int(root_seed), spawn_key=(stream_key(name),))
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(*keys: int) -> int:
    """把若干整数键（如 种子、图像序号）折叠成一个 63 位整数种子。"""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))
