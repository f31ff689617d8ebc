"""
模块名称: SNRT0001 二进制张量格式 (snrt_io.py)

功能描述:
    数据集文件与检查点文件共用的扁平二进制格式：
        8 字节魔数 "SNRT0001" | u32 rank | u32 dims[rank] | 小端 f32 数据
    一个文件里可以顺序拼接多条记录（检查点就是这样保存的）。
"""
import hashlib
import struct
from pathlib import Path
from typing import Iterable, List, Tuple

import numpy as np

from snr_core.errors import CorruptionError, FormatError

MAGIC = b"SNRT0001"
_U32 = struct.Struct("<I")


def encode_tensor(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    header = MAGIC + _U32.pack(arr.ndim) + b"".join(_U32.pack(d) for d in arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """从 offset 处解码一条记录，返回 (数组, 下一条记录的起始位置)。"""
    if buffer[offset:offset + 8] != MAGIC:
        if len(buffer) - offset < 8:
            raise CorruptionError("文件被截断：魔数不完整")
        raise FormatError("不是 SNRT0001 格式（魔数不匹配）")
    pos = offset + 8
    if len(buffer) < pos + 4:
        raise CorruptionError("文件被截断：缺少 rank")
    (rank,) = _U32.unpack_from(buffer, pos)
    pos += 4
    if len(buffer) < pos + 4 * rank:
        raise CorruptionError("文件被截断：维度信息不完整")
    dims = tuple(_U32.unpack_from(buffer, pos + 4 * i)[0] for i in range(rank))
    pos += 4 * rank
    nbytes = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buffer) < pos + nbytes:
        raise CorruptionError(f"文件被截断：数据需要 {nbytes} 字节，只剩 {len(buffer) - pos} 字节")
    arr = np.frombuffer(buffer, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
    return arr.astype(np.float32), pos + nbytes


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    buffer = Path(path).read_bytes()
    arr, end = decode_tensor(buffer)
    if end != len(buffer):
        raise FormatError(f"{path} 末尾存在多余数据")
    return arr


def save_tensors(path, arrays: Iterable) -> List[int]:
    """把多条记录顺序拼接写入同一个文件，返回每条记录的起始偏移。"""
    offsets, chunks, pos = [], [], 0
    for arr in arrays:
        chunk = encode_tensor(arr)
        offsets.append(pos)
        chunks.append(chunk)
        pos += len(chunk)
    Path(path).write_bytes(b"".join(chunks))
    return offsets


def load_tensors(path) -> List[np.ndarray]:
    buffer = Path(path).read_bytes()
    arrays, pos = [], 0
    while pos < len(buffer):
        arr, pos = decode_tensor(buffer, pos)
        arrays.append(arr)
    return arrays


def sha256_files(paths: Iterable) -> str:
    """按给定顺序拼接文件内容后的 SHA-256，可以用 `cat a b c | sha256sum` 复核。"""
    digest = hashlib.sha256()
    for p in paths:
        digest.update(Path(p).read_bytes())
    return digest.hexdigest()
