import json
from pathlib import Path
from typing import Optional

import pandas as pd

from snr_core.errors import ContractError

REPORT_NAME = "report.json"


class RunStore:
    """
    用目录 + JSON/CSV 文件保存每一次运行的产物。

    一个 RunStore 对应一个输出根目录：`run_dir` 负责按名字准备子目录，
    `save_report` 写出 report.json，`save_table` 把 pandas 表格写成 CSV。
    """

    def __init__(self, root_dir: str):
        """
        初始化输出根目录。

        :param root_dir: 保存所有运行结果的根目录路径。
        """
        self.root = Path(root_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def run_dir(self, *parts: str) -> Path:
        """按层级名字返回（并创建）一个运行目录，例如 run_dir("lodo", "snr", "D-id", "seed_0")。"""
        target = self.root.joinpath(*(self.normalize_run_id(p) for p in parts))
        target.mkdir(parents=True, exist_ok=True)
        return target

    def save_report(self, run_dir, report: dict) -> Path:
        """`ensure_ascii=False` 保留中文，`sort_keys` 让同样的报告得到逐字节相同的文件。"""
        target = Path(run_dir) / REPORT_NAME
        with target.open("w", encoding="utf-8") as handle:
            json.dump(report, handle, ensure_ascii=False, indent=2, sort_keys=True)
        return target

    def save_table(self, run_dir, name: str, frame: pd.DataFrame) -> Path:
        target = Path(run_dir) / name
        frame.to_csv(target, index=False)
        return target

    # --- 以下是内部辅助方法 ---

    @staticmethod
    def normalize_run_id(run_id: Optional[str]) -> str:
        """
        清洗目录名，保证生成合法的文件名。

        去掉两端空白，只保留字母、数字、连字符、下划线和点；如果为空则使用 default。
        """
        raw = (run_id or "").strip()
        safe_id = "".join(ch for ch in raw if ch.isalnum() or ch in ("-", "_", "."))
        return safe_id.strip(".") or "default"


def prepare_output_dir(path, force: bool = False) -> Path:
    """输出目录已存在且非空时，没有 --force 就拒绝写入。"""
    target = Path(path)
    if target.exists() and any(target.iterdir()) and not force:
        raise ContractError(f"输出目录 '{target}' 已存在且非空；如需覆盖请加 --force")
    target.mkdir(parents=True, exist_ok=True)
    return target
