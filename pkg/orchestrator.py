import json
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from data_process.styleshapes import PRESET_DOMAINS, StyleSpec, generate_domain, load_dataset, save_dataset
from run_store import RunStore, prepare_output_dir
from snr_core.errors import ConfigError, GradCheckFailure
from snr_core.seeding import derive_seed
from train_process.grad_suite import run_grad_suite
from train_process.inspect_dump import dump_activations
from train_process.model import load_checkpoint
from train_process.run_config import ExperimentConfig, save_config
from train_process.trainer import ablate, evaluate, leave_one_domain_out, load_domains, run_seeds


class Orchestrator:
    """
    调度层 (Orchestrator)
    - 接收来自命令行的请求，组织数据生成、训练、评估、梯度检查、导出与消融。
    - 负责把结果写到输出目录并在终端打印摘要。
    - 不处理异常：所有 SnrError 都交给入口脚本统一转换成退出码。
    """

    def __init__(self, verbose: bool = True):
        self.verbose = verbose

    def _say(self, message: str):
        if self.verbose:
            print(message)

    # --- 数据 ---
    def generate_data(self, spec: str, out, seed: int, n: int, num_classes: int, force: bool = False) -> List[dict]:
        """按预设或 JSON 风格文件生成各个域，每个域一个子目录（含 manifest.json）。"""
        domains = self._resolve_styles(spec)
        target = prepare_output_dir(out, force)
        self._say(f"🚀 开始生成 StyleShapes 数据集：{len(domains)} 个域，每域 {n} 张，K={num_classes}，seed={seed}")
        manifests = []
        for i, (name, style) in enumerate(domains.items()):
            self._say(f"⏳ 正在生成域 {name} ...")
            dataset = generate_domain(name, style, n, num_classes, derive_seed(seed, i), verbose=self.verbose)
            path = save_dataset(dataset, target / name)
            with (path / "manifest.json").open("r", encoding="utf-8") as handle:
                manifests.append(json.load(handle))
            self._say(f"✅ {name} → {path}")
        self._say(f"🎉 数据集已写入: {target}")
        return manifests

    @staticmethod
    def _resolve_styles(spec: str) -> dict:
        if spec == "presets":
            return dict(PRESET_DOMAINS)
        path = Path(spec)
        if not path.is_file():
            raise ConfigError(f"--spec 需要 'presets' 或一个 JSON 文件路径，找不到: '{path}'")
        try:
            with path.open("r", encoding="utf-8") as handle:
                raw = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigError(f"风格文件 '{path}' 不是合法的 JSON：{e}") from e
        raw = raw.get("domains", raw) if isinstance(raw, dict) else raw
        if not isinstance(raw, dict) or not raw:
            raise ConfigError(f"风格文件 '{path}' 应为 {{域名: 风格参数}} 的非空对象")
        return {name: StyleSpec.from_dict(style) for name, style in raw.items()}

    # --- 训练 ---
    def train(self, config: ExperimentConfig, lodo: bool = False) -> pd.DataFrame:
        config.validate()
        store = RunStore(config.run.output_dir)
        if lodo:
            names = list(config.data.domains)
        else:
            names = list(config.run.source_domains) + [config.run.target_domain]
        datasets = load_domains(config.data.root, names)
        self._say(f"🚀 开始训练: 变体 {config.model.variant}，协议 {config.run.protocol}，种子 {config.run.seeds}")
        save_config(config, store.root / "config.json")

        if lodo:
            report = leave_one_domain_out(config, datasets, store, verbose=self.verbose)
        else:
            report = run_seeds(config, datasets, store, verbose=self.verbose)
        summary = report.summary()
        name = "lodo" if lodo else "train"
        store.save_report(store.run_dir(config.model.variant), {**report.to_dict(), "config": config.to_dict()})
        store.save_table(store.root, f"{name}_{config.model.variant}_runs.csv", report.rows)
        self._say(summary.to_string(index=False))
        self._say(f"🎉 训练完成，平均目标域准确率 {report.mean_accuracy():.4f}，结果在: {store.root}")
        return summary

    def ablate(self, config: ExperimentConfig, mode: str = "variants") -> pd.DataFrame:
        config.validate()
        store = RunStore(config.run.output_dir)
        datasets = load_domains(config.data.root, config.data.domains)
        self._say(f"🚀 开始消融实验 ({mode})，域 {config.data.domains}，种子 {config.run.seeds}")
        report, table = ablate(config, datasets, mode=mode, store=store, verbose=self.verbose)
        store.save_table(store.root, f"ablation_{mode}.csv", table)
        store.save_table(store.root, f"ablation_{mode}_runs.csv", report.rows)
        with (store.root / f"ablation_{mode}.json").open("w", encoding="utf-8") as handle:
            json.dump({**report.to_dict(), "config": config.to_dict()}, handle, ensure_ascii=False, indent=2)
        self._say(table.to_string(index=False))
        self._say(f"🎉 消融对比表已写入: {store.root / f'ablation_{mode}.csv'}")
        return table

    # --- 评估 / 导出 ---
    def evaluate(self, checkpoint, dataset_dir, workers: int = 0, precision: str = "float32",
                 out: Optional[str] = None) -> dict:
        model = load_checkpoint(checkpoint, precision=precision)
        dataset = load_dataset(dataset_dir)
        result = evaluate(model, dataset, workers=workers)
        summary = {
            "checkpoint": str(checkpoint),
            "dataset": str(dataset_dir),
            "accuracy": result.accuracy,
            "correct": result.correct,
            "total": result.total,
            "entropies": result.entropies,
        }
        self._say(f"✅ 准确率 {result.accuracy:.4f} ({result.correct}/{result.total})")
        for row in result.entropies:
            self._say(f"   模块 {row['module']}（阶段 {row['stage']}）: H⁺={row['h_plus']:.4f}  "
                      f"H={row['h_norm']:.4f}  H⁻={row['h_minus']:.4f}")
        if out:
            target = Path(out)
            target.parent.mkdir(parents=True, exist_ok=True)
            with target.open("w", encoding="utf-8") as handle:
                json.dump(summary, handle, ensure_ascii=False, indent=2)
            self._say(f"📁 评估结果已写入: {target}")
        return summary

    def inspect(self, checkpoint, dataset_dir, dump_dir, images: Optional[Sequence[int]] = None,
                limit: int = 16) -> dict:
        return dump_activations(checkpoint, dataset_dir, dump_dir, indices=images, limit=limit,
                                verbose=self.verbose)

    # --- 梯度检查 ---
    def grad_check(self, scope: str, seeds: int) -> pd.DataFrame:
        self._say(f"⏳ 梯度检查: 范围 {scope}，{seeds} 个种子")
        try:
            frame = run_grad_suite(scope, seeds, verbose=self.verbose)
        except GradCheckFailure as e:
            for record in e.failures:
                print(f"❌ {record.op} seed={record.seed} 坐标={record.worst_index} "
                      f"相对误差={record.max_rel_error:.3e}")
            raise
        worst = frame.groupby("op", sort=False)["max_rel_error"].max().reset_index()
        self._say(worst.to_string(index=False))
        self._say(f"✅ 全部 {len(frame)} 项检查通过，最大相对误差 {frame['max_rel_error'].max():.3e}")
        return frame
