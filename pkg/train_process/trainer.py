"""
模块名称: 训练、评估与实验协议 (trainer.py)

功能描述:
    - `train`:    单个种子的一次训练。源域批次按域均分，损失为
                  交叉熵(源域) + λ·L_SNR(源域)；UDA 模式再对无标签的目标域批次加 λ·L_SNR。
                  每个 epoch 保存检查点，写出 curves.csv / loss_trace.csv / plot_data.csv / report.json。
    - `evaluate`: top-1 准确率（argmax 并列时取最小类别号）+ 每个 SNR 模块的平均熵
                  H(φ(f̃⁺)) / H(φ(f̃)) / H(φ(f̃⁻))。可按 worker 分片，整数计数求和。
    - `run_seeds` / `leave_one_domain_out` / `ablate`: 多种子、留一域、消融实验，
                  结果汇总为 `MetricsReport`（pandas 表格）。

配置:
    - 所有超参数来自 `ExperimentConfig`（见 run_config.py）。
    - 随机性来自 seed 的命名子流: init（参数初始化）、shuffle（源域洗牌）、target_shuffle（UDA 目标域洗牌）。
"""
import copy
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from data_process.styleshapes import DomainDataset, load_dataset
from run_store import RunStore
from snr_core.errors import ConfigError, DatasetMissingError, NumericalError
from snr_core.restitution_loss import (LossBundle, LossTraceWriter, aggregate_snr_loss, classification_dual_loss,
                                       combine_bundles, pooled_entropy)
from snr_core.seeding import PRNG_NAME, named_stream, stream_key
from snr_core.tensor_core import Tape, Tensor, backward, cross_entropy
from train_process.model import SnrNetwork, build_model, save_checkpoint
from train_process.optimizer import SGDMomentum, cosine_lr
from train_process.run_config import LOSS_TERMS, VARIANTS, ExperimentConfig

SUB_STREAMS = ("init", "shuffle", "target_shuffle")
CURVE_COLUMNS = ["epoch", "lr", "task_loss", "snr_loss", "total", "train_acc"]
ROW_COLUMNS = ["setting", "variant", "protocol", "loss_terms", "placement", "target", "seed",
               "target_accuracy", "source_accuracy", "train_accuracy", "h_plus", "h_norm", "h_minus",
               "param_count", "snr_param_overhead"]
EVAL_BATCH = 250


# --- 1. 数据准备 ---
def load_domains(root, names: Sequence[str]) -> Dict[str, DomainDataset]:
    """从 `<root>/<域名>/` 读取各个域；缺失时报出具体路径。"""
    base = Path(root)
    datasets = {}
    for name in names:
        path = base / name
        if not path.is_dir():
            raise DatasetMissingError(f"找不到域 '{name}' 的数据集: '{path}'（请先运行 gen-data --out {base}）")
        datasets[name] = load_dataset(path)
    return datasets


def _slice(dataset: DomainDataset, lo: int, hi: int) -> DomainDataset:
    masks = None if dataset.masks is None else dataset.masks[lo:hi]
    return replace(dataset, images=dataset.images[lo:hi], labels=dataset.labels[lo:hi], masks=masks)


def split_domain(dataset: DomainDataset, n_train: int, n_test: int) -> Tuple[DomainDataset, DomainDataset]:
    """前 n_train 张作训练，随后 n_test 张作测试。"""
    if len(dataset) < n_train + n_test:
        raise ConfigError(f"域 '{dataset.name}' 只有 {len(dataset)} 张图，"
                          f"不够 data.n_train + data.n_test = {n_train + n_test}")
    return _slice(dataset, 0, n_train), _slice(dataset, n_train, n_train + n_test)


def concat_domains(datasets: Sequence[DomainDataset], name: str) -> DomainDataset:
    first = datasets[0]
    masks = None
    if all(d.masks is not None for d in datasets):
        masks = np.concatenate([d.masks for d in datasets])
    return replace(first, name=name,
                   images=np.concatenate([d.images for d in datasets]),
                   labels=np.concatenate([d.labels for d in datasets]),
                   masks=masks)


class BalancedSampler:
    """每一步从每个源域各取 per_domain 张拼成一个批次；每个 epoch 各域重新洗牌。"""

    def __init__(self, datasets: Sequence[DomainDataset], batch_size: int, rng: np.random.Generator):
        self.datasets = list(datasets)
        shortest = min(len(d) for d in self.datasets)
        if shortest == 0:
            raise ConfigError("训练集为空：请检查 data.n_train 与 run.train_subset")
        self.per_domain = max(1, min(batch_size // len(self.datasets), shortest))
        self.steps = shortest // self.per_domain
        self.rng = rng

    @property
    def batch_size(self) -> int:
        return self.per_domain * len(self.datasets)

    def epoch(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        perms = [self.rng.permutation(len(d)) for d in self.datasets]
        k = self.per_domain
        for s in range(self.steps):
            picks = [p[s * k:(s + 1) * k] for p in perms]
            images = np.concatenate([d.images[i] for d, i in zip(self.datasets, picks)])
            labels = np.concatenate([d.labels[i] for d, i in zip(self.datasets, picks)])
            yield images, labels


class CyclingSampler:
    """UDA 用：无标签目标域，取完一轮就重新洗牌，永远有下一个批次。"""

    def __init__(self, dataset: DomainDataset, batch_size: int, rng: np.random.Generator):
        if len(dataset) == 0:
            raise ConfigError(f"目标域 '{dataset.name}' 的训练部分为空，无法用于 UDA")
        self.dataset = dataset
        self.batch_size = min(batch_size, len(dataset))
        self.rng = rng
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(len(self.dataset))
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.dataset.images[idx]


# --- 2. 评估 ---
@dataclass
class EvalResult:
    accuracy: float
    correct: int
    total: int
    # 每个 SNR 模块一条: {"module", "stage", "h_plus", "h_norm", "h_minus"}
    entropies: List[dict] = field(default_factory=list)


def _eval_shard(model, dataset: DomainDataset, indices: np.ndarray, batch_size: int):
    dtype = getattr(model, "dtype", np.float64)
    modules = dict(model.snr_modules()) if hasattr(model, "snr_modules") else {}
    correct = 0
    per_module: Dict[int, List[List[np.ndarray]]] = {}
    for lo in range(0, len(indices), batch_size):
        idx = indices[lo:lo + batch_size]
        res = model.forward(Tensor(dataset.images[idx], dtype=dtype), with_contaminated=True)
        predictions = np.argmax(res.logits.data, axis=-1)
        correct += int(np.sum(predictions == dataset.labels[idx]))
        for stage, out in res.snr_outputs:
            phi = modules[stage]
            triple = per_module.setdefault(stage, [[], [], []])
            for slot, f in enumerate((out.f_plus, out.f_norm, out.f_minus)):
                triple[slot].append(pooled_entropy(f, phi).data)
    return correct, per_module


def evaluate(model, dataset: DomainDataset, workers: int = 0, batch_size: int = EVAL_BATCH) -> EvalResult:
    indices = np.arange(len(dataset))
    shards = [s for s in np.array_split(indices, max(1, workers)) if len(s)] or [indices]
    if len(shards) > 1:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            parts = list(pool.map(lambda s: _eval_shard(model, dataset, s, batch_size), shards))
    else:
        parts = [_eval_shard(model, dataset, shards[0], batch_size)]

    correct = sum(c for c, _ in parts)
    total = len(dataset)
    entropies = []
    stages = sorted({stage for _, per_module in parts for stage in per_module})
    for k, stage in enumerate(stages):
        values = []
        for slot in range(3):
            chunks = [chunk for _, per_module in parts for chunk in per_module.get(stage, [[], [], []])[slot]]
            values.append(float(np.concatenate(chunks).astype(np.float64).mean()))
        entropies.append({"module": k, "stage": stage, "h_plus": values[0], "h_norm": values[1], "h_minus": values[2]})
    return EvalResult(correct / total if total else 0.0, correct, total, entropies)


# --- 3. 单次训练 ---
@dataclass
class TrainResult:
    model: SnrNetwork
    curves: pd.DataFrame
    report: dict
    run_dir: Optional[Path] = None


def module_losses(model: SnrNetwork, res, terms: str) -> List[LossBundle]:
    phis = dict(model.snr_modules())
    return [classification_dual_loss(out.f_norm, out.f_plus, out.f_minus, phis[stage], terms, module_index=k)
            for k, (stage, out) in enumerate(res.snr_outputs)]


def _trace_bundle(bundles: Sequence[LossBundle], num_modules: int) -> Optional[LossBundle]:
    """源域与目标域的同一模块损失相加，按模块序号排好，供 LossTraceWriter 使用。"""
    combined = combine_bundles(bundles)
    if combined is None:
        return None
    sums = [[0.0, 0.0] for _ in range(num_modules)]
    for idx, lp, lm in combined.per_module:
        sums[idx][0] += lp
        sums[idx][1] += lm
    combined.per_module = [(i, lp, lm) for i, (lp, lm) in enumerate(sums)]
    return combined


def _write_nan_dump(run_dir: Optional[Path], payload: dict) -> Optional[Path]:
    if run_dir is None:
        return None
    target = Path(run_dir) / "nan_dump.json"
    with target.open("w", encoding="utf-8") as handle:
        json.dump(payload, handle, ensure_ascii=False, indent=2)
    return target


def _check_finite(total, task, bundles, res, step: int, epoch: int, lr: float, run_dir):
    if np.isfinite(total.data).all():
        return
    payload = {
        "step": step,
        "epoch": epoch,
        "lr": lr,
        "task_loss": float(task.data),
        "total": float(total.data),
        "module_losses": [row for b in bundles for row in b.per_module],
        "stage_stats": res.stage_stats,
    }
    dumped = _write_nan_dump(run_dir, payload)
    where = f"，诊断信息已写入 {dumped}" if dumped else ""
    raise NumericalError(f"第 {step} 步（epoch {epoch}）损失出现 NaN/Inf{where}")


def train(config: ExperimentConfig, datasets: Dict[str, DomainDataset], seed: int,
          run_dir=None, verbose: bool = True) -> TrainResult:
    config.validate()
    run, spec = config.run, config.model
    needed = list(run.source_domains) + [run.target_domain]
    missing = [name for name in needed if name not in datasets]
    if missing:
        raise DatasetMissingError(f"缺少域 {missing} 的数据集")
    started = time.perf_counter()
    run_dir = Path(run_dir) if run_dir is not None else None

    splits = {name: split_domain(datasets[name], config.data.n_train, config.data.n_test) for name in needed}
    sources = [splits[name][0] for name in run.source_domains]
    if run.train_subset > 0:
        sources = [_slice(d, 0, run.train_subset) for d in sources]

    model = build_model(spec, seed=seed, precision=run.precision)
    num_modules = len(model.snr_modules())
    use_dual = spec.variant == "snr" and run.snr_weight > 0 and num_modules > 0
    optimizer = SGDMomentum(model.parameters(), momentum=run.momentum)
    sampler = BalancedSampler(sources, run.batch_size, named_stream(seed, "shuffle"))
    target_sampler = None
    if run.protocol == "uda":
        if use_dual:
            target_sampler = CyclingSampler(splits[run.target_domain][0], sampler.batch_size,
                                            named_stream(seed, "target_shuffle"))
        elif verbose:
            print(f"⚠️ 警告：变体 {spec.variant}（λ={run.snr_weight}）没有 SNR 损失，UDA 模式不会使用目标域数据。")

    trace = LossTraceWriter(run_dir / "loss_trace.csv", num_modules) if run_dir else None
    curves = []
    step = 0
    epochs = tqdm(range(run.epochs), desc=f"{spec.variant}/{run.target_domain}/seed{seed}", disable=not verbose)
    for epoch in epochs:
        lr = cosine_lr(epoch, run.epochs, run.lr, run.lr_min)
        sums = {"task_loss": 0.0, "snr_loss": 0.0, "total": 0.0}
        correct = seen = batches = 0
        for images, labels in sampler.epoch():
            with Tape():
                res = model.forward(Tensor(images, dtype=model.dtype), with_contaminated=use_dual)
                task = cross_entropy(res.logits, labels)
                bundles = module_losses(model, res, run.loss_terms) if use_dual else []
                if target_sampler is not None:
                    t_res = model.forward(Tensor(target_sampler.next(), dtype=model.dtype))
                    bundles += module_losses(model, t_res, run.loss_terms)
                total = aggregate_snr_loss(task, bundles, run.snr_weight)
                _check_finite(total, task, bundles, res, step, epoch, lr, run_dir)
                backward(total)
            optimizer.step(lr)
            optimizer.zero_grad()

            snr_value = float(sum(b.l_snr.item() for b in bundles))
            sums["task_loss"] += task.item()
            sums["snr_loss"] += snr_value
            sums["total"] += total.item()
            correct += int(np.sum(np.argmax(res.logits.data, axis=-1) == labels))
            seen += len(labels)
            batches += 1
            if trace is not None:
                trace.append(step, task.item(), _trace_bundle(bundles, num_modules), total.item())
            step += 1

        row = {"epoch": epoch, "lr": lr, **{k: v / batches for k, v in sums.items()}, "train_acc": correct / seen}
        curves.append(row)
        if verbose:
            epochs.set_postfix(loss=f"{row['total']:.4f}", acc=f"{row['train_acc']:.3f}")
        if run_dir is not None:
            trace.flush()
            if run.checkpoint_every_epoch:
                save_checkpoint(model, run_dir / "checkpoints" / f"epoch_{epoch + 1:03d}",
                                extra={"epoch": epoch + 1, "seed": seed, "precision": run.precision})

    curves_frame = pd.DataFrame(curves, columns=CURVE_COLUMNS)
    source_eval = evaluate(model, concat_domains([splits[n][1] for n in run.source_domains], "sources"),
                           workers=run.eval_workers)
    target_eval = evaluate(model, splits[run.target_domain][1], workers=run.eval_workers)

    last = curves[-1]
    metrics = {
        "variant": spec.variant,
        "protocol": run.protocol,
        "loss_terms": run.loss_terms,
        "snr_after_stage": list(spec.snr_after_stage),
        "sources": list(run.source_domains),
        "target": run.target_domain,
        "seed": seed,
        "train_accuracy": last["train_acc"],
        "source_accuracy": source_eval.accuracy,
        "target_accuracy": target_eval.accuracy,
        "target_correct": target_eval.correct,
        "target_total": target_eval.total,
        "entropy_source": source_eval.entropies,
        "entropy_target": target_eval.entropies,
        "final_losses": {k: last[k] for k in ("task_loss", "snr_loss", "total")},
        "param_count": model.param_count(),
        "snr_param_overhead": model.snr_param_overhead(),
        "steps": step,
    }
    report = {
        "config": config.to_dict(),
        "seed": seed,
        "prng": PRNG_NAME,
        "sub_streams": {name: {"root_seed": seed, "spawn_key": stream_key(name)} for name in SUB_STREAMS},
        "data_seeds": {name: int(datasets[name].seed) for name in needed},
        "metrics": metrics,
        "timing": {"wall_clock_s": time.perf_counter() - started},
    }
    if run_dir is not None:
        store = RunStore(run_dir)
        save_checkpoint(model, run_dir / "checkpoint",
                        extra={"epoch": run.epochs, "seed": seed, "precision": run.precision})
        store.save_table(run_dir, "curves.csv", curves_frame)
        store.save_table(run_dir, "plot_data.csv", plot_data(curves_frame, metrics))
        store.save_report(run_dir, report)
    return TrainResult(model, curves_frame, report, run_dir)


def plot_data(curves: pd.DataFrame, metrics: dict) -> pd.DataFrame:
    """长表格式 (epoch, series, value)，外部画图工具可以直接按 series 分组。"""
    frame = curves.melt(id_vars="epoch", var_name="series", value_name="value")
    final_epoch = int(curves["epoch"].max())
    extra = pd.DataFrame([{"epoch": final_epoch, "series": key, "value": metrics[key]}
                          for key in ("source_accuracy", "target_accuracy")])
    return pd.concat([frame, extra], ignore_index=True)


# --- 4. 多次运行汇总 ---
@dataclass
class MetricsReport:
    rows: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=ROW_COLUMNS))
    wall_clock_s: float = 0.0

    @classmethod
    def concat(cls, reports: Sequence["MetricsReport"]) -> "MetricsReport":
        frames = [r.rows for r in reports if not r.rows.empty]
        rows = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=ROW_COLUMNS)
        return cls(rows, sum(r.wall_clock_s for r in reports))

    def summary(self, by: str = "setting") -> pd.DataFrame:
        """每个 setting 一行、每个目标域一列的平均测试准确率，外加 mean 列。"""
        order = list(dict.fromkeys(self.rows[by]))
        targets = list(dict.fromkeys(self.rows["target"]))
        table = self.rows.pivot_table(index=by, columns="target", values="target_accuracy", aggfunc="mean")
        table = table.reindex(index=order, columns=targets)
        table["mean"] = table.mean(axis=1)
        table.columns.name = None
        return table.reset_index()

    def mean_accuracy(self, setting: Optional[str] = None) -> float:
        rows = self.rows if setting is None else self.rows[self.rows["setting"] == setting]
        return float(rows["target_accuracy"].mean())

    def to_dict(self) -> dict:
        clean = self.rows.astype(object).where(self.rows.notna(), None)
        return {
            "metrics": {
                "rows": clean.to_dict(orient="records"),
                "summary": self.summary().to_dict(orient="records") if not self.rows.empty else [],
            },
            "timing": {"wall_clock_s": self.wall_clock_s},
        }


def _report_row(metrics: dict, setting: str) -> dict:
    final = metrics["entropy_source"][-1] if metrics["entropy_source"] else {}
    placement = "".join("1" if flag else "0" for flag in metrics["snr_after_stage"])
    return {
        "setting": setting,
        "variant": metrics["variant"],
        "protocol": metrics["protocol"],
        "loss_terms": metrics["loss_terms"],
        "placement": placement,
        "target": metrics["target"],
        "seed": metrics["seed"],
        "target_accuracy": metrics["target_accuracy"],
        "source_accuracy": metrics["source_accuracy"],
        "train_accuracy": metrics["train_accuracy"],
        "h_plus": final.get("h_plus", np.nan),
        "h_norm": final.get("h_norm", np.nan),
        "h_minus": final.get("h_minus", np.nan),
        "param_count": metrics["param_count"],
        "snr_param_overhead": metrics["snr_param_overhead"],
    }


def run_seeds(config: ExperimentConfig, datasets: Dict[str, DomainDataset], store: Optional[RunStore] = None,
              setting: Optional[str] = None, verbose: bool = True) -> MetricsReport:
    """按 run.seeds 逐个种子训练同一个配置。"""
    setting = setting or config.model.variant
    rows, elapsed = [], 0.0
    for seed in config.run.seeds:
        run_dir = store.run_dir(setting, config.run.target_domain, f"seed_{seed}") if store else None
        result = train(config, datasets, seed, run_dir=run_dir, verbose=verbose)
        rows.append(_report_row(result.report["metrics"], setting))
        elapsed += result.report["timing"]["wall_clock_s"]
    return MetricsReport(pd.DataFrame(rows, columns=ROW_COLUMNS), elapsed)


def leave_one_domain_out(config: ExperimentConfig, datasets: Dict[str, DomainDataset],
                         store: Optional[RunStore] = None, setting: Optional[str] = None,
                         verbose: bool = True) -> MetricsReport:
    """每个域轮流作为目标域，其余域作为源域；2 个域时退化为一次训练/测试划分（两个方向各一次）。"""
    domains = list(config.data.domains)
    if len(domains) < 2:
        raise ConfigError(f"留一域协议至少需要 2 个域，data.domains 只有 {domains}")
    reports = []
    for target in domains:
        held_out = copy.deepcopy(config)
        held_out.run.source_domains = [d for d in domains if d != target]
        held_out.run.target_domain = target
        if verbose:
            print(f"⏳ 留出域 {target}，源域 {held_out.run.source_domains}")
        reports.append(run_seeds(held_out, datasets, store, setting, verbose))
    return MetricsReport.concat(reports)


# --- 5. 消融 ---
ABLATION_MODES = ("variants", "loss_terms", "stages")


def ablation_settings(config: ExperimentConfig, mode: str = "variants") -> List[Tuple[str, ExperimentConfig]]:
    """
    - variants:   baseline / in_only / snr / snr_no_dual_loss，种子相同
    - loss_terms: snr 变体下 dual / plus_only / minus_only / no_compare
    - stages:     snr 只插在第 1..N 个阶段之一，外加全部插入
    """
    if mode not in ABLATION_MODES:
        raise ConfigError(f"未知的消融类型 '{mode}'，可选 {ABLATION_MODES}")
    settings = []
    if mode == "variants":
        placement = config.model.snr_after_stage if any(config.model.snr_after_stage) else None
        for variant in VARIANTS:
            cfg = copy.deepcopy(config)
            cfg.model = config.model.for_variant(variant, placement)
            settings.append((variant, cfg))
    elif mode == "loss_terms":
        for terms in LOSS_TERMS:
            cfg = copy.deepcopy(config)
            cfg.model = config.model.for_variant("snr")
            cfg.run.loss_terms = terms
            settings.append((terms, cfg))
    else:
        n = len(config.model.stages)
        placements = [(f"stage{i + 1}", [j == i for j in range(n)]) for i in range(n)]
        placements.append(("all", [True] * n))
        for label, placement in placements:
            cfg = copy.deepcopy(config)
            cfg.model = config.model.for_variant("snr", placement)
            settings.append((label, cfg))
    return settings


def ablate(config: ExperimentConfig, datasets: Dict[str, DomainDataset], mode: str = "variants",
           store: Optional[RunStore] = None, verbose: bool = True) -> Tuple[MetricsReport, pd.DataFrame]:
    """每个设置都跑完整的留一域协议，返回明细与对比表（行: 设置，列: 目标域 + mean）。"""
    reports = []
    for label, cfg in ablation_settings(config, mode):
        if verbose:
            print(f"🚀 消融设置: {label}")
        reports.append(leave_one_domain_out(cfg, datasets, store, setting=label, verbose=verbose))
    merged = MetricsReport.concat(reports)
    return merged, merged.summary()
