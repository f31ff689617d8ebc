import copy
import json
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from data_process.styleshapes import PRESET_DOMAINS, DomainDataset, generate_domain, save_dataset
from run_store import RunStore
from snr_core.errors import ConfigError, DatasetMissingError, NumericalError
from snr_core.seeding import derive_seed
from snr_core.tensor_core import Tensor
from train_process import trainer
from train_process.model import build_model
from train_process.optimizer import SGDMomentum, cosine_lr
from train_process.run_config import ExperimentConfig, ModelSpec, PRESET_NAMES
from train_process.trainer import (CURVE_COLUMNS, BalancedSampler, MetricsReport, ablation_settings, evaluate,
                                   leave_one_domain_out, load_domains, split_domain, train)


@pytest.fixture
def datasets(tiny_config):
    return load_domains(tiny_config.data.root, tiny_config.data.domains)


def _variant(config, variant, **run):
    cfg = copy.deepcopy(config)
    cfg.model = cfg.model.for_variant(variant)
    for key, value in run.items():
        setattr(cfg.run, key, value)
    return cfg


# --- 优化器 ---
def test_zero_learning_rate_leaves_parameters_unchanged(tiny_config, datasets):
    cfg = _variant(tiny_config, "snr", lr=0.0, epochs=1)
    result = train(cfg, datasets, seed=0, verbose=False)
    fresh = build_model(cfg.model, seed=0, precision=cfg.run.precision).parameters()
    trained = result.model.parameters()
    assert all(np.array_equal(trained[k].data, fresh[k].data) for k in fresh)


def test_momentum_step():
    w = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = SGDMomentum({"w": w}, momentum=0.5)
    w.grad = np.array([1.0, 2.0])
    opt.step(0.1)
    np.testing.assert_allclose(w.data, [0.9, -1.2])
    opt.step(0.1)
    np.testing.assert_allclose(w.data, [0.9 - 0.15, -1.2 - 0.3])
    opt.zero_grad()
    assert w.grad is None


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 30, 0.05) == 0.05
    assert cosine_lr(29, 30, 0.05) <= 0.01 * 0.05
    assert cosine_lr(0, 1, 0.05) == 0.05
    values = [cosine_lr(e, 10, 1.0) for e in range(10)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# --- 数据准备 ---
def test_split_and_missing_domains(tiny_config, datasets):
    train_part, test_part = split_domain(datasets["D-id"], 24, 16)
    assert len(train_part) == 24 and len(test_part) == 16
    assert np.array_equal(test_part.labels, datasets["D-id"].labels[24:40])
    with pytest.raises(ConfigError):
        split_domain(datasets["D-id"], 30, 16)
    with pytest.raises(DatasetMissingError) as info:
        load_domains(tiny_config.data.root, ["D-hue"])
    assert "D-hue" in str(info.value)


def test_balanced_sampler_draws_equally_from_each_domain(datasets):
    sources = [datasets["D-id"], datasets["D-dim"]]
    sampler = BalancedSampler(sources, 12, np.random.default_rng(0))
    assert sampler.per_domain == 6 and sampler.batch_size == 12
    batches = list(sampler.epoch())
    assert len(batches) == sampler.steps == 40 // 6
    for images, labels in batches:
        assert images.shape == (12, 32, 32, 3) and labels.shape == (12,)
        # D-dim 整体更暗，后半批次来自 D-dim
        assert images[:6].mean() > images[6:].mean()


# --- 评估 ---
class _LabelReader:
    """测试桩：从图像左上角像素读出标签，输出 one-hot logits。"""

    def __init__(self, num_classes):
        self.num_classes = num_classes

    def forward(self, x, with_contaminated=True):
        labels = np.rint(x.data[:, 0, 0, 0]).astype(int)
        return SimpleNamespace(logits=Tensor(np.eye(self.num_classes)[labels]), snr_outputs=[])


def _labelled_dataset(n=37, k=3):
    labels = np.arange(n) % k
    images = np.zeros((n, 4, 4, 3), dtype=np.float64)
    images[:, 0, 0, 0] = labels
    return DomainDataset("stub", PRESET_DOMAINS["D-id"], images, labels, None, 0, k)


@pytest.mark.parametrize("workers", [0, 1, 4])
def test_evaluate_counts_exactly(workers):
    result = evaluate(_LabelReader(3), _labelled_dataset(), workers=workers, batch_size=5)
    assert (result.correct, result.total, result.accuracy) == (37, 37, 1.0)
    assert result.entropies == []


def test_evaluate_breaks_ties_towards_lowest_class():
    class Flat:
        def forward(self, x, with_contaminated=True):
            return SimpleNamespace(logits=Tensor(np.zeros((x.shape[0], 3))), snr_outputs=[])

    result = evaluate(Flat(), _labelled_dataset(n=30))
    assert result.correct == 10


def test_sharded_evaluation_matches_single_worker(tiny_config, datasets):
    model = build_model(tiny_config.model, seed=0)
    single = evaluate(model, datasets["D-noisy"], workers=0)
    sharded = evaluate(model, datasets["D-noisy"], workers=3, batch_size=7)
    assert single.correct == sharded.correct
    assert [e["stage"] for e in single.entropies] == [0, 1]
    for a, b in zip(single.entropies, sharded.entropies):
        for key in ("h_plus", "h_norm", "h_minus"):
            np.testing.assert_allclose(a[key], b[key], rtol=1e-10)


def test_random_model_scores_at_chance():
    dataset = generate_domain("D-id", PRESET_DOMAINS["D-id"], 200, 4, 3, verbose=False)
    spec = ModelSpec(stages=[[4, 2], [8, 2]], snr_after_stage=[True, True], num_classes=4, reduction=4)
    accuracies = []
    for seed in range(6):
        result = evaluate(build_model(spec, seed=seed), dataset)
        accuracies.append(result.accuracy)
        assert 0.0 <= result.accuracy <= 1.0
        for row in result.entropies:
            for key in ("h_plus", "h_norm", "h_minus"):
                assert 0.0 <= row[key] <= np.log(4) + 1e-9
    assert abs(np.mean(accuracies) - 0.25) <= 0.05


# --- 单次训练 ---
def test_training_writes_artifacts(tiny_config, datasets, tmp_path):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    result = train(tiny_config, datasets, seed=0, run_dir=run_dir, verbose=False)
    for name in ("curves.csv", "loss_trace.csv", "plot_data.csv", "report.json"):
        assert (run_dir / name).is_file()
    assert (run_dir / "checkpoint" / "checkpoint.snrt").is_file()
    assert (run_dir / "checkpoints" / "epoch_002" / "checkpoint.json").is_file()

    curves = pd.read_csv(run_dir / "curves.csv")
    assert list(curves.columns) == CURVE_COLUMNS and len(curves) == 2
    assert np.isfinite(curves[["task_loss", "snr_loss", "total"]].to_numpy()).all()
    trace = pd.read_csv(run_dir / "loss_trace.csv")
    assert len(trace) == result.report["metrics"]["steps"]
    assert {"l_plus_0", "l_minus_1"} <= set(trace.columns)

    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    assert report["prng"] == "numpy.PCG64"
    assert set(report["sub_streams"]) == {"init", "shuffle", "target_shuffle"}
    assert report["data_seeds"]["D-noisy"] == derive_seed(7, 2)
    metrics = report["metrics"]
    assert metrics["target_total"] == 16
    assert len(metrics["entropy_target"]) == 2
    assert metrics["snr_param_overhead"] > 0


def test_training_is_deterministic(tiny_config, datasets, tmp_path):
    dirs = [tmp_path / "a", tmp_path / "b"]
    reports = []
    for d in dirs:
        d.mkdir()
        reports.append(train(tiny_config, datasets, seed=3, run_dir=d, verbose=False).report)
    assert reports[0]["metrics"] == reports[1]["metrics"]
    blobs = [(d / "checkpoint" / "checkpoint.snrt").read_bytes() for d in dirs]
    assert blobs[0] == blobs[1]


def test_zero_weight_matches_variant_without_dual_loss(tiny_config, datasets):
    zero = train(_variant(tiny_config, "snr", snr_weight=0.0), datasets, seed=1, verbose=False)
    plain = train(_variant(tiny_config, "snr_no_dual_loss"), datasets, seed=1, verbose=False)
    pd.testing.assert_frame_equal(zero.curves, plain.curves, check_exact=True)
    assert (zero.curves["snr_loss"] == 0.0).all()
    a, b = zero.model.parameters(), plain.model.parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_dual_loss_contributes_to_total(tiny_config, datasets):
    result = train(tiny_config, datasets, seed=0, verbose=False)
    assert (result.curves["snr_loss"] > 0.0).all()
    np.testing.assert_allclose(result.curves["total"], result.curves["task_loss"] + result.curves["snr_loss"])


def test_uda_uses_target_data_only_with_dual_loss(tiny_config, datasets, capsys):
    dg = train(tiny_config, datasets, seed=0, verbose=False)
    uda = train(_variant(tiny_config, "snr", protocol="uda"), datasets, seed=0, verbose=False)
    assert not np.array_equal(dg.curves["snr_loss"], uda.curves["snr_loss"])

    base_dg = train(_variant(tiny_config, "baseline"), datasets, seed=0, verbose=False)
    base_uda = train(_variant(tiny_config, "baseline", protocol="uda"), datasets, seed=0, verbose=True)
    pd.testing.assert_frame_equal(base_dg.curves, base_uda.curves, check_exact=True)
    assert "警告" in capsys.readouterr().out


def test_non_finite_loss_writes_nan_dump(tiny_config, datasets, tmp_path, monkeypatch):
    monkeypatch.setattr(trainer, "cross_entropy", lambda logits, labels: Tensor(np.float64(np.nan)))
    run_dir = tmp_path / "nan"
    run_dir.mkdir()
    with pytest.raises(NumericalError) as info:
        train(tiny_config, datasets, seed=0, run_dir=run_dir, verbose=False)
    assert info.value.exit_code == 2
    dump = json.loads((run_dir / "nan_dump.json").read_text(encoding="utf-8"))
    assert dump["step"] == 0 and dump["epoch"] == 0
    assert [s["stage"] for s in dump["stage_stats"]] == [0, 1]


# --- 协议与汇总 ---
def test_leave_one_domain_out_rotates_targets(tiny_config, datasets, tmp_path):
    cfg = _variant(tiny_config, "snr", epochs=1)
    store = RunStore(tmp_path / "lodo")
    report = leave_one_domain_out(cfg, datasets, store, verbose=False)
    assert len(report.rows) == 3
    assert report.rows["target"].tolist() == ["D-id", "D-dim", "D-noisy"]
    assert (tmp_path / "lodo" / "snr" / "D-dim" / "seed_0" / "report.json").is_file()
    summary = report.summary()
    assert list(summary.columns) == ["setting", "D-id", "D-dim", "D-noisy", "mean"]

    single = copy.deepcopy(cfg)
    single.data.domains = ["D-id"]
    with pytest.raises(ConfigError):
        leave_one_domain_out(single, datasets, verbose=False)


def test_ablation_settings():
    config = ExperimentConfig()
    variants = ablation_settings(config, "variants")
    assert [label for label, _ in variants] == ["baseline", "in_only", "snr", "snr_no_dual_loss"]
    assert not any(variants[0][1].model.snr_after_stage)
    terms = ablation_settings(config, "loss_terms")
    assert [cfg.run.loss_terms for _, cfg in terms] == ["dual", "plus_only", "minus_only", "no_compare"]
    stages = ablation_settings(config, "stages")
    assert [label for label, _ in stages] == ["stage1", "stage2", "stage3", "stage4", "all"]
    assert stages[1][1].model.snr_after_stage == [False, True, False, False]
    with pytest.raises(ConfigError):
        ablation_settings(config, "optimizers")


def test_ablation_table_has_one_row_per_setting(tiny_config, datasets):
    cfg = _variant(tiny_config, "snr", epochs=1)
    cfg.data.domains = ["D-id", "D-noisy"]
    report, table = trainer.ablate(cfg, datasets, mode="variants", verbose=False)
    assert len(report.rows) == 4 * 2
    assert table["setting"].tolist() == ["baseline", "in_only", "snr", "snr_no_dual_loss"]
    assert list(table.columns) == ["setting", "D-id", "D-noisy", "mean"]
    overhead = report.rows.set_index("setting")["snr_param_overhead"]
    assert (overhead.loc["baseline"] == 0).all() and (overhead.loc["snr"] > 0).all()


def test_metrics_report_summary():
    rows = pd.DataFrame([
        {"setting": "snr", "target": "A", "target_accuracy": 0.8},
        {"setting": "snr", "target": "A", "target_accuracy": 0.6},
        {"setting": "snr", "target": "B", "target_accuracy": 0.5},
        {"setting": "baseline", "target": "A", "target_accuracy": 0.4},
        {"setting": "baseline", "target": "B", "target_accuracy": 0.2},
    ])
    report = MetricsReport(rows, 1.5)
    table = report.summary().set_index("setting")
    assert table.loc["snr", "A"] == pytest.approx(0.7)
    assert table.loc["snr", "mean"] == pytest.approx(0.6)
    assert report.mean_accuracy("baseline") == pytest.approx(0.3)
    assert report.to_dict()["timing"]["wall_clock_s"] == 1.5


# --- 完整规模验收 ---
@pytest.fixture(scope="module")
def full_data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("styleshapes_full")
    for i, name in enumerate(PRESET_NAMES):
        save_dataset(generate_domain(name, PRESET_DOMAINS[name], 2500, 4, derive_seed(0, i)), root / name)
    return root


def _full_config(root, **run):
    config = ExperimentConfig()
    config.data.root = str(root)
    for key, value in run.items():
        setattr(config.run, key, value)
    return config


@pytest.mark.slow
def test_single_domain_overfit(full_data_root):
    config = _full_config(full_data_root, source_domains=["D-id"], target_domain="D-dim", train_subset=64,
                          epochs=200, batch_size=64, seeds=[0])
    datasets = load_domains(config.data.root, ["D-id", "D-dim"])
    result = train(config, datasets, seed=0, verbose=False)
    assert result.report["metrics"]["train_accuracy"] == 1.0
    assert (np.diff(result.curves["task_loss"].to_numpy()[:5]) < 0).sum() >= 3


@pytest.mark.slow
def test_desk_scale_variant_ordering(full_data_root):
    config = _full_config(full_data_root)
    datasets = load_domains(config.data.root, config.data.domains)
    report, _ = trainer.ablate(config, datasets, mode="variants", verbose=False)
    acc = {v: report.mean_accuracy(v) for v in ("baseline", "in_only", "snr", "snr_no_dual_loss")}
    assert acc["snr"] >= acc["snr_no_dual_loss"] >= acc["baseline"]
    assert acc["snr"] - acc["baseline"] >= 0.02
    assert acc["baseline"] < acc["in_only"] < acc["snr"]

    snr_rows = report.rows[report.rows["setting"] == "snr"]
    ordered = (snr_rows["h_plus"] <= snr_rows["h_norm"]) & (snr_rows["h_norm"] <= snr_rows["h_minus"])
    assert ordered.groupby(snr_rows["seed"]).mean().gt(0.5).sum() >= 2


@pytest.mark.slow
def test_desk_scale_uda_improves_target_accuracy(full_data_root):
    config = _full_config(full_data_root)
    datasets = load_domains(config.data.root, config.data.domains)
    dg = leave_one_domain_out(config, datasets, verbose=False)
    uda = leave_one_domain_out(_full_config(full_data_root, protocol="uda"), datasets, verbose=False)
    assert uda.mean_accuracy() - dg.mean_accuracy() >= 0.005
