import json

import numpy as np
import pandas as pd
import pytest

from snr_assistant import main
from snr_core.snrt_io import load_tensor


def _tiny_overrides(data_root, **extra):
    items = {
        "model.stages": "[[4,2],[8,2]]",
        "model.snr_after_stage": "[true,true]",
        "model.reduction": "4",
        "data.root": str(data_root),
        "data.domains": '["D-id","D-dim","D-noisy"]',
        "data.n_train": "24",
        "data.n_test": "16",
        "run.source_domains": '["D-id","D-dim"]',
        "run.target_domain": "D-noisy",
        "run.epochs": "1",
        "run.batch_size": "12",
        "run.seeds": "[0]",
    }
    items.update(extra)
    return [f"{k}={v}" for k, v in items.items()]


@pytest.fixture(scope="module")
def trained_run(tiny_data_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_runs")
    code = main(["-q", "train", *_tiny_overrides(tiny_data_root), "--out", str(out)])
    assert code == 0
    return out


def test_gen_data_refuses_non_empty_output(tmp_path):
    out = tmp_path / "data"
    args = ["-q", "gen-data", "--out", str(out), "--n", "8", "--seed", "1"]
    assert main(args) == 0
    assert sorted(p.name for p in out.iterdir()) == ["D-dim", "D-hue", "D-id", "D-noisy"]
    before = json.loads((out / "D-id" / "manifest.json").read_text(encoding="utf-8"))["checksum"]

    assert main(args) == 1
    assert main(args + ["--force"]) == 0
    after = json.loads((out / "D-id" / "manifest.json").read_text(encoding="utf-8"))["checksum"]
    assert before == after


def test_gen_data_from_style_file(tmp_path):
    spec = tmp_path / "styles.json"
    spec.write_text(json.dumps({"domains": {"bright": {"brightness_shift": 0.2}}}), encoding="utf-8")
    assert main(["-q", "gen-data", "--spec", str(spec), "--out", str(tmp_path / "out"), "--n", "4"]) == 0
    manifest = json.loads((tmp_path / "out" / "bright" / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["spec"]["brightness_shift"] == 0.2 and manifest["n"] == 4


def test_missing_dataset_exits_with_io_code(tmp_path, capsys):
    code = main(["-q", "train", f"data.root={tmp_path / 'nowhere'}", "--out", str(tmp_path / "runs")])
    assert code == 3
    assert "nowhere" in capsys.readouterr().out


@pytest.mark.parametrize("override", ['run.epochs="many"', "run.epoch=3", "model.variant=resnet"])
def test_config_errors_exit_with_contract_code(override, tmp_path):
    assert main(["-q", "train", override, "--out", str(tmp_path)]) == 1


def test_grad_check_exit_codes(monkeypatch):
    assert main(["-q", "grad-check", "--scope", "ops", "--seeds", "1"]) == 0

    from snr_core import tensor_core as tc
    original = tc.BACKWARD_RULES["sigmoid"]
    monkeypatch.setitem(tc.BACKWARD_RULES, "sigmoid", lambda g, ctx, inputs: tuple(-d for d in original(g, ctx, inputs)))
    assert main(["-q", "grad-check", "--scope", "ops", "--seeds", "1"]) == 2


def test_train_writes_summary(trained_run):
    runs = pd.read_csv(trained_run / "train_snr_runs.csv")
    assert runs["target"].tolist() == ["D-noisy"]
    assert (trained_run / "config.json").is_file()
    assert (trained_run / "snr" / "report.json").is_file()


def test_eval_reads_checkpoint(trained_run, tiny_data_root, tmp_path):
    checkpoint = trained_run / "snr" / "D-noisy" / "seed_0" / "checkpoint"
    out = tmp_path / "eval.json"
    args = ["-q", "eval", "--checkpoint", str(checkpoint), "--dataset", str(tiny_data_root / "D-noisy")]
    assert main(args + ["--precision", "float64", "--out", str(out)]) == 0
    result = json.loads(out.read_text(encoding="utf-8"))
    assert result["total"] == 40
    assert len(result["entropies"]) == 2

    sharded = tmp_path / "sharded.json"
    assert main(args + ["--precision", "float64", "--workers", "3", "--out", str(sharded)]) == 0
    assert json.loads(sharded.read_text(encoding="utf-8"))["correct"] == result["correct"]
    assert main(["-q", "eval", "--checkpoint", str(tmp_path / "none"), "--dataset", str(tiny_data_root)]) == 3


def test_inspect_dumps_unit_norm_maps(trained_run, tiny_data_root, tmp_path):
    checkpoint = trained_run / "snr" / "D-noisy" / "seed_0" / "checkpoint"
    dump = tmp_path / "dump"
    args = ["-q", "inspect", "--checkpoint", str(checkpoint), "--dataset", str(tiny_data_root / "D-id"),
            "--dump", str(dump), "--images", "0", "5"]
    assert main(args) == 0
    summary = json.loads((dump / "inspect.json").read_text(encoding="utf-8"))
    assert summary["images"] == [0, 5]
    assert len(summary["maps"]) == 4
    for name in summary["maps"]:
        maps = load_tensor(dump / name)
        assert maps.shape[0] == 3
        norms = np.sqrt((maps.astype(np.float64) ** 2).sum(axis=(1, 2)))
        np.testing.assert_allclose(norms[norms > 0], 1.0, rtol=1e-5)
    embeddings = pd.read_csv(dump / "embeddings.csv")
    assert embeddings["image"].tolist() == [0, 5] and "e7" in embeddings.columns

    bad = args[:-2] + ["99"]
    assert main(bad) == 1
