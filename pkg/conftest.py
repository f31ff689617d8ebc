import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from data_process.styleshapes import PRESET_DOMAINS, generate_domain, save_dataset  # noqa: E402
from snr_core.seeding import derive_seed  # noqa: E402
from train_process.run_config import ExperimentConfig, ModelSpec  # noqa: E402

TINY_DOMAINS = ["D-id", "D-dim", "D-noisy"]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(params=list(range(5)))
def seeded_rng(request):
    return np.random.default_rng(1000 + request.param)


@pytest.fixture(scope="session")
def tiny_data_root(tmp_path_factory):
    """三个小域（每域 40 张：24 训练 + 16 测试），整个测试会话共用。"""
    root = tmp_path_factory.mktemp("styleshapes")
    for i, name in enumerate(TINY_DOMAINS):
        dataset = generate_domain(name, PRESET_DOMAINS[name], 40, 4, derive_seed(7, i))
        save_dataset(dataset, root / name)
    return root


@pytest.fixture
def tiny_config(tiny_data_root, tmp_path) -> ExperimentConfig:
    config = ExperimentConfig()
    config.model = ModelSpec(stages=[[4, 2], [8, 2]], snr_after_stage=[True, True], num_classes=4, reduction=4)
    config.data.root = str(tiny_data_root)
    config.data.domains = list(TINY_DOMAINS)
    config.data.n_train = 24
    config.data.n_test = 16
    config.run.source_domains = ["D-id", "D-dim"]
    config.run.target_domain = "D-noisy"
    config.run.epochs = 2
    config.run.batch_size = 12
    config.run.seeds = [0]
    config.run.precision = "float64"
    config.run.output_dir = str(tmp_path / "runs")
    return config
