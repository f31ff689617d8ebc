import json

import numpy as np
import pytest

from data_process.styleshapes import (PRESET_DOMAINS, SHAPE_CLASSES, StyleSpec, apply_style, generate_domain,
                                      load_dataset, read_manifest, render_shape, save_dataset)
from snr_core.errors import ContractError, CorruptionError, DatasetMissingError, FormatError
from snr_core.seeding import derive_seed


def test_domains_share_content_and_differ_in_style():
    seed = 11
    plain = generate_domain("D-id", PRESET_DOMAINS["D-id"], 24, 4, seed)
    dim = generate_domain("D-dim", PRESET_DOMAINS["D-dim"], 24, 4, seed)
    assert np.array_equal(plain.labels, dim.labels)
    assert np.array_equal(plain.masks, dim.masks)
    assert not np.array_equal(plain.images, dim.images)
    assert dim.images.mean() < plain.images.mean()


def test_identity_style_keeps_rendered_shape():
    seed = 3
    dataset = generate_domain("D-id", PRESET_DOMAINS["D-id"], 8, 4, seed)
    for i in range(8):
        image, mask = render_shape(int(dataset.labels[i]), derive_seed(seed, i))
        np.testing.assert_allclose(dataset.images[i], image.astype(np.float32))
        assert np.array_equal(dataset.masks[i], mask)


def test_labels_are_balanced():
    dataset = generate_domain("D-hue", PRESET_DOMAINS["D-hue"], 40, 4, 0)
    assert np.bincount(dataset.labels, minlength=4).tolist() == [10, 10, 10, 10]
    assert dataset.images.shape == (40, 32, 32, 3)
    assert dataset.images.dtype == np.float32
    assert 0.0 <= dataset.images.min() and dataset.images.max() <= 1.0


def test_uneven_counts_warn_and_differ_by_one(capsys):
    dataset = generate_domain("D-id", PRESET_DOMAINS["D-id"], 10, 3, 0)
    counts = np.bincount(dataset.labels, minlength=3)
    assert counts.max() - counts.min() == 1
    assert "警告" in capsys.readouterr().out


def test_quiet_generation_does_not_warn(capsys):
    dataset = generate_domain("D-id", PRESET_DOMAINS["D-id"], 10, 3, 0, verbose=False)
    assert len(dataset) == 10
    assert capsys.readouterr().out == ""


def test_generation_is_deterministic(tmp_path):
    first = save_dataset(generate_domain("D-noisy", PRESET_DOMAINS["D-noisy"], 12, 4, 5), tmp_path / "a")
    second = save_dataset(generate_domain("D-noisy", PRESET_DOMAINS["D-noisy"], 12, 4, 5), tmp_path / "b")
    assert read_manifest(first)["checksum"] == read_manifest(second)["checksum"]
    other = save_dataset(generate_domain("D-noisy", PRESET_DOMAINS["D-noisy"], 12, 4, 6), tmp_path / "c")
    assert read_manifest(other)["checksum"] != read_manifest(first)["checksum"]


def test_saved_dataset_loads_back(tmp_path):
    dataset = generate_domain("D-dim", PRESET_DOMAINS["D-dim"], 8, 2, 1)
    loaded = load_dataset(save_dataset(dataset, tmp_path / "D-dim"))
    assert loaded.name == "D-dim" and loaded.num_classes == 2 and loaded.seed == 1
    assert loaded.spec == dataset.spec
    assert np.array_equal(loaded.images, dataset.images)
    assert np.array_equal(loaded.labels, dataset.labels)


def test_truncated_file_is_reported_as_corruption(tmp_path):
    target = save_dataset(generate_domain("D-id", PRESET_DOMAINS["D-id"], 4, 4, 0), tmp_path / "D-id")
    images = target / "images.snrt"
    images.write_bytes(images.read_bytes()[:-16])
    with pytest.raises(CorruptionError):
        load_dataset(target)


def test_missing_and_malformed_datasets(tmp_path):
    with pytest.raises(DatasetMissingError) as info:
        load_dataset(tmp_path / "nowhere")
    assert "nowhere" in str(info.value)
    target = save_dataset(generate_domain("D-id", PRESET_DOMAINS["D-id"], 4, 4, 0), tmp_path / "D-id")
    (target / "manifest.json").write_text("{broken", encoding="utf-8")
    with pytest.raises(FormatError):
        load_dataset(target)


@pytest.mark.parametrize("k", [0, 5])
def test_class_count_must_fit_shapes(k):
    with pytest.raises(ContractError):
        generate_domain("D-id", PRESET_DOMAINS["D-id"], 8, k, 0)


def test_style_spec_from_dict():
    spec = StyleSpec.from_dict({"gamma": 1.2, "noise_std": 0.05})
    assert spec.gamma == 1.2 and spec.contrast_scale == 1.0
    with pytest.raises(ContractError):
        StyleSpec.from_dict({"hue": 0.5})
    with pytest.raises(ContractError):
        StyleSpec.from_dict({"channel_mix": [[1, 0], [0, 1]]})
    assert json.loads(json.dumps(spec.to_dict()))["gamma"] == 1.2


def test_noise_depends_only_on_its_seed():
    image, _ = render_shape("cross", 9)
    spec = StyleSpec(noise_std=0.1)
    assert np.array_equal(apply_style(image, spec, 4), apply_style(image, spec, 4))
    assert not np.array_equal(apply_style(image, spec, 4), apply_style(image, spec, 5))


@pytest.mark.parametrize("class_id", SHAPE_CLASSES)
def test_every_class_renders_a_visible_mask(class_id):
    for jitter_seed in range(1000):
        image, mask = render_shape(class_id, jitter_seed)
        assert mask.shape == (32, 32) and image.shape == (32, 32, 3)
        assert set(np.unique(mask)) <= {0, 1}
        assert mask.any(), jitter_seed
        ys, xs = np.nonzero(mask)
        assert 0 <= ys.mean() < 32 and 0 <= xs.mean() < 32


def test_noisy_domain_has_wider_background_histogram():
    def background_variance(dataset):
        return np.mean([dataset.images[i][dataset.masks[i] == 0].var(axis=0).mean() for i in range(len(dataset))])

    plain = generate_domain("D-id", PRESET_DOMAINS["D-id"], 24, 4, 2)
    noisy = generate_domain("D-noisy", PRESET_DOMAINS["D-noisy"], 24, 4, 2)
    assert background_variance(plain) < 1e-12
    assert background_variance(noisy) > 1e-3
