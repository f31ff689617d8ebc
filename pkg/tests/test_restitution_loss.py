import numpy as np
import pandas as pd
import pytest

from snr_core.errors import ContractError, DimensionError, GeometryError
from snr_core.restitution_loss import (BoxSet, LossTraceWriter, aggregate_snr_loss, classification_dual_loss,
                                       combine_bundles, detection_dual_loss, entropy, segmentation_dual_loss)
from snr_core.snr import init_snr_params, snr_forward
from snr_core.tensor_core import Tape, Tensor, backward
from train_process.grad_suite import run_grad_suite


def _np_entropy(vectors, w, b):
    z = vectors @ w.T + b
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    return -(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=-1)


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _triplet(rng, shape):
    return [Tensor(rng.normal(size=shape)) for _ in range(3)]


@pytest.fixture
def phi(rng):
    return init_snr_params(6, 4, rng, r=2)


INSTANCES = 100


def _random_phi(rng, c):
    return init_snr_params(c, int(rng.integers(2, 6)), rng, r=2)


def test_classification_loss_matches_direct_formula(rng):
    for _ in range(INSTANCES):
        c = int(rng.integers(1, 8))
        phi = _random_phi(rng, c)
        f_norm, f_plus, f_minus = _triplet(rng, (int(rng.integers(1, 4)), 5, 4, c))
        bundle = classification_dual_loss(f_norm, f_plus, f_minus, phi)
        w, b = phi.w_phi.data, phi.b_phi.data
        h = [_np_entropy(t.data.mean(axis=(1, 2)), w, b) for t in (f_plus, f_norm, f_minus)]
        np.testing.assert_allclose(bundle.l_plus.item(), _softplus(h[0] - h[1]).mean(), rtol=1e-10)
        np.testing.assert_allclose(bundle.l_minus.item(), _softplus(h[1] - h[2]).mean(), rtol=1e-10)
        np.testing.assert_allclose(bundle.l_snr.item(), bundle.l_plus.item() + bundle.l_minus.item(), rtol=1e-12)


def test_segmentation_loss_averages_pixel_entropies_before_softplus(rng):
    for _ in range(INSTANCES):
        c = int(rng.integers(1, 8))
        phi = _random_phi(rng, c)
        f_norm, f_plus, f_minus = _triplet(rng, (int(rng.integers(1, 6)), int(rng.integers(1, 6)), c))
        bundle = segmentation_dual_loss(f_norm, f_plus, f_minus, phi)
        w, b = phi.w_phi.data, phi.b_phi.data
        h = [_np_entropy(t.data.reshape(-1, c), w, b).mean() for t in (f_plus, f_norm, f_minus)]
        np.testing.assert_allclose(bundle.l_plus.item(), _softplus(h[0] - h[1]), rtol=1e-10)
        np.testing.assert_allclose(bundle.l_minus.item(), _softplus(h[1] - h[2]), rtol=1e-10)


def _random_boxes(rng, h, w):
    boxes = []
    for _ in range(int(rng.integers(1, 4))):
        x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
        boxes.append((x0, y0, int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1))))
    return BoxSet(boxes=boxes)


def test_detection_loss_averages_box_entropies(rng):
    for _ in range(INSTANCES):
        c = int(rng.integers(1, 8))
        phi = _random_phi(rng, c)
        f_norm, f_plus, f_minus = _triplet(rng, (6, 8, c))
        boxes = _random_boxes(rng, 6, 8)
        bundle = detection_dual_loss(f_norm, f_plus, f_minus, boxes, phi)
        w, b = phi.w_phi.data, phi.b_phi.data

        def h(t):
            rows = np.stack([t.data[y0:y1, x0:x1].mean(axis=(0, 1)) for x0, y0, x1, y1 in boxes.boxes])
            return _np_entropy(rows, w, b).mean()

        np.testing.assert_allclose(bundle.l_plus.item(), _softplus(h(f_plus) - h(f_norm)), rtol=1e-10)
        np.testing.assert_allclose(bundle.l_minus.item(), _softplus(h(f_norm) - h(f_minus)), rtol=1e-10)


def test_single_pixel_segmentation_equals_classification(rng, phi):
    triplet = _triplet(rng, (1, 1, 6))
    seg = segmentation_dual_loss(*triplet, phi)
    cls = classification_dual_loss(*triplet, phi)
    np.testing.assert_allclose(seg.l_plus.item(), cls.l_plus.item(), rtol=1e-14)
    np.testing.assert_allclose(seg.l_minus.item(), cls.l_minus.item(), rtol=1e-14)


def test_full_image_box_equals_classification(rng, phi):
    triplet = _triplet(rng, (5, 7, 6))
    det = detection_dual_loss(*triplet, BoxSet(boxes=[(0, 0, 7, 5)]), phi)
    cls = classification_dual_loss(*triplet, phi)
    np.testing.assert_allclose(det.l_plus.item(), cls.l_plus.item(), rtol=1e-12)
    np.testing.assert_allclose(det.l_minus.item(), cls.l_minus.item(), rtol=1e-12)


def test_identical_features_give_ln2_per_term(rng, phi):
    f = Tensor(rng.normal(size=(2, 4, 4, 6)))
    bundle = classification_dual_loss(f, f, f, phi)
    np.testing.assert_allclose(bundle.l_plus.item(), np.log(2.0), rtol=1e-12)
    np.testing.assert_allclose(bundle.l_minus.item(), np.log(2.0), rtol=1e-12)


def test_entropy_of_probability_vectors():
    np.testing.assert_allclose(entropy(Tensor(np.full(4, 0.25))).item(), np.log(4.0), rtol=1e-12)
    assert entropy(Tensor(np.array([0.0, 1.0, 0.0]))).item() == 0.0
    with pytest.raises(ContractError):
        entropy(Tensor(np.array([0.5, 0.6])))


def test_plus_loss_sends_gradient_to_gate():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = init_snr_params(8, 4, rng, r=2)
        with Tape():
            out = snr_forward(Tensor(rng.normal(size=(2, 5, 5, 8)) * 2.0 + 1.0), params)
            bundle = classification_dual_loss(out.f_norm, out.f_plus, out.f_minus, params)
            backward(bundle.l_plus)
        assert out.gate.grad is not None
        assert np.abs(out.gate.grad).max() > 0.0, seed


def test_loss_term_modes(rng, phi):
    triplet = _triplet(rng, (2, 3, 3, 6))
    dual = classification_dual_loss(*triplet, phi)
    plus = classification_dual_loss(*triplet, phi, terms="plus_only")
    minus = classification_dual_loss(*triplet, phi, terms="minus_only")
    assert plus.l_minus.item() == 0.0 and plus.l_plus.item() == dual.l_plus.item()
    assert minus.l_plus.item() == 0.0 and minus.l_minus.item() == dual.l_minus.item()

    loose = classification_dual_loss(*triplet, phi, terms="no_compare")
    h_plus, _, h_minus = loose.entropies[0][1:]
    w, b = phi.w_phi.data, phi.b_phi.data
    expected_plus = _softplus(_np_entropy(triplet[1].data.mean(axis=(1, 2)), w, b)).mean()
    np.testing.assert_allclose(loose.l_plus.item(), expected_plus, rtol=1e-10)
    assert h_plus >= 0.0 and h_minus >= 0.0
    with pytest.raises(ContractError):
        classification_dual_loss(*triplet, phi, terms="both")


def test_aggregate_with_zero_weight_returns_task_loss(rng, phi):
    task = Tensor(np.float64(0.75))
    bundle = classification_dual_loss(*_triplet(rng, (2, 3, 3, 6)), phi)
    assert aggregate_snr_loss(task, [bundle], weight=0.0) is task
    assert aggregate_snr_loss(task, [], weight=1.0) is task
    total = aggregate_snr_loss(task, [bundle, bundle], weight=0.5)
    np.testing.assert_allclose(total.item(), 0.75 + bundle.l_snr.item(), rtol=1e-12)
    with pytest.raises(ContractError):
        aggregate_snr_loss(task, [bundle], weight=-1.0)


def test_combine_keeps_module_order(rng):
    bundles = []
    for i, c in enumerate((4, 8)):
        phi = init_snr_params(c, 3, rng, r=2)
        bundles.append(classification_dual_loss(*_triplet(rng, (2, 3, 3, c)), phi, module_index=i))
    combined = combine_bundles(bundles)
    assert [row[0] for row in combined.per_module] == [0, 1]
    np.testing.assert_allclose(combined.l_snr.item(), sum(b.l_snr.item() for b in bundles), rtol=1e-12)
    assert combine_bundles([]) is None


def test_contract_violations(rng, phi):
    f_norm, f_plus, f_minus = _triplet(rng, (4, 4, 6))
    with pytest.raises(DimensionError):
        classification_dual_loss(f_norm, f_plus, Tensor(np.ones((4, 5, 6))), phi)
    with pytest.raises(DimensionError):
        classification_dual_loss(*_triplet(rng, (4, 4, 5)), phi)
    with pytest.raises(ContractError):
        detection_dual_loss(f_norm, f_plus, f_minus, BoxSet(boxes=[]), phi)
    with pytest.raises(GeometryError):
        detection_dual_loss(f_norm, f_plus, f_minus, BoxSet(boxes=[(0, 0, 5, 2)]), phi)
    with pytest.raises(GeometryError):
        detection_dual_loss(f_norm, f_plus, f_minus, BoxSet(boxes=[(2, 0, 2, 2)]), phi)


def test_loss_trace_writer_appends(tmp_path, rng, phi):
    path = tmp_path / "loss_trace.csv"
    writer = LossTraceWriter(path, num_modules=2)
    bundle = classification_dual_loss(*_triplet(rng, (2, 3, 3, 6)), phi)
    writer.append(0, 1.5, bundle, 2.0)
    writer.flush()
    writer.append(1, 1.2, None, 1.2)
    writer.flush()
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["step", "task_loss", "l_plus_0", "l_minus_0", "l_plus_1", "l_minus_1", "total"]
    assert frame["step"].tolist() == [0, 1]
    assert frame.loc[1, "l_plus_0"] == 0.0
    assert frame.loc[0, "l_plus_1"] == 0.0


def test_losses_pass_grad_check():
    frame = run_grad_suite("loss", seeds=20)
    assert frame["max_rel_error"].max() < 1e-4
    assert {"classification_f_plus", "segmentation_f_minus", "detection_f_norm", "phi_weights"} <= set(frame["op"])
