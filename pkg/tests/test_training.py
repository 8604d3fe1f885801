import csv

import numpy as np
import pytest

from conftest import G_BASE
from strcn.autodiff import Tensor
from strcn.autodiff.gradcheck import grad_check
from strcn.autodiff.functional import softmax
from strcn.dataset import FrameSequence
from strcn.magnify import MagnificationConfig
from strcn.model import StrcnConfig, build_network
from strcn.training import (
    AugmentationSpec,
    TrainHyper,
    TrainingDivergedError,
    augment,
    augmentation_plan,
    balanced_loss,
    balanced_loss_tensor,
    class_weights,
    keep_count,
    keep_indices,
    make_batches,
    train,
    write_loss_curve,
)

# balanced loss ---------------------------------------------------------------------


def test_class_weights_examples():
    # B=4, C=2, counts {0: 3, 1: 1}
    np.testing.assert_allclose(class_weights([0, 0, 0, 1], 2), [2 / 3, 2 / 3, 2 / 3, 2.0])
    # balanced batch: every weight is one
    np.testing.assert_allclose(class_weights([0, 1, 2, 2, 1, 0], 3), np.ones(6))
    # classes absent from the batch still count in C
    np.testing.assert_allclose(class_weights([0, 0, 1, 1], 3), np.full(4, 4 / 6))


@pytest.mark.parametrize("seed", range(5))
def test_class_weights_enumerated(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 6))
    y = rng.integers(0, C, size=int(rng.integers(2, 30)))
    counts = np.bincount(y, minlength=C)
    np.testing.assert_allclose(class_weights(y, C), [len(y) / (C * counts[c]) for c in y])


def _bce(p, y, C):
    onehot = np.eye(C)[y]
    return -(onehot * np.log(p) + (1 - onehot) * np.log(1 - p)).sum()


def test_balanced_batch_equals_unweighted():
    rng = np.random.default_rng(0)
    y = np.array([0, 1, 2, 0, 1, 2])
    p = softmax(Tensor(rng.standard_normal((6, 3)))).data
    lb, gb = balanced_loss(p, y, 3, balanced=True)
    lu, gu = balanced_loss(p, y, 3, balanced=False)
    assert lb == lu == pytest.approx(_bce(p, y, 3))
    np.testing.assert_array_equal(gb, gu)


def test_one_hot_and_index_labels_agree():
    p = softmax(Tensor(np.random.default_rng(1).standard_normal((4, 3)))).data
    y = np.array([2, 0, 0, 1])
    a = balanced_loss(p, y)
    b = balanced_loss(p, np.eye(3)[y])
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        balanced_loss(p, np.ones((4, 3)))
    with pytest.raises(ValueError):
        balanced_loss(p, [0, 1, 2, 3])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    y = np.array([0, 0, 0, 1, 2])
    z = rng.standard_normal((5, 3))
    _, g = balanced_loss(softmax(Tensor(z)).data, y, 3)
    eps = 1e-6
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp = z.copy()
        zm = z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        num[idx] = (balanced_loss(softmax(Tensor(zp)).data, y, 3)[0]
                    - balanced_loss(softmax(Tensor(zm)).data, y, 3)[0]) / (2 * eps)
    assert np.abs(num - g).max() <= 1e-6


def test_tensor_loss_backpropagates_same_gradient():
    z = Tensor(np.random.default_rng(3).standard_normal((4, 3)), requires_grad=True)
    y = [1, 1, 0, 2]
    loss = balanced_loss_tensor(softmax(z), y, 3)
    loss.backward()
    _, g = balanced_loss(softmax(Tensor(z.data)).data, y, 3)
    np.testing.assert_allclose(z.grad, g, atol=1e-12)
    assert grad_check(lambda t: balanced_loss_tensor(softmax(t), y, 3), [z]) <= 1e-6


def test_clamped_probabilities_stay_finite():
    p = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    loss, g = balanced_loss(p, [1, 1], 3)
    assert np.isfinite(loss) and np.all(np.isfinite(g))


# augmentation ---------------------------------------------------------------------


def test_keep_count_rounding():
    assert keep_count(30, 90) == 27
    assert keep_count(30, 70) == 21
    assert keep_count(25, 90) == 23  # 22.5 rounds half up
    assert keep_count(5, 60) == 3


def test_keep_indices_contract():
    rng = np.random.default_rng(0)
    for T in (5, 12, 30):
        for q in (100, 90, 80, 70, 60):
            idx = keep_indices(T, q, rng)
            assert idx[0] == 0
            assert len(idx) == keep_count(T, q)
            assert np.all(np.diff(idx) > 0)
            assert idx.max() < T


def test_augmentation_plan_has_fifty_variants():
    plan = augmentation_plan(30, AugmentationSpec(), "seq")
    assert len(plan) == 50 == AugmentationSpec().n_variants
    assert sorted({a for a, _, _ in plan}) == [float(a) for a in range(5, 15)]
    for alpha, q, idx in plan:
        assert len(idx) == keep_count(30, q) and idx[0] == 0


def test_augmentation_plan_is_deterministic():
    a = augmentation_plan(30, AugmentationSpec(seed=1), "x")
    b = augmentation_plan(30, AugmentationSpec(seed=1), "x")
    c = augmentation_plan(30, AugmentationSpec(seed=1), "y")
    assert all(np.array_equal(p[2], q[2]) for p, q in zip(a, b))
    assert any(not np.array_equal(p[2], q[2]) for p, q in zip(a, c))


def test_augmentation_needs_five_frames():
    with pytest.raises(ValueError):
        augmentation_plan(4, AugmentationSpec())


def test_augment_variants_keep_identity():
    frames = np.random.default_rng(4).random((10, 16, 16, 1))
    seq = FrameSequence(frames, 30.0, "subj", 1, "src")
    spec = AugmentationSpec(alphas=(2.0, 4.0), keeps=(100, 60))
    out = augment(seq, spec, MagnificationConfig(cutoff_lo=0.5, cutoff_hi=8.0))
    assert len(out) == 4
    assert all(v.subject_id == "subj" and v.source_id == "src" and v.label == 1 for v in out)
    assert [v.T for v in out] == [10, 6, 10, 6]
    np.testing.assert_array_equal(out[1].frame_indices, augmentation_plan(10, spec, "src")[1][2])


# training loop ----------------------------------------------------------------------


def test_make_batches_merges_trailing_singleton():
    rng = np.random.default_rng(0)
    b = make_batches(41, 20, rng)
    assert [len(x) for x in b] == [20, 21]
    assert sorted(np.concatenate(b).tolist()) == list(range(41))
    assert [len(x) for x in make_batches(45, 20, rng)] == [20, 20, 5]


def _tiny_problem(n=12, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 3
    X = rng.standard_normal((n, 132, 30, 1)) * 0.1
    for i, c in enumerate(y):
        X[i, 40 * c:40 * c + 30] += 1.0
    return X, y


def test_zero_learning_rate_leaves_weights_unchanged():
    X, y = _tiny_problem()
    net = build_network(StrcnConfig("A", (132, 30, 1), 3, 4), seed=0)
    before = {k: v.data.copy() for k, v in net.named_parameters().items()}
    train(net, X, y, TrainHyper(lr=0.0, max_epochs=3, batch_size=6, tol=0.0))
    for k, v in net.named_parameters().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_training_reduces_loss_and_is_reproducible(tmp_path):
    X, y = _tiny_problem()
    hyper = TrainHyper(lr=0.02, max_epochs=6, batch_size=6, tol=0.0)
    a = build_network(StrcnConfig("A", (132, 30, 1), 3, 4), seed=0)
    ra = train(a, X, y, hyper, seed=5, loss_csv=tmp_path / "loss.csv")
    b = build_network(StrcnConfig("A", (132, 30, 1), 3, 4), seed=0)
    rb = train(b, X, y, hyper, seed=5)
    assert ra.losses == rb.losses
    assert ra.losses[-1] < ra.losses[0]
    assert ra.lrs == pytest.approx([0.02 * 0.8 ** k for k in range(6)])
    assert not a.training
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["epoch", "mean_loss", "lr"]
    assert len(rows) == 7 and float(rows[1][1]) == ra.losses[0]


def test_stops_on_tolerance():
    X, y = _tiny_problem()
    net = build_network(StrcnConfig("A", (132, 30, 1), 3, 4), seed=0)
    # one full batch: identical statistics every epoch, so the loss cannot move
    res = train(net, X, y, TrainHyper(lr=0.0, max_epochs=50, batch_size=12, tol=1e-3))
    assert res.converged and res.epochs == 2


def test_divergence_is_reported():
    X, y = _tiny_problem()
    X[0, 0, 0, 0] = np.inf
    net = build_network(StrcnConfig("A", (132, 30, 1), 3, 4), seed=0)
    with pytest.raises(TrainingDivergedError):
        train(net, X, y, TrainHyper(lr=0.01, max_epochs=2, batch_size=6))


def test_bad_inputs():
    net = build_network(StrcnConfig("A", (132, 30, 1), 3, 4), seed=0)
    with pytest.raises(ValueError):
        train(net, np.zeros((0, 132, 30, 1)), [])
    with pytest.raises(ValueError):
        train(net, np.zeros((3, 132, 30, 1)), [0, 1])
    with pytest.raises(ValueError):
        TrainHyper(batch_size=1).validate()
    with pytest.raises(ValueError):
        TrainHyper(damping=0).validate()


def test_loss_curve_writer(tmp_path):
    from strcn.training import TrainResult
    path = write_loss_curve(TrainResult([1.5, 1.0], [0.1, 0.08], True), tmp_path / "c" / "l.csv")
    assert path.read_text().splitlines() == ["epoch,mean_loss,lr", "1,1.5,0.1", "2,1.0,0.08"]


# synthetic set, default schedule (slow: uses the session's cached optical flow) -----------


def test_synthetic_set_is_learnable(make_pipeline):
    pl = make_pipeline(G_BASE, model__feature_maps=16, train__tol="1e-3", train__max_epochs=50)
    idx = np.arange(len(pl))
    net, data, res = pl.fit(idx)
    assert res.epochs <= 50
    assert (net.predict(data.X_train).argmax(axis=1) == data.y_train).mean() >= 0.95


def test_early_loss_is_non_increasing(make_pipeline):
    ok = 0
    for seed in range(5):
        pl = make_pipeline(G_BASE, model__feature_maps=16, train__max_epochs=5, seed=seed)
        _, _, res = pl.fit(np.arange(len(pl)))
        ok += bool(np.all(np.diff(res.losses) <= 0))
    assert ok >= 4
