"""Batch centroids, EMA bank behavior, and pseudo-labeling strategies."""

import numpy as np
import pytest

from contralign.autodiff import Tape, Tensor, backward, sum_all
from contralign.centroids import (
    CentroidBank,
    batch_centroids,
    ema_update,
    lloyd_refine,
    nearest_centroid_labels,
    pseudo_labels_argmax,
    pseudo_labels_kmeans,
)
from contralign.errors import ContractError, StrategyUnavailableError
from contralign.model import ModelConfig, init_model, predict, forward


def test_batch_centroids_trivial_cases():
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = batch_centroids(Tensor(feats), [0, 1], 2)
    np.testing.assert_array_equal(out.centroids.values, feats)
    np.testing.assert_array_equal(out.present, [True, True])

    out = batch_centroids(Tensor(feats), [0, 0], 2)
    np.testing.assert_allclose(out.centroids.values[0], [0.5, 0.5])
    np.testing.assert_array_equal(out.centroids.values[1], 0.0)
    np.testing.assert_array_equal(out.present, [True, False])
    np.testing.assert_array_equal(out.counts, [2, 0])


def test_batch_centroids_matches_loop_oracle():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(40, 5))
    labels = rng.integers(0, 4, size=40)
    out = batch_centroids(Tensor(feats), labels, 4)
    for k in range(4):
        mask = labels == k
        if mask.any():
            np.testing.assert_allclose(
                out.centroids.values[k], feats[mask].mean(axis=0), atol=1e-12
            )
            assert out.present[k] and out.counts[k] == mask.sum()


def test_batch_centroids_is_differentiable():
    feats = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Tape() as tape:
        out = batch_centroids(feats, [0, 0, 1], 2)
        grads = backward(sum_all(out.centroids), tape)
    # class 0 has two members (weight 1/2 each), class 1 has one
    want = np.array([[0.5, 0.5], [0.5, 0.5], [1.0, 1.0]])
    np.testing.assert_allclose(grads[feats], want)


def test_batch_centroids_label_validation():
    with pytest.raises(ContractError):
        batch_centroids(Tensor(np.ones((2, 2))), [0, 2], 2)
    with pytest.raises(ContractError):
        batch_centroids(Tensor(np.ones((2, 2))), [0, -1], 2)


def test_ema_update_edge_rhos():
    batch = batch_centroids(Tensor(np.array([[0.0, 1.0], [1.0, 0.0]])), [0, 1], 2)

    bank = CentroidBank(2, 2, rho=1.0)
    bank.centroids[:] = 7.0
    bank.initialized[:] = True
    ema_update(bank, batch)
    np.testing.assert_array_equal(bank.centroids, batch.centroids.values)

    bank = CentroidBank(2, 2, rho=0.0)
    bank.centroids[:] = 7.0
    bank.initialized[:] = True
    ema_update(bank, batch)
    np.testing.assert_array_equal(bank.centroids, 7.0)

    bank = CentroidBank(2, 2, rho=0.5)
    bank.centroids[0] = [1.0, 0.0]
    bank.initialized[0] = True
    ema_update(bank, batch_centroids(Tensor(np.array([[0.0, 1.0]])), [0], 2))
    np.testing.assert_allclose(bank.centroids[0], [0.5, 0.5])


def test_first_observation_sets_centroid_outright():
    bank = CentroidBank(2, 2, rho=0.1)
    batch = batch_centroids(Tensor(np.array([[3.0, 4.0]])), [1], 2)
    ema_update(bank, batch)
    np.testing.assert_array_equal(bank.centroids[1], [3.0, 4.0])
    assert bank.initialized.tolist() == [False, True]
    np.testing.assert_array_equal(bank.centroids[0], 0.0)


def test_ema_converges_at_geometric_rate():
    rho = 0.3
    bank = CentroidBank(2, 2, rho=rho)
    bank.centroids[0] = [10.0, -10.0]
    bank.initialized[:] = True
    c = np.array([1.0, 2.0])
    batch = batch_centroids(Tensor(c[None, :]), [0], 2)
    gap = np.linalg.norm(bank.centroids[0] - c)
    for _ in range(20):
        ema_update(bank, batch)
        new_gap = np.linalg.norm(bank.centroids[0] - c)
        assert new_gap == pytest.approx(gap * (1 - rho), rel=1e-9)
        gap = new_gap


def test_pseudo_labels_argmax_examples():
    out = pseudo_labels_argmax(np.array([[0.1, 2.0]]))
    assert out.labels.tolist() == [1]
    want = np.exp(2.0) / (np.exp(2.0) + np.exp(0.1))
    assert out.confidence[0] == pytest.approx(want, abs=1e-10)

    out = pseudo_labels_argmax(np.zeros((3, 4)))
    assert out.labels.tolist() == [0, 0, 0]
    np.testing.assert_allclose(out.confidence, 0.25)

    logits = np.array([[1.0, 3.0, 2.0]])
    shifted = pseudo_labels_argmax(logits + 100.0)
    base = pseudo_labels_argmax(logits)
    assert shifted.labels.tolist() == base.labels.tolist()
    np.testing.assert_allclose(shifted.confidence, base.confidence, atol=1e-12)


def test_pseudo_labels_argmax_agrees_with_predict():
    model = init_model(ModelConfig(input_dim=3, num_classes=4, seed=5))
    x = np.random.default_rng(6).normal(size=(20, 3))
    logits = forward(model, x)
    np.testing.assert_array_equal(pseudo_labels_argmax(logits).labels, predict(model, x))


def test_pseudo_labels_confidence_bounds():
    rng = np.random.default_rng(9)
    out = pseudo_labels_argmax(rng.normal(size=(50, 5)))
    assert (out.confidence >= 1 / 5 - 1e-12).all() and (out.confidence <= 1.0).all()
    assert (out.labels >= 0).all() and (out.labels < 5).all()


def test_kmeans_requires_initialized_bank():
    bank = CentroidBank(3, 3, rho=0.1)
    bank.initialized[0] = True
    with pytest.raises(StrategyUnavailableError, match=r"\[1, 2\]"):
        pseudo_labels_kmeans(np.ones((4, 3)), bank)


def test_kmeans_zero_iters_is_nearest_bank_centroid():
    bank = CentroidBank(2, 2, rho=0.1)
    bank.centroids = np.array([[0.0, 0.0], [10.0, 10.0]])
    bank.initialized[:] = True
    pts = np.array([[1.0, 1.0], [9.0, 9.0], [4.0, 4.0]])
    out = pseudo_labels_kmeans(pts, bank, iters=0)
    assert out.labels.tolist() == [0, 1, 0]
    np.testing.assert_array_equal(out.confidence, 1.0)


def test_kmeans_fixed_point_at_bank_centroids():
    bank = CentroidBank(3, 2, rho=0.1)
    bank.centroids = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    bank.initialized[:] = True
    pts = bank.centroids.copy()
    for iters in (0, 1, 7):
        out = pseudo_labels_kmeans(pts, bank, iters=iters)
        assert out.labels.tolist() == [0, 1, 2]


def test_kmeans_matches_hand_run_lloyd():
    # two obvious groups of three; one Lloyd iteration already converges
    pts = np.array(
        [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [10.0, 10.0], [10.0, 11.0], [11.0, 10.0]]
    )
    bank = CentroidBank(2, 2, rho=0.1)
    bank.centroids = np.array([[0.0, 0.0], [10.0, 10.0]])
    bank.initialized[:] = True
    out = pseudo_labels_kmeans(pts, bank, iters=3)
    assert out.labels.tolist() == [0, 0, 0, 1, 1, 1]
    centers = lloyd_refine(pts, bank.centroids, 3)
    np.testing.assert_allclose(centers[0], [1.0 / 3.0, 1.0 / 3.0], atol=1e-12)
    np.testing.assert_allclose(centers[1], [31.0 / 3.0, 31.0 / 3.0], atol=1e-12)


def test_kmeans_separated_blobs_keep_their_seeds():
    rng = np.random.default_rng(12)
    centers = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
    pts = np.vstack([c + 0.5 * rng.normal(size=(30, 2)) for c in centers])
    truth = np.repeat([0, 1, 2], 30)
    bank = CentroidBank(3, 2, rho=0.1)
    bank.centroids = centers + 1.0
    bank.initialized[:] = True
    out = pseudo_labels_kmeans(pts, bank, iters=25)
    np.testing.assert_array_equal(out.labels, truth)


def test_lloyd_keeps_center_when_cluster_empties():
    pts = np.array([[0.0, 0.0], [0.1, 0.0]])
    centers = np.array([[0.0, 0.0], [100.0, 100.0]])
    refined = lloyd_refine(pts, centers, 5)
    np.testing.assert_array_equal(refined[1], [100.0, 100.0])
    assert nearest_centroid_labels(pts, refined).tolist() == [0, 0]


def test_bank_copy_is_independent():
    bank = CentroidBank(2, 2, rho=0.2)
    bank.centroids[0] = [1.0, 2.0]
    bank.initialized[0] = True
    dup = bank.copy()
    dup.centroids[0] = [9.0, 9.0]
    np.testing.assert_array_equal(bank.centroids[0], [1.0, 2.0])


def test_bank_validation():
    with pytest.raises(ContractError):
        CentroidBank(1, 2, rho=0.1)
    with pytest.raises(ContractError):
        CentroidBank(2, 2, rho=1.5)
