import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from core.hierarchy import LEVELS, MIDDLE
from core.losses import (
    BatchTooSmallError,
    IndexOutOfRangeError,
    KernelBank,
    LabelOutOfRangeError,
    Triplet,
    cross_entropy,
    kernel_bank,
    median_bandwidth,
    mine_all_triplets,
    mine_hard_triplets,
    mmd_loss,
    triplet_loss,
)

seeds = st.integers(0, 2**32 - 1)


def numeric_grad(f, x, eps=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += eps
        minus[idx] -= eps
        grad[idx] = (f(plus) - f(minus)) / (2 * eps)
    return grad


def test_mining_all_labels_equal():
    feats = np.random.default_rng(0).normal(size=(5, 3))
    assert mine_hard_triplets(feats, [2] * 5) == []


def test_mining_four_points():
    feats = np.array([[0.0], [1.0], [10.0], [11.0]])
    triplets = mine_hard_triplets(feats, ["A", "A", "B", "B"])
    assert triplets[0] == Triplet(0, 1, 2)
    assert triplets[1] == Triplet(1, 0, 2)
    assert triplets[2] == Triplet(2, 3, 1)
    assert len(triplets) == 4


def test_mining_skips_anchor_without_positive():
    feats = np.array([[0.0], [1.0], [5.0]])
    assert [t.anchor for t in mine_hard_triplets(feats, [0, 0, 1])] == [0, 1]


def test_mining_ties_take_lowest_index():
    feats = np.array([[0.0], [1.0], [-1.0], [3.0], [-3.0]])
    triplets = mine_hard_triplets(feats, [0, 0, 0, 1, 1])
    assert triplets[0] == Triplet(0, 1, 3)


def test_same_middle_triplet_excluded_at_middle_level(tree):
    fine = [tree.fine_index("85080"), tree.fine_index("3062b"), tree.fine_index("3062b")]
    feats = np.array([[0.0], [1.0], [2.0]])
    assert len(mine_hard_triplets(feats, fine)) == 2
    assert mine_hard_triplets(feats, tree.labels_at_level(fine, MIDDLE)) == []


def test_hard_triplets_are_valid():
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(12, 4))
    labels = rng.integers(0, 3, size=12)
    for t in mine_hard_triplets(feats, labels):
        assert t.anchor != t.positive
        assert labels[t.anchor] == labels[t.positive]
        assert labels[t.anchor] != labels[t.negative]


def brute_force_hard_triplets(features, labels):
    """逐个锚点扫描：最远正样本、最近负样本，距离相同取索引最小者"""
    triplets = []
    n = len(labels)
    for a in range(n):
        best_p, best_q = None, None
        for j in range(n):
            d = math.sqrt(sum((features[a][k] - features[j][k]) ** 2 for k in range(len(features[a]))))
            if j != a and labels[j] == labels[a] and (best_p is None or d > best_p[0]):
                best_p = (d, j)
            if labels[j] != labels[a] and (best_q is None or d < best_q[0]):
                best_q = (d, j)
        if best_p is not None and best_q is not None:
            triplets.append(Triplet(a, best_p[1], best_q[1]))
    return triplets


@pytest.mark.parametrize("level", LEVELS)
def test_mining_matches_brute_force_scan(tree, level):
    rng = np.random.default_rng(level)
    for _ in range(100):
        n = int(rng.integers(1, 13))
        # 小整数坐标使距离精确可比，同时制造大量并列
        feats = rng.integers(-2, 3, size=(n, 2)).astype(float)
        fine = rng.integers(0, tree.n_fine, size=n).tolist()
        labels = tree.labels_at_level(fine, level)
        assert mine_hard_triplets(feats, labels) == brute_force_hard_triplets(feats.tolist(), list(labels))


def test_triplet_terms():
    feats = np.array([[0.0], [0.0], [2.0]])
    loss, grad = triplet_loss(feats, [Triplet(0, 1, 2)], alpha=1.0)
    assert loss == 0.0
    assert not np.any(grad)

    feats = np.zeros((3, 2))
    loss, _ = triplet_loss(feats, [Triplet(0, 1, 2)], alpha=0.3)
    assert loss == pytest.approx(0.3)


def test_triplet_hand_example():
    feats = np.array([[0.0], [1.0], [1.5]])
    triplets = [Triplet(0, 1, 2)]
    loss, grad = triplet_loss(feats, triplets, alpha=1.0)
    assert loss == pytest.approx(0.5)
    np.testing.assert_allclose(grad, [[0.0], [1.0], [-1.0]])
    numeric = numeric_grad(lambda f: triplet_loss(f, triplets, 1.0)[0], feats)
    np.testing.assert_allclose(grad, numeric, atol=1e-6)


def test_triplet_empty_and_out_of_range():
    feats = np.ones((3, 2))
    loss, grad = triplet_loss(feats, [], alpha=0.3)
    assert loss == 0.0 and grad.shape == (3, 2) and not np.any(grad)
    with pytest.raises(IndexOutOfRangeError):
        triplet_loss(feats, [Triplet(0, 1, 3)], alpha=0.3)


def test_triplet_gradient_finite_differences():
    rng = np.random.default_rng(11)
    feats = rng.normal(size=(8, 3))
    labels = [0, 0, 1, 1, 2, 2, 0, 1]
    triplets = mine_all_triplets(feats, labels)
    loss, grad = triplet_loss(feats, triplets, alpha=0.5)
    numeric = numeric_grad(lambda f: triplet_loss(f, triplets, 0.5)[0], feats)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0.0, 2.0))
def test_triplet_loss_nonnegative_and_permutation_invariant(seed, alpha):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(8, 3))
    labels = rng.integers(0, 3, size=8)
    loss, _ = triplet_loss(feats, mine_hard_triplets(feats, labels), alpha)
    assert loss >= 0.0

    perm = rng.permutation(8)
    permuted, _ = triplet_loss(feats[perm], mine_hard_triplets(feats[perm], labels[perm]), alpha)
    assert permuted == pytest.approx(loss, abs=1e-12)


def test_median_bandwidth_single_pair():
    bw = median_bandwidth(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert bw.sigma == pytest.approx(1.0)
    assert not bw.degenerate


def test_median_bandwidth_degenerate():
    bw = median_bandwidth(np.ones((4, 3)))
    assert bw.sigma == 1.0 and bw.degenerate
    with pytest.raises(BatchTooSmallError):
        median_bandwidth(np.ones((1, 3)))


def test_median_bandwidth_brute_force():
    points = np.random.default_rng(3).normal(size=(5, 4))
    sq = [np.sum((points[i] - points[j]) ** 2) for i in range(5) for j in range(i + 1, 5)]
    assert len(sq) == 10
    assert median_bandwidth(points).sigma == pytest.approx(math.sqrt(np.median(sq) / 2))


def test_kernel_bank_scales():
    bank = kernel_bank(2.0)
    assert bank.bandwidths == (0.5, 1.0, 2.0, 4.0, 8.0)
    assert sum(bank.weights) == pytest.approx(1.0)


def test_mmd_identical_batches_is_zero():
    x = np.random.default_rng(0).normal(size=(6, 3))
    value, gs, gt = mmd_loss(x, x, kernel_bank(1.0))
    assert value == 0.0
    np.testing.assert_allclose(gs + gt, 0.0, atol=1e-12)


def test_mmd_batch_too_small():
    with pytest.raises(BatchTooSmallError):
        mmd_loss(np.zeros((1, 2)), np.zeros((1, 2)), kernel_bank(1.0))


def test_mmd_hand_expansion():
    s = np.array([[0.0], [1.0]])
    t = np.array([[2.0], [4.0]])
    bank = KernelBank(bandwidths=(1.0,), weights=(1.0,))
    k = lambda u, v: math.exp(-((u - v) ** 2) / 2)
    expected = (
        (k(0, 0) + k(0, 1) + k(1, 0) + k(1, 1)) / 4
        + (k(2, 2) + k(2, 4) + k(4, 2) + k(4, 4)) / 4
        - 2 * (k(0, 2) + k(0, 4) + k(1, 2) + k(1, 4)) / 4
    )
    value, gs, gt = mmd_loss(s, t, bank)
    assert value == pytest.approx(expected, abs=1e-12)

    np.testing.assert_allclose(gs, numeric_grad(lambda x: mmd_loss(x, t, bank)[0], s), atol=1e-7)
    np.testing.assert_allclose(gt, numeric_grad(lambda x: mmd_loss(s, x, bank)[0], t), atol=1e-7)


def test_mmd_gradient_multi_kernel():
    rng = np.random.default_rng(8)
    s, t = rng.normal(size=(5, 3)), rng.normal(loc=0.5, size=(4, 3))
    bank = kernel_bank(median_bandwidth(np.vstack([s, t])).sigma)
    _, gs, gt = mmd_loss(s, t, bank)
    np.testing.assert_allclose(gs, numeric_grad(lambda x: mmd_loss(x, t, bank)[0], s), atol=1e-7)
    np.testing.assert_allclose(gt, numeric_grad(lambda x: mmd_loss(s, x, bank)[0], t), atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_mmd_nonnegative_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    s, t = rng.normal(size=(5, 2)), rng.normal(size=(7, 2)) + rng.normal()
    bank = kernel_bank(median_bandwidth(np.vstack([s, t])).sigma)
    forward_value = mmd_loss(s, t, bank)[0]
    assert forward_value >= 0.0
    assert mmd_loss(t, s, bank)[0] == pytest.approx(forward_value, abs=1e-12)
    assert mmd_loss(s[::-1], t, bank)[0] == pytest.approx(forward_value, abs=1e-12)


def test_mmd_grows_with_translation():
    rng = np.random.default_rng(2)
    s, t = rng.normal(size=(20, 4)), rng.normal(size=(20, 4))
    direction = np.ones(4) / 2.0
    bank = KernelBank(bandwidths=(2.0,), weights=(1.0,))
    values = [mmd_loss(s, t + norm * direction, bank)[0] for norm in (0.0, 4.0, 16.0)]
    assert values[0] <= values[1] <= values[2]


def test_cross_entropy_uniform_logits():
    loss, grad = cross_entropy(np.zeros((4, 15)), [0, 3, 7, 14])
    assert abs(loss - math.log(15)) < 1e-12
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_cross_entropy_saturated():
    logits = np.zeros((2, 5))
    logits[0, 1] = logits[1, 4] = 1e4
    loss, _ = cross_entropy(logits, [1, 4])
    assert loss < 1e-6


def test_cross_entropy_brute_force():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(3, 4))
    labels = [2, 0, 3]
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(probs[np.arange(3), labels]))

    loss, grad = cross_entropy(logits, labels)
    assert loss == pytest.approx(expected, abs=1e-12)
    numeric = numeric_grad(lambda z: cross_entropy(z, labels)[0], logits)
    np.testing.assert_allclose(grad, numeric, atol=1e-8)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelOutOfRangeError):
        cross_entropy(np.zeros((2, 3)), [0, 3])
