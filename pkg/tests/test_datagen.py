import numpy as np
import pytest

from config.settings import DatagenConfig
from core.datagen import (
    SOURCE,
    TARGET,
    BadConfigError,
    DatasetIOError,
    GenConfig,
    InfeasibleCountsError,
    MaskedLabelAccessError,
    SchemaMismatchError,
    generate,
    load_dataset,
    mixture_centers,
    rotate_blockwise,
    save_dataset,
    split,
    stack_features,
    summary,
)
from core.hierarchy import COARSE, MIDDLE
from core.losses import kernel_bank, median_bandwidth, mmd_loss

from conftest import small_gen_config

FULL_TARGET_COUNTS = (150, 120, 120, 95, 130, 88, 142, 76, 110, 101, 125, 84, 118, 92, 137)


def test_sample_labels_follow_tree(small_samples, tree):
    for s in small_samples:
        assert s.y1 == tree.ancestor(s.y3, COARSE)
        assert s.y2 == tree.ancestor(s.y3, MIDDLE)
        assert s.x.shape == (8,)
        assert np.all(np.isfinite(s.x))


def test_source_then_target_order(small_samples):
    domains = [s.domain for s in small_samples]
    assert domains == [SOURCE] * 90 + [TARGET] * 120


def test_full_scale_source_count(tree):
    cfg = small_gen_config(tree, d_in=2, per_class_source=200, per_class_target=1)
    samples = generate(cfg)
    assert sum(s.domain == SOURCE for s in samples) == 3000


def test_generate_is_deterministic(small_gen_cfg, small_samples):
    assert generate(small_gen_cfg) == small_samples


def test_seed_changes_data(tree, small_samples):
    other = generate(small_gen_config(tree, seed=1))
    assert other != small_samples


def test_no_shift_marginals_match(tree):
    cfg = small_gen_config(tree, d_in=32, per_class_source=40, per_class_target=40,
                           shift_rotation_angle=0.0, shift_translation_norm=0.0)
    samples = generate(cfg)
    rng = np.random.default_rng(0)
    xs = stack_features([s for s in samples if s.domain == SOURCE])
    xt = stack_features([s for s in samples if s.domain == TARGET])
    xs = xs[rng.permutation(len(xs))[:200]]
    xt = xt[rng.permutation(len(xt))[:200]]

    bank = kernel_bank(median_bandwidth(np.vstack([xs, xt])).sigma)
    value, _, _ = mmd_loss(xs, xt, bank)
    assert value < 0.05


def test_shift_moves_target(tree):
    cfg = small_gen_config(tree, shift_rotation_angle=0.0, shift_translation_norm=10.0)
    samples = generate(cfg)
    xs = stack_features([s for s in samples if s.domain == SOURCE])
    xt = stack_features([s for s in samples if s.domain == TARGET])
    shift = xt.mean(axis=0) - xs.mean(axis=0)
    assert np.linalg.norm(shift) > 5.0


def test_mmd_non_decreasing_in_translation_norm(tree):
    """固定种子与批次，源域/目标域的有偏 MMD 随平移范数单调不减"""
    values = []
    for norm in (0.0, 3.0, 6.0):
        cfg = small_gen_config(tree, d_in=32, per_class_source=40, per_class_target=40,
                               coarse_spread=6.0, middle_spread=3.0, fine_spread=1.5, noise_sigma=1.5,
                               shift_rotation_angle=0.35, shift_translation_norm=norm)
        samples = generate(cfg)
        rng = np.random.default_rng(0)
        xs = stack_features([s for s in samples if s.domain == SOURCE])
        xt = stack_features([s for s in samples if s.domain == TARGET])
        xs = xs[rng.permutation(len(xs))[:200]]
        xt = xt[rng.permutation(len(xt))[:200]]
        bank = kernel_bank(median_bandwidth(np.vstack([xs, xt])).sigma)
        values.append(mmd_loss(xs, xt, bank)[0])
    assert values[0] <= values[1] <= values[2]


def test_confusable_pair_is_pulled_together(tree):
    a, b = tree.fine_index("85080"), tree.fine_index("3062b")
    cfg = small_gen_config(tree, d_in=32, confusable_pairs=((a, b, 0.05),))
    fine = mixture_centers(cfg).fine

    pair_dist = np.linalg.norm(fine[a] - fine[b])
    siblings = [
        np.linalg.norm(fine[i] - fine[j])
        for i in range(tree.n_fine)
        for j in range(i + 1, tree.n_fine)
        if tree.fine_to_middle[i] == tree.fine_to_middle[j] and (i, j) != (a, b)
    ]
    assert siblings
    assert pair_dist < min(siblings)


def test_rotate_blockwise():
    x = np.array([[1.0, 0.0, 0.0, 2.0, 5.0]])
    out = rotate_blockwise(x, np.pi / 2)
    np.testing.assert_allclose(out, [[0.0, 1.0, -2.0, 0.0, 5.0]], atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(out), np.linalg.norm(x))


def test_bad_config(tree):
    with pytest.raises(BadConfigError):
        generate(small_gen_config(tree, noise_sigma=0.0))
    with pytest.raises(BadConfigError):
        generate(small_gen_config(tree, confusable_pairs=((0, 1, 1.5),)))
    with pytest.raises(BadConfigError):
        GenConfig.from_settings(DatagenConfig(confusable_pairs=[["85080", "nope", 0.3]]), tree)


def test_full_scale_split_sizes(tree):
    cfg = small_gen_config(tree, d_in=2, per_class_source=1, target_class_counts=FULL_TARGET_COUNTS)
    samples = generate(cfg)
    splits = split(samples, (750, 75), seed=0)
    counts = summary(splits)
    assert counts["target"] == 1688
    assert (counts["train_target"], counts["val_target"], counts["test_target"]) == (750, 75, 863)


def test_desk_split_is_proportional(tree):
    cfg = small_gen_config(tree, d_in=2, per_class_source=1, per_class_target=40)
    splits = split(generate(cfg), (150, 30), seed=3)
    assert len(splits.test_target) == 420
    with splits.train_target.unmasked() as train_target:
        train_classes = np.bincount([s.y3 for s in train_target], minlength=15)
    val_classes = np.bincount([s.y3 for s in splits.val_target], minlength=15)
    assert train_classes.tolist() == [10] * 15
    assert val_classes.tolist() == [2] * 15


def test_zero_counts_put_everything_in_test(small_samples):
    splits = split(small_samples, (0, 0), seed=0)
    assert len(splits.train_target) == 0
    assert splits.val_target == []
    assert len(splits.test_target) == 120


def test_remainder_quota_stays_within_one(small_samples):
    splits = split(small_samples, (37, 11), seed=5)
    with splits.train_target.unmasked() as train_target:
        per_class = np.bincount([s.y3 for s in train_target], minlength=15)
    # 37 * 8 / 120 = 2.47
    assert per_class.sum() == 37
    assert set(per_class.tolist()) <= {2, 3}


def test_splits_partition_target(small_splits, small_samples):
    with small_splits.train_target.unmasked() as train_target:
        parts = list(train_target) + small_splits.val_target + small_splits.test_target
    target = [s for s in small_samples if s.domain == TARGET]
    assert len(parts) == len(target)
    ids = {id(s) for s in parts}
    assert ids == {id(s) for s in target}


def test_infeasible_counts(small_samples):
    with pytest.raises(InfeasibleCountsError):
        split(small_samples, (100, 21), seed=0)
    with pytest.raises(InfeasibleCountsError):
        split(small_samples, (-1, 0), seed=0)


def test_split_seed_changes_membership(small_samples):
    a = split(small_samples, (30, 15), seed=0)
    b = split(small_samples, (30, 15), seed=1)
    assert a.test_target != b.test_target


def test_masked_labels(small_splits):
    masked = small_splits.train_target
    assert masked.features().shape == (30, 8)
    with pytest.raises(MaskedLabelAccessError):
        masked.labels()
    assert masked.label_reads == 1

    with masked.unmasked() as samples:
        assert len(samples) == 30
        assert masked.labels().shape == (30,)
    with pytest.raises(MaskedLabelAccessError):
        masked.labels()
    assert masked.label_reads == 2


def test_dataset_roundtrip(tmp_path, small_splits, tree):
    path = tmp_path / "dataset.csv"
    save_dataset(small_splits, path)
    loaded = load_dataset(path)
    assert loaded == small_splits
    assert loaded.tree() == tree
    assert loaded.meta["counts"] == [30, 15]


def test_dataset_save_is_byte_stable(tmp_path, small_splits):
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    save_dataset(small_splits, first)
    save_dataset(load_dataset(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_dataset_schema_mismatch(tmp_path, small_splits):
    path = tmp_path / "dataset.csv"
    save_dataset(small_splits, path)
    text = path.read_text(encoding="utf-8").replace("hierfuse-dataset v1", "hierfuse-dataset v0", 1)
    path.write_text(text, encoding="utf-8")
    with pytest.raises(SchemaMismatchError):
        load_dataset(path)


def test_dataset_missing_file(tmp_path):
    with pytest.raises(DatasetIOError):
        load_dataset(tmp_path / "missing.csv")
