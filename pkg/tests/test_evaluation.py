import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from config.settings import TrainConfig
from core.datagen import Sample
from core.evaluation import (
    ABLATION_COLUMNS,
    EVAL_FILE,
    SWEEP_COLUMNS,
    DegeneratePrototypeError,
    EmptySplitError,
    EvalReport,
    MissingClassError,
    NoSamplesOfClassError,
    PrototypeSet,
    ZeroVectorError,
    class_prototypes,
    confusion_matrix,
    cosine_similarities,
    emit_report,
    evaluate_model,
    indicator,
    load_reports,
    m_metric,
    m_table,
    pca_2d,
    per_class_accuracy,
    prototype_winners,
    top1,
    top_confused_pairs,
)
from core.pipeline import TrainedModel, train
from core.tensornet import Layer, Mlp

from conftest import small_train_config

N_CLASSES = 15


def onehot_samples(labels):
    eye = np.eye(N_CLASSES)
    return [Sample(x=eye[c].copy(), domain="target", y1=0, y2=0, y3=int(c)) for c in labels]


def oracle_model():
    """G1 原样输出 one-hot 输入，G2/G3 输出零，分类器读取 G1 段"""
    g1 = Mlp([Layer(np.eye(N_CLASSES), np.zeros(N_CLASSES), "identity")])
    zero = Mlp([Layer(np.zeros((N_CLASSES, N_CLASSES)), np.zeros(N_CLASSES), "identity")])
    weight = np.hstack([np.eye(N_CLASSES), np.zeros((N_CLASSES, 2 * N_CLASSES))])
    classifier = Mlp([Layer(weight, np.zeros(N_CLASSES), "identity")])
    return TrainedModel([g1, zero, zero.copy()], classifier, TrainConfig(d_feat=N_CLASSES))


def constant_model(c=7):
    zero = Mlp([Layer(np.zeros((2, N_CLASSES)), np.zeros(2), "identity")])
    bias = np.zeros(N_CLASSES)
    bias[c] = 1.0
    classifier = Mlp([Layer(np.zeros((N_CLASSES, 6)), bias, "identity")])
    return TrainedModel([zero, zero.copy(), zero.copy()], classifier, TrainConfig(d_feat=2))


def report(variant, seed, top, study="ablate", use_da=True, lam=1.0, m_rows=()):
    return EvalReport(
        top1=top,
        m_table=list(m_rows),
        metadata={"variant": variant, "seed": seed, "study": study, "use_da": use_da, "mmd_lambda": lam},
    )


def test_top1_constant_prediction():
    balanced = onehot_samples(list(range(N_CLASSES)) * 2)
    assert top1(constant_model(), balanced) == pytest.approx(1 / 15)


def test_top1_oracle_and_empty():
    assert top1(oracle_model(), onehot_samples(range(N_CLASSES))) == 1.0
    with pytest.raises(EmptySplitError):
        top1(oracle_model(), [])


def test_top1_equals_confusion_trace():
    rng = np.random.default_rng(0)
    samples = [
        Sample(x=rng.normal(size=N_CLASSES), domain="target", y1=0, y2=0, y3=int(c))
        for c in rng.integers(0, N_CLASSES, size=40)
    ]
    model = oracle_model()
    preds = model.predict(np.stack([s.x for s in samples]))
    cm = confusion_matrix([s.y3 for s in samples], preds, N_CLASSES)
    assert top1(model, samples) == int(np.trace(cm)) / 40


def test_prototypes_of_single_and_paired_samples():
    model = oracle_model()
    protos = class_prototypes(model, onehot_samples(range(N_CLASSES)))
    np.testing.assert_array_equal(protos.prototypes, model.fuse(np.eye(N_CLASSES)))

    rng = np.random.default_rng(1)
    a = [Sample(x=rng.normal(size=N_CLASSES), domain="source", y1=0, y2=0, y3=c) for c in range(N_CLASSES)]
    b = [Sample(x=rng.normal(size=N_CLASSES), domain="source", y1=0, y2=0, y3=c) for c in range(N_CLASSES)]
    protos = class_prototypes(model, a + b)
    midpoint = (model.fuse(np.stack([s.x for s in a])) + model.fuse(np.stack([s.x for s in b]))) / 2
    np.testing.assert_allclose(protos.prototypes, midpoint, atol=1e-15)


def test_prototypes_match_brute_force_and_ignore_order(small_splits, tree):
    model = train(small_train_config(epochs=1), small_splits, tree)
    reference = small_splits.train_source
    protos = class_prototypes(model, reference)

    fused = model.fuse(np.stack([s.x for s in reference]))
    for c in range(N_CLASSES):
        rows = [i for i, s in enumerate(reference) if s.y3 == c]
        np.testing.assert_allclose(protos.prototypes[c], fused[rows].mean(axis=0), rtol=1e-12)

    shuffled = [reference[i] for i in np.random.default_rng(0).permutation(len(reference))]
    np.testing.assert_allclose(class_prototypes(model, shuffled).prototypes, protos.prototypes, rtol=1e-12)


def test_prototype_errors():
    with pytest.raises(MissingClassError):
        class_prototypes(oracle_model(), onehot_samples(range(N_CLASSES - 1)))
    with pytest.raises(DegeneratePrototypeError):
        class_prototypes(constant_model(), onehot_samples(range(N_CLASSES)))


def test_indicator_cases():
    protos = PrototypeSet(np.eye(3))
    assert indicator(np.array([1.0, 0.0, 0.0]), protos, 0) == 1
    assert indicator(np.array([1.0, 0.0, 0.0]), protos, 1) == 0

    tie = np.array([1.0, 1.0, 0.0])
    assert indicator(tie, protos, 0) == 0
    assert indicator(tie, protos, 1) == 0
    assert prototype_winners(tie[None, :], protos).tolist() == [-1]

    with pytest.raises(ZeroVectorError):
        indicator(np.zeros(3), protos, 0)


def test_indicator_brute_force():
    rng = np.random.default_rng(2)
    protos = PrototypeSet(rng.normal(size=(3, 4)))
    for f in rng.normal(size=(20, 4)):
        sims = [f @ p / (np.linalg.norm(f) * np.linalg.norm(p)) for p in protos.prototypes]
        for i in range(3):
            expected = int(all(sims[i] > sims[j] for j in range(3) if j != i))
            assert indicator(f, protos, i) == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-20, 20))
def test_indicator_scale_invariant(seed, exponent):
    rng = np.random.default_rng(seed)
    protos = PrototypeSet(rng.normal(size=(4, 5)))
    f = rng.normal(size=5)
    for i in range(4):
        assert indicator(f * 2.0**exponent, protos, i) == indicator(f, protos, i)


def test_cosine_similarities_shape():
    protos = PrototypeSet(np.eye(3))
    sims = cosine_similarities(np.array([[2.0, 0.0, 0.0], [0.0, 3.0, 4.0]]), protos)
    np.testing.assert_allclose(sims, [[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]])


def test_m_metric_oracle():
    model = oracle_model()
    samples = onehot_samples(list(range(N_CLASSES)) * 3)
    protos = class_prototypes(model, onehot_samples(range(N_CLASSES)))
    assert m_metric(model, samples, protos, 4, 4) == 1.0
    assert m_metric(model, samples, protos, 4, 5) == 0.0
    assert m_table(model, samples, protos, [(4, 5)]) == {(4, 5): (1.0, 0.0)}
    with pytest.raises(NoSamplesOfClassError):
        m_metric(model, onehot_samples([1, 2]), protos, 4, 4)


def test_m_metric_partition_bound(small_splits, tree):
    model = train(small_train_config(epochs=1), small_splits, tree)
    protos = class_prototypes(model, small_splits.train_source)
    test = small_splits.test_target
    for c1 in range(N_CLASSES):
        values = [m_metric(model, test, protos, c1, c2) for c2 in range(N_CLASSES)]
        assert all(0.0 <= v <= 1.0 for v in values)
        assert sum(values) <= 1.0 + 1e-12


def test_confusion_helpers():
    cm = confusion_matrix([0, 0, 1, 1, 2, 2, 2], [0, 1, 1, 0, 1, 1, 2], 3)
    assert cm.tolist() == [[1, 1, 0], [1, 1, 0], [0, 2, 1]]
    assert per_class_accuracy(cm) == {0: 0.5, 1: 0.5, 2: pytest.approx(1 / 3)}
    assert top_confused_pairs(cm, 2) == [(2, 1, 2), (0, 1, 1)]
    assert top_confused_pairs(np.eye(3, dtype=int), 5) == []


def test_pca_2d():
    rng = np.random.default_rng(3)
    features = rng.normal(size=(30, 6)) * np.array([5.0, 2.0, 0.1, 0.1, 0.1, 0.1])
    points = pca_2d(features)
    assert points.shape == (30, 2)
    np.testing.assert_allclose(points.mean(axis=0), 0.0, atol=1e-12)
    assert points[:, 0].var() > points[:, 1].var()
    np.testing.assert_array_equal(pca_2d(features), points)
    np.testing.assert_allclose(np.abs(pca_2d(-features)), np.abs(points), atol=1e-12)


def test_evaluate_model_is_reproducible(tmp_path, small_splits, tree):
    model = train(small_train_config(), small_splits, tree)
    pairs = [("85080", "6141"), ("3068b", "6564")]
    first = evaluate_model(model, small_splits.train_source, small_splits.test_target, tree, m_pairs=pairs,
                           metadata={"variant": "ours"})
    second = evaluate_model(model, small_splits.train_source, small_splits.test_target, tree, m_pairs=pairs,
                            metadata={"variant": "ours"})

    assert 0.0 <= first.top1 <= 1.0
    assert first.metadata["n_test"] == len(small_splits.test_target)
    assert [(r["c1"], r["c2"]) for r in first.m_table[:2]] == pairs
    assert all(0.0 <= r["m_self"] <= 1.0 and 0.0 <= r["m_confused"] <= 1.0 for r in first.m_table)
    assert len(first.confused_pairs) <= 5

    first.write_json(tmp_path / "a.json")
    second.write_json(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert EvalReport.read_json(tmp_path / "a.json") == first


def test_emit_report_empty(tmp_path):
    written = emit_report([], tmp_path)
    assert len(written) == 6
    for path in written.values():
        assert len(path.read_text(encoding="utf-8").splitlines()) == 1
    assert pd.read_csv(tmp_path / "table_ablation.csv").columns.tolist() == ABLATION_COLUMNS


def test_emit_report_single_run(tmp_path):
    m_rows = [{"c1": "85080", "c2": "6141", "m_self": 0.5, "m_confused": 0.25}]
    emit_report([report("ours", 0, 0.5, study="train", m_rows=m_rows)], tmp_path)
    assert len(pd.read_csv(tmp_path / "table_main.csv")) == 1
    assert len(pd.read_csv(tmp_path / "table_da.csv")) == 1
    assert len(pd.read_csv(tmp_path / "table_m.csv", dtype={"c1": str, "c2": str})) == 1
    assert pd.read_csv(tmp_path / "table_ablation.csv").empty
    assert pd.read_csv(tmp_path / "lambda_sweep.csv").empty


def test_ablation_table_order_and_stats(tmp_path):
    results = [
        report(variant, seed, top)
        for variant, tops in (
            ("ours", (0.7, 0.8)),
            ("baseline_w_middle", (0.6, 0.6)),
            ("baseline", (0.5, 0.7)),
            ("baseline_w_coarse", (0.65, 0.65)),
        )
        for seed, top in enumerate(tops)
    ]
    emit_report(results, tmp_path)
    table = pd.read_csv(tmp_path / "table_ablation.csv")
    assert table["variant"].tolist() == ["baseline", "baseline_w_coarse", "baseline_w_middle", "ours"]
    assert table["levels"].tolist() == ["3-3-3", "1-3-3", "3-2-3", "1-2-3"]
    ours = table.set_index("variant").loc["ours"]
    assert ours["n_seeds"] == 2
    assert ours["top1_mean"] == pytest.approx(0.75)
    assert ours["top1_std"] == pytest.approx(0.05)


def test_lambda_sweep_rows(tmp_path):
    lambdas = (0.2, 0.5, 1.0, 2.0, 4.0)
    results = [
        report(variant, 0, 0.5 + lam / 100, study="sweep", lam=lam)
        for lam in lambdas
        for variant in ("ours", "baseline")
    ]
    emit_report(results, tmp_path)
    table = pd.read_csv(tmp_path / "lambda_sweep.csv")
    assert table.columns.tolist() == SWEEP_COLUMNS
    assert table["lambda"].tolist() == list(lambdas)
    assert table["ours_top1_mean"].tolist() == pytest.approx([0.5 + lam / 100 for lam in lambdas])


def test_load_reports(tmp_path):
    for key, top in (("b-run", 0.2), ("a-run", 0.1)):
        (tmp_path / key).mkdir()
        report("ours", 0, top).write_json(tmp_path / key / EVAL_FILE)
    assert [r.top1 for r in load_reports(tmp_path)] == [0.1, 0.2]


def test_train_and_ablate_runs_are_counted_once(tmp_path):
    """同一种子同时出现在 train 与 ablate 研究中时只计一次，且取 train 的结果"""
    m_rows = [{"c1": "85080", "c2": "6141", "m_self": 0.5, "m_confused": 0.25}]
    results = []
    for seed in range(3):
        for variant in ("ours", "baseline"):
            results.append(report(variant, seed, 0.6, study="train", m_rows=m_rows))
            results.append(report(variant, seed, 0.2, study="ablate", m_rows=m_rows))
            results.append(report(variant, seed, 0.4, study="train", use_da=False))
    results.append(report("baseline_w_coarse", 0, 0.3, study="ablate", m_rows=m_rows))
    emit_report(results, tmp_path)

    main = pd.read_csv(tmp_path / "table_main.csv").set_index("method")
    assert main["n_seeds"].tolist() == [3, 3]
    assert main["top1_mean"].tolist() == pytest.approx([0.6, 0.6])

    da = pd.read_csv(tmp_path / "table_da.csv")
    assert da["n_seeds"].tolist() == [3, 3, 3, 3]

    m = pd.read_csv(tmp_path / "table_m.csv", dtype={"c1": str, "c2": str}).set_index("method")
    assert m.loc["ours", "n_seeds"] == 3
    assert m.loc["baseline_w_coarse", "n_seeds"] == 1

    ablation = pd.read_csv(tmp_path / "table_ablation.csv").set_index("variant")
    assert ablation.loc["ours", "top1_mean"] == pytest.approx(0.2)
