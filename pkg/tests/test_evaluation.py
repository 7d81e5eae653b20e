"""Harness contracts: fold plans, metric oracles, ANOVA/post-hoc against
scipy, exact t-SNE behavior, the run matrix, and sweep plumbing."""

import dataclasses
import json

import numpy as np
import pytest
from scipy import stats
from sklearn.metrics import f1_score, roc_auc_score, silhouette_score

import somnium.evaluation as ev
from somnium.errors import (ConfigValidation, DegenerateGroups, EmptyClass,
                            EmptyInput, MissingStore, NonFiniteValue,
                            PerplexityTooLarge, SingleClassLabels,
                            TooFewPatients)
from somnium.hmm import HmmFitSpec
from somnium.preprocess import SegmentBatch
from somnium.smate import SmateConfig
from somnium.xcm import XcmConfig

# --- fold plans -------------------------------------------------------------


def patient_set(n0, n1):
    ids = [f"H{i:02d}" for i in range(n0)] + [f"A{i:02d}" for i in range(n1)]
    return ids, np.array([0] * n0 + [1] * n1)


def test_make_folds_ten_patients_tests_two_each():
    ids, labels = patient_set(5, 5)
    plan = ev.make_folds(ids, labels, seed=0)
    assert plan.fold_count == 5
    for fold in plan.folds:
        assert len(fold.test) == 2
        assert len(fold.validation) == 1
        assert len(fold.train) == 7


def test_make_folds_partition_property_many_counts():
    for n0, n1 in [(5, 5), (6, 5), (7, 6), (8, 8), (20, 20), (9, 4)]:
        ids, labels = patient_set(n0, n1)
        for seed in (0, 3):
            plan = ev.make_folds(ids, labels, seed=seed)
            tested = [p for fold in plan.folds for p in fold.test]
            assert sorted(tested) == sorted(ids)       # disjoint + covering
            for fold in plan.folds:
                parts = set(fold.train) | set(fold.validation) \
                    | set(fold.test)
                assert len(fold.train) + len(fold.validation) \
                    + len(fold.test) == len(ids)
                assert parts == set(ids)


def test_make_folds_stratified_and_seven_to_one():
    ids, labels = patient_set(20, 20)
    plan = ev.make_folds(ids, labels, seed=1)
    for fold in plan.folds:
        assert len(fold.test) == 8
        assert sum(p.startswith("H") for p in fold.test) == 4
        assert len(fold.validation) == 4
        assert len(fold.train) == 28


def test_make_folds_deterministic_and_seed_sensitive():
    ids, labels = patient_set(7, 6)
    assert ev.make_folds(ids, labels, 4) == ev.make_folds(ids, labels, 4)
    assert ev.make_folds(ids, labels, 4) != ev.make_folds(ids, labels, 5)


def test_make_folds_preconditions():
    ids, labels = patient_set(5, 4)
    with pytest.raises(TooFewPatients):
        ev.make_folds(ids, labels)
    with pytest.raises(SingleClassLabels):
        ev.make_folds([f"P{i}" for i in range(10)], [0] * 10)


# --- metrics ----------------------------------------------------------------

def test_metrics_perfect_separation():
    labels = np.array([0, 0, 1, 1])
    m = ev.metrics(labels, labels, np.array([0.1, 0.2, 0.8, 0.9]))
    assert m.accuracy == 1.0
    assert m.macro_f1 == 1.0
    assert m.auc == 1.0


def test_metrics_all_tied_scores_auc_half():
    labels = np.array([0, 1, 0, 1, 1])
    assert ev.auc_rank(labels, np.zeros(5)) == 0.5


def test_metrics_handworked_auc():
    # positive-negative pairs: (.9,.8) win, (.9,.2) win, (.4,.8) loss,
    # (.4,.2) win -> 3/4
    labels = np.array([1, 0, 1, 0])
    scores = np.array([0.9, 0.8, 0.4, 0.2])
    assert ev.auc_rank(labels, scores) == 0.75


def test_auc_rank_matches_sklearn_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(6, 40))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.normal(size=n), 1)      # force ties
        assert ev.auc_rank(labels, scores) == \
            pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def test_macro_f1_matches_sklearn():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(4, 30))
        labels = rng.integers(0, 2, size=n)
        predictions = rng.integers(0, 2, size=n)
        mine = ev._macro_f1(labels, predictions)
        ref = f1_score(labels, predictions, labels=[0, 1],
                       average="macro", zero_division=0)
        assert mine == pytest.approx(ref, abs=1e-12)


def test_auc_rank_equals_trapezoid_on_random_cases():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(4, 60))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.normal(size=n), 1)
        points = ev.roc_curve(labels, scores)
        assert abs(ev.auc_rank(labels, scores)
                   - ev.auc_trapezoid(points)) < 1e-9


def test_roc_curve_monotone_with_endpoints():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 2, size=40)
    labels[0], labels[1] = 0, 1
    points = ev.roc_curve(labels, np.round(rng.normal(size=40), 1))
    assert points[0] == (0.0, 0.0)
    assert points[-1] == (1.0, 1.0)
    xs, ys = zip(*points)
    assert all(a <= b for a, b in zip(xs, xs[1:]))
    assert all(a <= b for a, b in zip(ys, ys[1:]))


def test_metrics_single_class_reports_absent_auc():
    labels = np.zeros(4, dtype=int)
    m = ev.metrics(labels, labels, np.arange(4.0))
    assert m.accuracy == 1.0
    assert m.auc is None
    assert m.roc_points == []
    with pytest.raises(SingleClassLabels):
        ev.auc_rank(labels, np.arange(4.0))


def test_spearman_matches_scipy():
    assert ev.spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert ev.spearman([1, 2, 3], [5, 4, 3]) == -1.0
    rng = np.random.default_rng(4)
    for _ in range(30):
        n = int(rng.integers(4, 25))
        x = np.round(rng.normal(size=n), 1)
        y = np.round(rng.normal(size=n), 1)
        ref = stats.spearmanr(x, y).statistic
        if np.isnan(ref):
            continue
        assert ev.spearman(x, y) == pytest.approx(ref, abs=1e-9)


# --- ANOVA and post-hoc -----------------------------------------------------

def test_anova_identical_groups():
    f_stat, p = ev.anova_oneway([[1.0, 2.0, 3.0]] * 3)
    assert f_stat == 0.0
    assert p == 1.0


def test_anova_handworked_oracle():
    f_stat, p = ev.anova_oneway([[1, 2, 3], [2, 3, 4], [3, 4, 5]])
    assert f_stat == 3.0
    assert p == pytest.approx(0.125, abs=1e-9)


def test_anova_matches_scipy_on_random_groups():
    rng = np.random.default_rng(5)
    for _ in range(30):
        groups = [rng.normal(loc=rng.normal(), size=int(rng.integers(3, 12)))
                  for _ in range(int(rng.integers(2, 5)))]
        f_stat, p = ev.anova_oneway(groups)
        ref = stats.f_oneway(*groups)
        assert f_stat == pytest.approx(ref.statistic, rel=1e-10)
        assert p == pytest.approx(ref.pvalue, abs=1e-12)


def test_anova_affine_invariance():
    rng = np.random.default_rng(6)
    groups = [rng.normal(size=8) for _ in range(3)]
    f_base, _ = ev.anova_oneway(groups)
    f_moved, _ = ev.anova_oneway([3.7 * g - 11.0 for g in groups])
    assert f_moved == pytest.approx(f_base, abs=1e-9)


def test_anova_degenerate_and_infinite():
    with pytest.raises(DegenerateGroups):
        ev.anova_oneway([[2.0, 2.0], [2.0, 2.0]])
    f_stat, p = ev.anova_oneway([[1.0, 1.0], [2.0, 2.0]])
    assert np.isinf(f_stat)
    assert p == 0.0
    with pytest.raises(EmptyInput):
        ev.anova_oneway([[1.0, 2.0]])
    with pytest.raises(EmptyInput):
        ev.anova_oneway([[1.0], [2.0]])


def test_welch_matches_scipy():
    rng = np.random.default_rng(7)
    for _ in range(30):
        a = rng.normal(size=int(rng.integers(3, 15)))
        b = rng.normal(loc=0.5, scale=2.0, size=int(rng.integers(3, 15)))
        t, p = ev.welch_t(a, b)
        ref = stats.ttest_ind(a, b, equal_var=False)
        assert t == pytest.approx(ref.statistic, rel=1e-10)
        assert p == pytest.approx(ref.pvalue, abs=1e-12)


def test_posthoc_identical_pair_and_separated_pair():
    same = [1.0, 2.0, 3.0]
    rng = np.random.default_rng(8)
    low = rng.normal(0.0, 0.1, size=5)
    high = rng.normal(10.0, 0.1, size=5)
    table = ev.posthoc_pairwise([same, same, low.tolist(), high.tolist()])
    assert len(table) == 6
    first = table[0]                       # the identical pair (0, 1)
    assert first.raw_p == 1.0
    assert not first.significant
    separated = [t for t in table if (t.group_a, t.group_b) == (2, 3)][0]
    assert separated.significant
    for t in table:
        assert t.corrected_p == min(1.0, t.raw_p * 6)


def test_compare_groups_summary():
    out = ev.compare_groups({"full": [0.9, 0.92, 0.91],
                             "ablated": [0.80, 0.82, 0.81]})
    f_stat, p = ev.anova_oneway([[0.9, 0.92, 0.91], [0.80, 0.82, 0.81]])
    assert out["F"] == f_stat
    assert out["p"] == p
    assert out["significant"] == (p < 0.05)
    assert out["means"]["full"] > out["means"]["ablated"]
    assert len(out["posthoc"]) == 1


# --- t-SNE ------------------------------------------------------------------

def blob_points(seed=0, per=32, dist=20.0, dim=10):
    rng = np.random.default_rng(seed)
    means = np.zeros((3, dim))
    means[1, 0] = dist
    means[2, 1] = dist
    pts = np.concatenate([rng.normal(m, 1.0, size=(per, dim))
                          for m in means])
    labels = np.repeat([0, 1, 2], per)
    return pts, labels


def test_tsne_preconditions():
    with pytest.raises(PerplexityTooLarge):
        ev.tsne(np.zeros((50, 3)), perplexity=30)
    with pytest.raises(EmptyInput):
        ev.tsne(np.zeros((0, 3)))
    bad = np.zeros((95, 3))
    bad[0, 0] = np.nan
    with pytest.raises(NonFiniteValue):
        ev.tsne(bad)


def test_conditional_rows_hit_target_perplexity():
    rng = np.random.default_rng(9)
    pts = rng.normal(size=(100, 5))
    d2 = ev._pairwise_sq(pts)
    target = np.log(30.0)
    for i in range(0, 100, 17):
        row = d2[i, np.arange(100) != i]
        probs = ev._conditional_row(row, target)
        entropy = -float(np.sum(probs[probs > 0]
                                * np.log(probs[probs > 0])))
        assert entropy == pytest.approx(target, abs=1e-3)


def test_joint_probabilities_symmetric_unit_mass():
    pts, _ = blob_points()
    p = ev.joint_probabilities(pts, 30.0)
    assert np.allclose(p, p.T)
    assert p.sum() == pytest.approx(1.0, abs=1e-6)
    assert p.min() >= 1e-12


def test_tsne_blobs_separate_and_kl_descends():
    pts, labels = blob_points()
    coords, kl = ev.tsne(pts, perplexity=30, iterations=1000, seed=0)
    assert coords.shape == (96, 2)
    assert len(kl) == 1000
    assert silhouette_score(coords, labels) > 0.5
    assert kl[-1] < kl[249]


def test_tsne_deterministic():
    pts, _ = blob_points(seed=1)
    a, kl_a = ev.tsne(pts, perplexity=30, iterations=260, seed=3)
    b, kl_b = ev.tsne(pts, perplexity=30, iterations=260, seed=3)
    assert np.array_equal(a, b)
    assert kl_a == kl_b


# --- batch plumbing ---------------------------------------------------------

def toy_batch(n_patients=12, per=6, d=2, t=32, seed=0, labels_of=None):
    rng = np.random.default_rng(seed)
    values, pids, labels = [], [], []
    for p in range(n_patients):
        label = (p % 2) if labels_of is None else labels_of(p)
        shift = 1.0 if label else -1.0
        for _ in range(per):
            values.append(rng.normal(size=(d, t)) + shift)
            pids.append(f"P{p:02d}")
            labels.append(label)
    return SegmentBatch(values=np.stack(values), patient_ids=pids,
                        stage="N2", labels=np.array(labels))


def test_subsample_budget_and_balance():
    batch = toy_batch(n_patients=10, per=8)
    small = ev.subsample_batch(batch, 40)
    assert small.n == 40
    counts = {p: small.patient_ids.count(p) for p in set(small.patient_ids)}
    assert all(c == 4 for c in counts.values())       # proportional
    assert int(np.sum(small.labels == 0)) == 20       # balanced classes
    again = ev.subsample_batch(batch, 40)
    assert np.array_equal(small.values, again.values)
    assert ev.subsample_batch(batch, 100) is batch    # under budget


def test_subsample_uneven_patients():
    batch = toy_batch(n_patients=3, per=5)
    extra = toy_batch(n_patients=1, per=9, seed=5)
    merged = SegmentBatch.concatenate([batch, extra])
    small = ev.subsample_batch(merged, 12)
    assert small.n == 12
    counts = {p: small.patient_ids.count(p) for p in set(small.patient_ids)}
    assert counts["P00"] == 9 * 12 // 24 or counts["P00"] >= 2


def test_fold_batches_split_and_fallback():
    batch = toy_batch()
    fold = ev.Fold(train=("P00", "P01", "P02"), validation=("P03",),
                   test=("P04", "P05"))
    train, val, test = ev.fold_batches(batch, fold)
    assert set(train.patient_ids) == {"P00", "P01", "P02"}
    assert set(val.patient_ids) == {"P03"}
    assert set(test.patient_ids) == {"P04", "P05"}
    orphan = ev.Fold(train=("P00", "P01"), validation=("ABSENT",),
                     test=("P02",))
    train, val, test = ev.fold_batches(batch, orphan)
    assert val is train                                # fallback
    with pytest.raises(EmptyInput):
        ev.fold_batches(batch, ev.Fold(("P00",), ("P01",), ("NOPE",)))


# --- run matrix -------------------------------------------------------------

TINY_SMATE = SmateConfig(t_len=32, d=2, smb_windows=(8, 5, 3),
                         conv_out=(3, 4, 3), pool_size=8, gru_dim=4,
                         fc_out=4, batch=16, epochs=2, lr=1e-3, seed=0)
TINY_XCM = XcmConfig(t_len=32, d=2, window_fraction=0.15, filters=3,
                     batch=16, epochs=2, lr=1e-3, seed=0)
TINY_HMM = HmmFitSpec(n_states=3, max_iterations=40, seed=0)


def tiny_configs():
    return {
        "smate": ev.ModelSpec(kind="smate", config=TINY_SMATE),
        "xcm": ev.ModelSpec(kind="xcm", config=TINY_XCM),
        "hmm": ev.ModelSpec(kind="hmm", config=TINY_HMM),
    }


@pytest.fixture(scope="module")
def toy_setup():
    batch = toy_batch()
    ids = sorted(set(batch.patient_ids))
    labels = [int(batch.labels[batch.patient_ids.index(p)]) for p in ids]
    plan = ev.make_folds(ids, labels, seed=0)
    return batch, plan


def test_model_spec_validation():
    with pytest.raises(ConfigValidation):
        ev.ModelSpec(kind="mystery", config=TINY_SMATE)
    with pytest.raises(ConfigValidation):
        ev.ModelSpec(kind="xcm", config=TINY_SMATE)


def test_run_matrix_counts_and_ranges(toy_setup):
    batch, plan = toy_setup
    report = ev.run_matrix(["xcm", "hmm"], ["N2"], plan,
                           {"N2": batch}, tiny_configs())
    assert len(report.cells) == 10                    # 2 models x 1 x 5
    for cell in report.cells:
        assert 0.0 <= cell.metrics.accuracy <= 1.0
        assert 0.0 <= cell.metrics.macro_f1 <= 1.0
        if cell.metrics.auc is not None:
            assert 0.0 <= cell.metrics.auc <= 1.0
        assert cell.seconds >= 0.0
        assert len(cell.config_hash) == 12
    assert report.mean_accuracy("xcm", "N2") > 0.5    # separable toy data
    summary = report.summary()
    assert {row["model"] for row in summary} == {"xcm", "hmm"}


def test_run_matrix_missing_pieces(toy_setup):
    batch, plan = toy_setup
    with pytest.raises(MissingStore, match="N3"):
        ev.run_matrix(["hmm"], ["N3"], plan, {"N2": batch}, tiny_configs())
    with pytest.raises(ConfigValidation, match="mystery"):
        ev.run_matrix(["mystery"], ["N2"], plan, {"N2": batch},
                      tiny_configs())


def test_run_matrix_propagates_errors_with_cell_coordinates():
    batch = toy_batch(labels_of=lambda p: int(p == 11))
    ids = sorted(set(batch.patient_ids))
    labels = [int(batch.labels[batch.patient_ids.index(p)]) for p in ids]
    plan = ev.make_folds(ids, labels, seed=0)
    with pytest.raises(EmptyClass, match=r"cell \(smate, N2, fold"):
        ev.run_matrix(["smate"], ["N2"], plan, {"N2": batch},
                      tiny_configs())


def test_run_matrix_deterministic(toy_setup):
    batch, plan = toy_setup
    configs = tiny_configs()
    a = ev.run_matrix(["smate", "hmm"], ["N2"], plan, {"N2": batch}, configs)
    b = ev.run_matrix(["smate", "hmm"], ["N2"], plan, {"N2": batch}, configs)
    assert ev.deterministic_digest(a) == ev.deterministic_digest(b)


# --- label-fraction sweep ---------------------------------------------------

def test_sweep_validation(toy_setup):
    batch, plan = toy_setup
    with pytest.raises(ConfigValidation):
        ev.label_fraction_sweep(batch, plan, TINY_SMATE, [0.5, 0.2])
    with pytest.raises(ConfigValidation):
        ev.label_fraction_sweep(batch, plan, TINY_SMATE, [0.2, 1.5])


def test_sweep_full_fraction_matches_supervised_cell(toy_setup):
    batch, plan = toy_setup
    rows = ev.label_fraction_sweep(batch, plan, TINY_SMATE, [1.0])
    assert len(rows) == 5
    spec = ev.ModelSpec(
        kind="smate",
        config=dataclasses.replace(TINY_SMATE, label_fraction=1.0))
    report = ev.run_matrix(["smate"], ["N2"], plan, {"N2": batch},
                           {"smate": spec})
    for row in rows:
        cell = [c for c in report.cells if c.fold == row["fold"]][0]
        assert row["accuracy"] == cell.metrics.accuracy
    means = ev.sweep_summary(rows)
    assert list(means) == [1.0]
    assert means[1.0] == pytest.approx(
        np.mean([r["accuracy"] for r in rows]))


# --- serialization ----------------------------------------------------------

def test_report_serialization_roundtrip(toy_setup):
    batch, plan = toy_setup
    report = ev.run_matrix(["hmm"], ["N2"], plan, {"N2": batch},
                           tiny_configs())
    report.stat_tests.append(ev.compare_groups(
        {"a": [0.9, 0.91, 0.92], "b": [0.7, 0.71, 0.72]}))
    doc = json.loads(ev.report_json(report))
    assert len(doc["cells"]) == 5
    assert doc["aggregates"][0]["model"] == "hmm"
    assert doc["stat_tests"][0]["significant"] in (True, False)

    csv_text = ev.report_csv(report)
    lines = csv_text.strip().split("\n")
    assert lines[0] == "model,stage,fold,metric,value"
    metric_names = {line.split(",")[3] for line in lines[1:]}
    assert "accuracy" in metric_names and "seconds" in metric_names

    roc_text = ev.roc_csv(report)
    assert roc_text.startswith("model,stage,fold,fpr,tpr")

    coords = np.array([[0.0, 1.0], [2.0, 3.0]])
    tsne_text = ev.tsne_csv(coords, [0, 1])
    assert tsne_text == "x,y,label\n0.0,1.0,0\n2.0,3.0,1\n"


def test_digest_ignores_wall_clock(toy_setup):
    batch, plan = toy_setup
    report = ev.run_matrix(["hmm"], ["N2"], plan, {"N2": batch},
                           tiny_configs())
    before = ev.deterministic_digest(report)
    for cell in report.cells:
        cell.seconds += 100.0
    assert ev.deterministic_digest(report) == before
    assert ev.report_json(report) != before
