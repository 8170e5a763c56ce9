from __future__ import annotations

import itertools
import logging
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import citmil.evaluation as ev
from citmil.cohort import Cohort, CohortSpec, generate_cohort
from citmil.config import RunConfig
from citmil.errors import ContractError
from citmil.evaluation import (
    METRICS,
    build_dataset,
    compute_metrics,
    fold_splits,
    paired_accuracy_diffs,
    read_folds_csv,
    run_cv,
    run_fold,
    summarize,
    wilcoxon_exact,
    write_folds_csv,
)

TINY = dict(d_h=8, heads=2, mlp_width=8, attn_dim=4, max_epochs=3, patience=2, batch_size=16)


# ---------------------------------------------------------------- brute-force metric oracle

def brute_metrics(truth, pred, probs):
    n = len(truth)
    f1, support = [], []
    for k in range(3):
        tp = fp = fn = 0
        for t, p in zip(truth, pred):
            tp += t == k and p == k
            fp += t != k and p == k
            fn += t == k and p != k
        support.append(sum(t == k for t in truth))
        f1.append(0.0 if support[-1] == 0 else 2 * tp / (2 * tp + fp + fn))
    aucs = []
    for k in range(3):
        pos = [probs[i][k] for i in range(n) if truth[i] == k]
        neg = [probs[i][k] for i in range(n) if truth[i] != k]
        if pos and neg:
            wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
            aucs.append(wins / (len(pos) * len(neg)))
    return {
        "acc": sum(t == p for t, p in zip(truth, pred)) / n,
        "w_f1": sum(f * s for f, s in zip(f1, support)) / n,
        "m_f1": sum(f1) / 3,
        "auc": sum(aucs) / len(aucs),
    }


def test_metrics_match_brute_force_on_100_random_sets():
    rng = np.random.default_rng(0)
    for i in range(100):
        n = int(rng.integers(2, 51))
        truth = rng.integers(0, 3, size=n)
        truth[:2] = [0, 1]  # at least two classes so AUC is defined
        probs = rng.dirichlet(np.ones(3), size=n)
        if i % 3 == 0:
            probs = np.round(probs, 1)  # force ties in the rank statistic
        pred = probs.argmax(axis=1) if i % 2 else rng.integers(0, 3, size=n)
        got, ref = compute_metrics(truth, pred, probs), brute_metrics(truth.tolist(), pred.tolist(), probs.tolist())
        for m in METRICS:
            assert abs(got[m] - ref[m]) < 1e-9, (i, m)


def test_metric_examples():
    probs = np.full((3, 3), 0.05) + np.eye(3) * 0.85
    assert compute_metrics([0, 1, 2], [0, 1, 2], probs) == {"acc": 1.0, "w_f1": 1.0, "m_f1": 1.0, "auc": 1.0}
    # class 2 absent from truth contributes F1 = 0 to the macro mean
    m = compute_metrics([0, 1], [0, 1], probs[:2])
    assert m["m_f1"] == pytest.approx(2 / 3) and m["w_f1"] == 1.0


def test_metric_single_class_warns(caplog):
    with caplog.at_level(logging.WARNING):
        m = compute_metrics([0, 0], [0, 1], np.array([[0.6, 0.3, 0.1], [0.2, 0.7, 0.1]]))
    assert np.isnan(m["auc"]) and "skipped" in caplog.text
    with pytest.raises(ContractError):
        compute_metrics([], [], np.zeros((0, 3)))
    with pytest.raises(ContractError):
        compute_metrics([3], [0], np.ones((1, 3)) / 3)


# ---------------------------------------------------------------- Wilcoxon oracle

def enumerate_wilcoxon(diffs):
    d = [x for x in diffs if x != 0]
    mags = sorted(abs(x) for x in d)
    rank = {}
    for v in set(mags):
        idx = [i + 1 for i, m in enumerate(mags) if m == v]
        rank[v] = sum(idx) / len(idx)
    r = [rank[abs(x)] for x in d]
    w_obs = sum(ri for ri, x in zip(r, d) if x > 0)
    hits = sum(1 for signs in itertools.product((0, 1), repeat=len(d))
               if sum(ri for ri, s in zip(r, signs) if s) >= w_obs - 1e-9)
    return w_obs, hits / 2 ** len(d)


@given(st.lists(st.integers(-4, 4), min_size=1, max_size=12))
def test_wilcoxon_matches_enumeration(diffs):
    res = wilcoxon_exact(diffs)
    if all(x == 0 for x in diffs):
        assert res.undefined and res.p_value == 1.0
        return
    w, p = enumerate_wilcoxon(diffs)
    assert res.statistic == w and res.p_value == p


@pytest.mark.parametrize("m", [13, 14, 15])
def test_wilcoxon_matches_enumeration_at_full_size(m):
    diffs = np.random.default_rng(m).normal(size=m).round(1)
    w, p = enumerate_wilcoxon(diffs.tolist())
    res = wilcoxon_exact(diffs)
    assert res.statistic == w and res.p_value == p


def test_wilcoxon_examples():
    assert wilcoxon_exact(np.linspace(0.01, 0.15, 15)).p_value == 2.0 ** -15
    assert wilcoxon_exact([0.1, -0.1]).p_value == 0.75
    assert wilcoxon_exact([1.0]).p_value == 0.5
    zero = wilcoxon_exact([0.0, 0.0])
    assert zero.undefined and zero.p_value == 1.0 and zero.n == 0
    assert wilcoxon_exact([0.0, 0.2, 0.0]).n == 1
    with pytest.raises(ContractError):
        wilcoxon_exact(np.ones(21))
    with pytest.raises(ContractError):
        wilcoxon_exact([np.nan])


# ---------------------------------------------------------------- protocol

@pytest.fixture(scope="module")
def cv_results(small_cohort):
    cfg = RunConfig(**TINY)
    return cfg, run_cv(small_cohort, "cit", cfg)


def test_run_cv_shape_and_partition(cv_results, small_cohort):
    cfg, results = cv_results
    assert len(results) == 15
    ids = [r.id for r in small_cohort.records]
    for seed in cfg.seeds:
        tested = [pid for r in results if r.seed == seed for pid in r.ids]
        assert sorted(tested) == sorted(ids)
    for r in results:
        assert np.allclose(r.probs.sum(axis=1), 1.0, atol=1e-9)
        assert all(0 <= r.metrics[m] <= 1 for m in ("acc", "w_f1", "m_f1"))
        assert r.type_attention.shape == (len(r.ids), 5)
        assert np.allclose(r.type_attention.sum(axis=1), 1.0, atol=1e-6)


def test_run_cv_is_bit_reproducible(cv_results, small_cohort):
    cfg, results = cv_results
    again = run_cv(small_cohort, "cit", cfg)
    for a, b in zip(results, again):
        assert a.ids == b.ids and a.probs.tobytes() == b.probs.tobytes()
        assert [h.val_loss for h in a.history] == [h.val_loss for h in b.history]


def test_folds_are_stratified_and_val_disjoint(small_cohort):
    cfg = RunConfig(**TINY)
    labels = small_cohort.labels
    for seed in cfg.seeds:
        splits = fold_splits(labels, cfg, seed)
        per_fold = np.array([np.bincount(labels[test], minlength=3) for _, _, test in splits])
        assert np.all(per_fold.max(axis=0) - per_fold.min(axis=0) <= 1)
        for train, val, test in splits:
            assert not set(train) & set(val) and not set(train) & set(test) and not set(val) & set(test)
            assert len(train) + len(val) + len(test) == len(labels)
    assert [t.tolist() for *_, t in fold_splits(labels, cfg, 0)] != [t.tolist() for *_, t in fold_splits(labels, cfg, 1)]


def test_models_share_test_memberships(cv_results, small_cohort):
    cfg, cit = cv_results
    mlp = run_cv(small_cohort, "clinical_mlp", cfg)
    assert [(r.seed, r.fold, r.ids) for r in mlp] == [(r.seed, r.fold, r.ids) for r in cit]
    assert paired_accuracy_diffs(cit, mlp).shape == (15,)
    mlp[0].ids = list(reversed(mlp[0].ids))
    with pytest.raises(ContractError):
        paired_accuracy_diffs(cit, mlp)


def _copy_cohort(cohort):
    return Cohort(cohort.spec, [replace(r, clinical=r.clinical.copy()) for r in cohort.records], dict(cohort.meta))


def test_test_fold_mutation_leaves_training_untouched(small_cohort):
    cfg = RunConfig(**TINY)
    split = fold_splits(small_cohort.labels, cfg, 0)[1]
    base = run_fold(small_cohort, "cit", cfg, 0, 1, split)
    mutated = _copy_cohort(small_cohort)
    for i in split[2]:
        r = mutated.records[i]
        r.clinical = np.where(np.isnan(r.clinical), np.nan, r.clinical * 5 + 3)
        r.outcome = (r.outcome + 1) % 3
    other = run_fold(mutated, "cit", cfg, 0, 1, split)
    assert [(h.train_loss, h.val_loss) for h in base.history] == [(h.train_loss, h.val_loss) for h in other.history]


def test_validation_mutation_leaves_weights_and_imputation_untouched(small_cohort, monkeypatch):
    cfg = RunConfig(**TINY)
    train, val, _ = fold_splits(small_cohort.labels, cfg, 0)[0]
    seen = []
    real = ev.class_weights
    monkeypatch.setattr(ev, "class_weights", lambda labels: seen.append(labels.copy()) or real(labels))
    base = run_fold(small_cohort, "cit", cfg, 0, 0, fold_splits(small_cohort.labels, cfg, 0)[0])
    mutated = _copy_cohort(small_cohort)
    for i in val:
        r = mutated.records[i]
        r.clinical = np.where(np.isnan(r.clinical), np.nan, r.clinical + 100)
        r.outcome = 0
    other = run_fold(mutated, "cit", cfg, 0, 0, fold_splits(small_cohort.labels, cfg, 0)[0])
    assert np.array_equal(seen[0], seen[1])
    a = build_dataset(small_cohort, cfg, train)
    b = build_dataset(mutated, cfg, train)
    assert np.array_equal(a.clinical[train], b.clinical[train])
    # training-loss trajectory is a function of training data only
    assert base.history[0].train_loss == other.history[0].train_loss


def test_summary_recomputable_from_folds_csv(cv_results, tmp_path):
    _, results = cv_results
    write_folds_csv(results, tmp_path / "folds.csv")
    rows = read_folds_csv(tmp_path / "folds.csv")
    summary = summarize(results)
    for m in METRICS:
        per_seed = [np.mean([r[m] for r in rows if r["seed"] == s]) for s in (0, 1, 2)]
        assert summary[m][0] == pytest.approx(np.mean(per_seed), abs=1e-12)
        assert summary[m][1] == pytest.approx(np.std(per_seed, ddof=1), abs=1e-12)


def test_run_cv_requires_features():
    cohort = generate_cohort(CohortSpec(n_patients=10, seed=0, bag_mean=3, bag_min=2, bag_max=4))
    with pytest.raises(ContractError, match="features"):
        run_cv(cohort, "cit", RunConfig(**TINY))
