from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import binomtest

from citmil.cohort import (
    BURDEN_BANDS,
    CR,
    NR,
    PR,
    CohortSpec,
    _bag_size,
    bayes_accuracy,
    clinical_width,
    generate_cohort,
    generate_tile_set,
    impute_missing,
    kdigo_label,
    render_tile,
    stratified_folds,
    stratified_holdout,
)
from citmil.config import RunConfig
from citmil.errors import ConfigError, ContractError
from citmil.evaluation import run_cv

from conftest import cheap_featurize

SMALL = dict(bag_mean=6, bag_min=2, bag_max=10)


# ---------------------------------------------------------------- generator

def test_exact_prior_counts_for_replica_size():
    cohort = generate_cohort(CohortSpec(n_patients=71, seed=5, **SMALL))
    assert np.bincount(cohort.labels, minlength=3).tolist() == [49, 10, 12]


def test_generation_is_pure_function_of_spec():
    spec = CohortSpec(n_patients=12, seed=7, **SMALL)
    a, b = generate_cohort(spec), generate_cohort(spec)
    for ra, rb in zip(a.records, b.records):
        assert ra.id == rb.id and ra.outcome == rb.outcome
        assert np.array_equal(ra.tiles, rb.tiles) and np.array_equal(ra.types, rb.types)
        assert np.array_equal(ra.clinical, rb.clinical, equal_nan=True)
    c = generate_cohort(CohortSpec(n_patients=12, seed=8, **SMALL))
    assert not all(np.array_equal(x.types, y.types) for x, y in zip(a.records, c.records))


def test_default_bag_size_mean():
    spec = CohortSpec(seed=1)
    rng = np.random.default_rng(0)
    sizes = np.array([_bag_size(spec, rng) for _ in range(20_000)])
    assert abs(sizes.mean() - 31.5) < 0.3
    assert sizes.min() >= spec.bag_min and sizes.max() <= spec.bag_max


def test_record_layout_and_ranges():
    cohort = generate_cohort(CohortSpec(n_patients=20, seed=2, **SMALL))
    for r in cohort.records:
        assert r.bag_size >= 1 and r.tiles.shape == (r.bag_size, 32, 32)
        assert r.tiles.min() >= 0.0 and r.tiles.max() <= 1.0
        assert r.clinical.shape == (59,) and np.array_equal(np.isnan(r.clinical), ~r.observed)
        assert kdigo_label(**r.labs) == r.outcome
    assert cohort.clinical_matrix("0m").shape == (20, 25)
    assert cohort.clinical_matrix("0m+3m").shape == (20, 59)
    with pytest.raises(ConfigError):
        clinical_width("6m")


def test_interaction_latents_follow_the_declared_rule():
    cohort = generate_cohort(CohortSpec(n_patients=71, seed=4, **SMALL))
    for r in cohort.records:
        lat = r.latents
        matched = lat["lesion_kind"] == lat["phenotype"]
        assert matched == (r.outcome != CR)
        lo, hi = BURDEN_BANDS[r.outcome]
        assert lo <= lat["burden"] < hi


def test_spec_validation():
    with pytest.raises(ConfigError):
        CohortSpec(class_prior=(0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        CohortSpec(bag_mean=0)
    with pytest.raises(ConfigError):
        CohortSpec(n_patients=0)
    spec = CohortSpec(seed=9)
    assert CohortSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("t", range(5))
def test_tiles_stay_in_unit_range(t):
    rng = np.random.default_rng(t)
    for kind in (None, 0, 1):
        tile = render_tile(t, rng, lesion_kind=kind, brightness=0.5)
        assert tile.shape == (32, 32) and tile.min() >= 0 and tile.max() <= 1
    with pytest.raises(ContractError):
        render_tile(5, rng)


def test_tile_set_is_balanced():
    _, types = generate_tile_set(50, seed=0)
    assert np.bincount(types).tolist() == [10] * 5


# ---------------------------------------------------------------- Bayes accuracy

def monte_carlo_image_bayes(prior, n, rng):
    # sample (outcome, burden) from the generative model and classify by the
    # maximum-posterior rule recomputed from scratch
    y = rng.choice(3, size=n, p=prior)
    lo = np.array([BURDEN_BANDS[k][0] for k in range(3)])
    hi = np.array([BURDEN_BANDS[k][1] for k in range(3)])
    burden = rng.uniform(lo[y], hi[y])
    dens = np.where((burden[:, None] >= lo) & (burden[:, None] < hi), prior / (hi - lo), 0.0)
    return np.mean(dens.argmax(axis=1) == y)


def test_bayes_accuracy_matches_monte_carlo():
    spec = CohortSpec()
    mc = monte_carlo_image_bayes(np.asarray(spec.class_prior), 400_000, np.random.default_rng(0))
    assert abs(bayes_accuracy(spec, "image") - mc) < 0.003


def test_single_modality_bayes_below_joint():
    spec = CohortSpec()
    joint = bayes_accuracy(spec, "joint")
    assert bayes_accuracy(spec, "image") < joint and bayes_accuracy(spec, "clinical") < joint
    assert bayes_accuracy(spec, "clinical") == max(spec.class_prior)
    with pytest.raises(ContractError):
        bayes_accuracy(spec, "audio")


def test_no_signal_cohort_is_not_learnable():
    spec = CohortSpec(n_patients=150, seed=11, interaction_signal=False, **SMALL)
    cohort = cheap_featurize(generate_cohort(spec))
    cfg = RunConfig(d_h=8, heads=2, mlp_width=8, attn_dim=4, max_epochs=20, patience=5, seeds=(0,))
    results = run_cv(cohort, "late_fusion", cfg)
    correct = sum(int(np.sum(r.truth == r.pred)) for r in results)
    majority = max(spec.class_prior)
    assert binomtest(correct, len(cohort), majority, alternative="greater").pvalue > 0.05


# ---------------------------------------------------------------- KDIGO

def test_kdigo_examples():
    assert kdigo_label(3.0, 0.2, 60.0, 62.0) == CR
    assert kdigo_label(3.0, 1.4, 60.0, 60.0) == PR
    assert kdigo_label(3.0, 2.0, 60.0, 60.0) == NR
    # normalised proteinuria with unstable creatinine still counts as a reduction
    assert kdigo_label(3.0, 0.2, 60.0, 90.0) == PR
    with pytest.raises(ContractError):
        kdigo_label(0.0, 1.0, 60.0, 60.0)
    with pytest.raises(ContractError):
        kdigo_label(3.0, -1.0, 60.0, 60.0)


positive = st.floats(1e-3, 1e3, allow_nan=False)


@given(positive, positive, positive, positive)
def test_kdigo_branches_exclusive_and_exhaustive(p0, p12, c0, c12):
    cr = p12 < 0.5 and abs(c12 / c0 - 1) <= 0.25
    pr = not cr and p12 <= 0.5 * p0
    nr = not cr and not pr
    assert cr + pr + nr == 1
    assert kdigo_label(p0, p12, c0, c12) == [CR, PR, NR][[cr, pr, nr].index(True)]


# ---------------------------------------------------------------- imputation

def test_impute_examples():
    cohort = generate_cohort(CohortSpec(n_patients=4, seed=0, missing_rate=0.0, **SMALL))
    same, _ = impute_missing(cohort, [0, 1])
    for a, b in zip(cohort.records, same.records):
        assert np.array_equal(a.clinical, b.clinical)
    cohort.records[0].clinical[3] = 1.0
    cohort.records[1].clinical[3] = 3.0
    cohort.records[2].clinical[3] = np.nan
    cohort.records[3].clinical[3] = np.nan
    filled, fill = impute_missing(cohort, [0, 1])
    assert fill[3] == 2.0
    assert filled.records[2].clinical[3] == 2.0 and filled.records[3].clinical[3] == 2.0
    assert np.isnan(cohort.records[2].clinical[3])  # input untouched


def test_impute_ignores_held_out_values():
    cohort = generate_cohort(CohortSpec(n_patients=30, seed=1, missing_rate=0.2, **SMALL))
    train = np.arange(20)
    _, fill = impute_missing(cohort, train)
    for r in cohort.records[20:]:
        r.clinical = np.where(np.isnan(r.clinical), np.nan, r.clinical + 1e6)
    _, fill_mutated = impute_missing(cohort, train)
    assert np.array_equal(fill, fill_mutated)


def test_impute_rejects_fully_missing_feature():
    cohort = generate_cohort(CohortSpec(n_patients=5, seed=0, **SMALL))
    for r in cohort.records[:3]:
        r.clinical[7] = np.nan
    with pytest.raises(ConfigError, match="7"):
        impute_missing(cohort, [0, 1, 2])


# ---------------------------------------------------------------- folds

def test_fold_examples():
    labels = np.repeat([0, 1, 2], [49, 10, 12])
    folds = stratified_folds(labels, 5, seed=0)
    counts = np.array([[np.sum((folds == f) & (labels == c)) for c in range(3)] for f in range(5)])
    assert counts[:, 1].tolist() == [2] * 5
    assert set(counts[:, 0]) <= {9, 10}
    assert np.bincount(folds).size == 5
    with pytest.raises(ContractError):
        stratified_folds(labels[:3], 5)
    with pytest.raises(ContractError):
        stratified_folds(labels, 1)


@given(st.lists(st.integers(0, 2), min_size=5, max_size=120), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_folds_stratify_and_partition(labels, k, seed):
    labels = np.array(labels)
    if k > labels.size:
        return
    folds = stratified_folds(labels, k, seed)
    assert folds.shape == labels.shape and set(folds.tolist()) <= set(range(k))
    for c in np.unique(labels):
        per_fold = np.bincount(folds[labels == c], minlength=k)
        assert per_fold.max() - per_fold.min() <= 1
    assert np.array_equal(stratified_folds(labels, k, seed), folds)


def test_holdout_is_stratified_partition():
    labels = np.repeat([0, 1, 2], [40, 8, 9])
    kept, held = stratified_holdout(labels, 0.2, np.random.default_rng(0))
    assert np.array_equal(np.sort(np.r_[kept, held]), np.arange(labels.size))
    assert np.bincount(labels[held]).tolist() == [8, 2, 2]
