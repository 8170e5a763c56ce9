"""Metric suite, exact Wilcoxon signed-rank test, cross-validation and benchmark reports."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .cohort import Cohort, clinical_width, impute_missing, stratified_folds, stratified_holdout
from .config import RunConfig
from .errors import ContractError
from .fusion import attention_by_type, build_model
from .injection import MORPH_TYPES, N_TYPES, BagDataset
from .training import EpochRecord, class_weights, fit, write_history_csv

log = logging.getLogger(__name__)

N_CLASSES = 3
METRICS = ("acc", "w_f1", "m_f1", "auc")
OUTCOME_NAMES = ("CR", "PR", "NR")


# ---------------------------------------------------------------- metrics

def per_class_f1(truth: np.ndarray, pred: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    f1 = np.zeros(n_classes)
    for k in range(n_classes):
        tp = np.sum((pred == k) & (truth == k))
        fp = np.sum((pred == k) & (truth != k))
        fn = np.sum((pred != k) & (truth == k))
        if tp + fn == 0:
            continue  # absent from truth: contributes 0
        f1[k] = 2 * tp / (2 * tp + fp + fn)
    return f1


def ovr_auc(truth: np.ndarray, probs: np.ndarray) -> float:
    """Macro one-vs-rest AUC via the Mann-Whitney rank statistic (ties count one half)."""
    aucs = []
    for k in range(probs.shape[1]):
        pos = truth == k
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            log.warning("class %d has no %s samples; skipped from macro AUC", k, "positive" if n_pos == 0 else "negative")
            continue
        ranks = rankdata(probs[:, k])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    return float(np.mean(aucs)) if aucs else float("nan")


def compute_metrics(truth, pred, probs) -> dict[str, float]:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if truth.size == 0:
        raise ContractError("metrics of an empty prediction set")
    if truth.shape != pred.shape or probs.shape != (truth.size, N_CLASSES):
        raise ContractError(f"shape mismatch: truth {truth.shape}, pred {pred.shape}, probs {probs.shape}")
    if truth.min() < 0 or truth.max() >= N_CLASSES or pred.min() < 0 or pred.max() >= N_CLASSES:
        raise ContractError("labels must lie in 0..2")
    f1 = per_class_f1(truth, pred)
    support = np.bincount(truth, minlength=N_CLASSES)
    return {
        "acc": float(np.mean(truth == pred)),
        "w_f1": float(np.dot(f1, support) / truth.size),
        "m_f1": float(f1.mean()),
        "auc": ovr_auc(truth, probs),
    }


# ---------------------------------------------------------------- Wilcoxon

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of ranks of positive differences
    p_value: float  # one-sided, P(W >= observed) under H0
    n: int  # non-zero differences used
    undefined: bool = False


def wilcoxon_exact(diffs, max_n: int = 20) -> WilcoxonResult:
    """One-sided exact signed-rank test (alternative: differences tend to be positive).

    Zeros are dropped and tied magnitudes get midranks.  The null distribution
    of W over all 2^m equally likely sign patterns is counted exactly: ranks are
    doubled to integers and the subset-sum counts are accumulated one rank at a
    time, which enumerates every sign pattern without materialising them.
    """
    d = np.asarray(diffs, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ContractError("differences must be finite")
    d = d[d != 0]
    m = d.size
    if m == 0:
        return WilcoxonResult(0.0, 1.0, 0, undefined=True)
    if m > max_n:
        raise ContractError(f"exact enumeration limited to {max_n} non-zero differences, got {m}")
    ranks = rankdata(np.abs(d))
    doubled = np.rint(2 * ranks).astype(int)
    w_obs = int(doubled[d > 0].sum())
    counts = [1] + [0] * int(doubled.sum())
    for r in doubled:
        for s in range(len(counts) - 1, r - 1, -1):
            counts[s] += counts[s - r]
    tail = sum(counts[w_obs:])
    return WilcoxonResult(w_obs / 2, tail / 2 ** m, m)


# ---------------------------------------------------------------- cross-validation

@dataclass
class FoldResult:
    seed: int
    fold: int
    model: str
    ids: list[str]
    truth: np.ndarray
    pred: np.ndarray
    probs: np.ndarray
    metrics: dict[str, float]
    best_epoch: int
    n_params: int
    type_attention: np.ndarray | None = None  # (n_test, 5) attention mass per morph type
    history: list[EpochRecord] = field(default_factory=list)


def fold_streams(seed: int, fold: int) -> dict[str, np.random.Generator]:
    """Independent generators for one (seed, fold) run."""
    children = np.random.SeedSequence([seed, fold, 0xCF]).spawn(3)
    return {name: np.random.default_rng(s) for name, s in zip(("split", "init", "train"), children)}


def build_dataset(cohort: Cohort, cfg: RunConfig, train_idx: np.ndarray) -> BagDataset:
    """Model inputs for every patient, imputed with statistics of ``train_idx`` only."""
    if any(r.features is None for r in cohort.records):
        raise ContractError("cohort has no patch features; run extract-features first")
    imputed, _ = impute_missing(cohort, train_idx)
    width = clinical_width(cfg.clinical_mode)
    clinical = imputed.clinical_matrix(cfg.clinical_mode)
    assert clinical.shape[1] == width
    return BagDataset(
        [r.features for r in imputed.records],
        imputed.type_labels(predicted=not cfg.true_types),
        clinical,
        imputed.labels,
        inject_types=cfg.inject_types,
    )


def fold_splits(labels: np.ndarray, cfg: RunConfig, seed: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(train, val, test) index triples for every fold of one seed; shared by all models."""
    folds = stratified_folds(labels, cfg.folds, seed)
    out = []
    for fold in range(cfg.folds):
        test = np.flatnonzero(folds == fold)
        rest = np.flatnonzero(folds != fold)
        keep, held = stratified_holdout(labels[rest], cfg.val_fraction, fold_streams(seed, fold)["split"])
        out.append((rest[keep], rest[held], test))
    return out


def run_fold(cohort: Cohort, model_name: str, cfg: RunConfig, seed: int, fold: int,
             split: tuple[np.ndarray, np.ndarray, np.ndarray]) -> FoldResult:
    train_idx, val_idx, test_idx = split
    data = build_dataset(cohort, cfg, train_idx)
    streams = fold_streams(seed, fold)
    model = build_model(model_name, cfg.fusion_config(), data.d_patch, data.d_clin, streams["init"])
    weights = class_weights(data.labels[train_idx])
    result = fit(model, data.subset(train_idx), data.subset(val_idx), cfg.train_opts(seed), weights, streams["train"])
    test = data.subset(test_idx)
    batch = test.batch(np.arange(len(test)))
    probs, attn = model.predict_proba(batch)
    pred = probs.argmax(axis=1)
    type_attn = None
    if attn is not None:
        type_attn = np.stack([
            np.bincount(t[m], weights=a[m], minlength=N_TYPES) for a, t, m in zip(attn, batch.types, batch.mask)
        ])
    return FoldResult(
        seed, fold, model_name, [cohort.records[i].id for i in test_idx], batch.labels, pred, probs,
        compute_metrics(batch.labels, pred, probs), result.best_epoch, model.count_params(), type_attn,
        result.history,
    )


def run_cv(cohort: Cohort, model_name: str, cfg: RunConfig, seeds=None, k: int | None = None) -> list[FoldResult]:
    """k folds x seeds, each trained from scratch; a failing fold aborts the run."""
    if seeds is not None or k is not None:
        cfg = cfg.replace(seeds=tuple(seeds) if seeds is not None else cfg.seeds, folds=k or cfg.folds)
    labels = cohort.labels
    results = []
    for seed in cfg.seeds:
        for fold, split in enumerate(fold_splits(labels, cfg, seed)):
            res = run_fold(cohort, model_name, cfg, seed, fold, split)
            log.info("%s seed=%d fold=%d acc=%.3f best_epoch=%d", model_name, seed, fold,
                     res.metrics["acc"], res.best_epoch)
            results.append(res)
    return results


# ---------------------------------------------------------------- reports

@dataclass
class BenchmarkReport:
    summary: dict[str, dict[str, tuple[float, float]]]  # model -> metric -> (mean, std)
    wilcoxon: dict[str, WilcoxonResult]  # baseline -> CIT vs baseline on fold accuracies
    attention: np.ndarray | None  # (3, 5)
    attention_counts: np.ndarray | None
    folds: dict[str, list[FoldResult]]
    reference: str = "cit"


def summarize(results: list[FoldResult]) -> dict[str, tuple[float, float]]:
    """Mean and std (ddof=1) over per-seed means of fold metrics."""
    seeds = sorted({r.seed for r in results})
    out = {}
    for metric in METRICS:
        per_seed = np.array([np.mean([r.metrics[metric] for r in results if r.seed == s]) for s in seeds])
        std = float(per_seed.std(ddof=1)) if per_seed.size > 1 else 0.0
        out[metric] = (float(per_seed.mean()), std)
    return out


def paired_accuracy_diffs(a: list[FoldResult], b: list[FoldResult]) -> np.ndarray:
    key_b = {(r.seed, r.fold): r for r in b}
    diffs = []
    for r in a:
        other = key_b[(r.seed, r.fold)]
        if other.ids != r.ids:
            raise ContractError(f"seed {r.seed} fold {r.fold}: test memberships differ between models")
        diffs.append(r.metrics["acc"] - other.metrics["acc"])
    return np.array(diffs)


def aggregate_attention(results: list[FoldResult]) -> tuple[np.ndarray, np.ndarray]:
    rows = [r.type_attention for r in results if r.type_attention is not None]
    if not rows:
        raise ContractError("no attention recorded")
    attn = np.concatenate(rows)
    labels = np.concatenate([r.truth for r in results if r.type_attention is not None])
    # attention_by_type expects per-patch arrays; per-type rows are already patch sums
    types = np.tile(np.arange(N_TYPES), (attn.shape[0], 1))
    return attention_by_type(attn, types, np.ones_like(types, dtype=bool), labels)


def benchmark_suite(cohort: Cohort, cfg: RunConfig, models=None, reference: str = "cit") -> BenchmarkReport:
    models = tuple(models or cfg.models)
    if reference not in models:
        raise ContractError(f"reference model {reference!r} not in {models}")
    folds = {m: run_cv(cohort, m, cfg) for m in models}
    summary = {m: summarize(r) for m, r in folds.items()}
    tests = {m: wilcoxon_exact(paired_accuracy_diffs(folds[reference], folds[m]))
             for m in models if m != reference}
    attn = counts = None
    if folds[reference][0].type_attention is not None:
        attn, counts = aggregate_attention(folds[reference])
    return BenchmarkReport(summary, tests, attn, counts, folds, reference)


def write_folds_csv(results: list[FoldResult], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "seed", "fold", "n_test", "best_epoch", *METRICS])
        for r in results:
            w.writerow([r.model, r.seed, r.fold, len(r.ids), r.best_epoch, *(repr(r.metrics[m]) for m in METRICS)])


def write_predictions_csv(results: list[FoldResult], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "seed", "fold", "id", "truth", "pred", "p_cr", "p_pr", "p_nr"])
        for r in results:
            for pid, t, p, pr in zip(r.ids, r.truth, r.pred, r.probs):
                w.writerow([r.model, r.seed, r.fold, pid, int(t), int(p), *(repr(float(x)) for x in pr)])


def write_report(report: BenchmarkReport, out: str | os.PathLike, histories: bool = True) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "metric", "mean", "std"])
        for model, metrics in report.summary.items():
            for metric, (mean, std) in metrics.items():
                w.writerow([model, metric, repr(mean), repr(std)])
    with open(out / "wilcoxon.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["reference", "baseline", "mean_diff", "statistic", "p_value", "n", "undefined"])
        for model, res in report.wilcoxon.items():
            diffs = paired_accuracy_diffs(report.folds[report.reference], report.folds[model])
            w.writerow([report.reference, model, repr(float(diffs.mean())), res.statistic, repr(res.p_value), res.n,
                        int(res.undefined)])
    if report.attention is not None:
        write_attention_csv(report.attention, out / "attention_by_type.csv")
    all_folds = [r for rs in report.folds.values() for r in rs]
    write_folds_csv(all_folds, out / "folds.csv")
    write_predictions_csv(all_folds, out / "predictions.csv")
    if histories:
        hist = out / "history"
        hist.mkdir(exist_ok=True)
        for r in all_folds:
            write_history_csv(r.history, hist / f"{r.model}_seed{r.seed}_fold{r.fold}.csv")
    return out


def write_attention_csv(table: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["outcome_class", "morph_type", "mean_attention"])
        for y in range(table.shape[0]):
            for t in range(table.shape[1]):
                w.writerow([OUTCOME_NAMES[y], MORPH_TYPES[t], repr(float(table[y, t]))])


def read_folds_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"], r["fold"] = int(r["seed"]), int(r["fold"])
        for m in METRICS:
            r[m] = float(r[m])
    return rows
