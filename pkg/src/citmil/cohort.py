"""Synthetic cohort generation, KDIGO labelling, imputation, folds and on-disk format.

Generative model
----------------
Outcomes are drawn first (exact prior counts in stratified mode).  Every
patient is a bag of 32x32 grayscale glomerulus tiles rendered from a
type-indexed parametric texture:

====  =========================  ==============================================
code  type                       texture
====  =========================  ==============================================
0     mesangial proliferative    ring, grey interior with ~8 bright blobs
1     normal                     thin bright ring, dark open interior
2     endocapillary proliferat.  ring around a densely filled disk
3     crescentic                 ring plus a thick half-annulus crescent
4     sclerotic                  solid bright disk crossed by dark streaks
====  =========================  ==============================================

Signal switches add outcome information:

* ``interaction_signal``: a binary clinical phenotype ``v`` (visible in the
  clinical vector) and a patient lesion kind ``k`` (a fixed-phase grating,
  horizontal or vertical, overlaid on a fraction ``rho`` of tiles).  PR and NR
  patients have ``k == v`` with lesion burden in disjoint bands; CR patients
  have ``k != v`` and broad burden.  Neither modality alone beats the majority
  rate; both together determine the class.
* ``composition_signal``: outcome-dependent morphological type mixture.
* ``clinical_signal``: outcome-dependent means on a block of clinical features.
* ``image_signal``: outcome-dependent tile brightness offset.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .injection import N_TYPES
from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

CR, PR, NR = 0, 1, 2
OUTCOMES = ("CR", "PR", "NR")
PAPER_PRIOR = (49 / 71, 10 / 71, 12 / 71)
D_BASELINE = 25
D_FULL = 59
CLINICAL_MODES = {"0m": D_BASELINE, "0m+3m": D_FULL}

# clinical vector layout
PHENOTYPE_COLS = np.r_[0:6, 25:28]
SIGNAL_COLS = np.r_[6:12, 28:34]

BASE_MIX = np.array([0.20, 0.40, 0.15, 0.10, 0.15])
OUTCOME_MIX = np.array(
    [
        [0.15, 0.55, 0.12, 0.06, 0.12],
        [0.35, 0.25, 0.20, 0.08, 0.12],
        [0.15, 0.15, 0.15, 0.25, 0.30],
    ]
)

# lesion burden bands per outcome under the interaction signal
BURDEN_BANDS = {CR: (0.05, 0.80), PR: (0.25, 0.45), NR: (0.55, 0.85)}

FORMAT_MAGIC = "CITCOHORT"
FORMAT_VERSION = 1


@dataclass
class CohortSpec:
    n_patients: int = 400
    class_prior: tuple[float, float, float] = PAPER_PRIOR
    stratified: bool = True
    bag_mean: float = 31.5
    bag_min: int = 4
    bag_max: int = 96
    bag_dispersion: float = 8.0
    tile_size: int = 32
    interaction_signal: bool = True
    composition_signal: bool = False
    clinical_signal: bool = False
    image_signal: bool = False
    lesion_purity: float = 0.9
    grating_amplitude: float = 0.12
    pixel_noise: float = 0.05
    clinical_noise: float = 0.5
    phenotype_strength: float = 1.0
    clinical_shift: float = 1.0
    brightness_shift: float = 0.06
    composition_concentration: float = 20.0
    missing_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        prior = np.asarray(self.class_prior, dtype=np.float64)
        if prior.shape != (3,) or prior.min() < 0 or abs(prior.sum() - 1.0) > 1e-9:
            raise ConfigError(f"class prior {self.class_prior} must be 3 non-negative values summing to 1")
        if self.bag_mean <= 0 or self.bag_min < 1 or self.bag_max < self.bag_min:
            raise ConfigError("bag size distribution is invalid")
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if not 0 <= self.missing_rate < 1:
            raise ConfigError("missing_rate must lie in [0, 1)")
        self.class_prior = tuple(float(p) for p in prior)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_prior"] = list(self.class_prior)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CohortSpec:
        d = dict(d)
        if "class_prior" in d:
            d["class_prior"] = tuple(d["class_prior"])
        return cls(**d)


@dataclass
class PatientRecord:
    id: str
    outcome: int
    types: np.ndarray  # generation labels (N,)
    clinical: np.ndarray  # (59,), NaN where not observed
    observed: np.ndarray  # (59,) bool
    tiles: np.ndarray | None = None  # (N, H, W)
    features: np.ndarray | None = None  # (N, d_f)
    pred_types: np.ndarray | None = None  # knowledge-path labels (N,)
    latents: dict = field(default_factory=dict)
    labs: dict = field(default_factory=dict)

    @property
    def bag_size(self) -> int:
        return int(self.types.size)


@dataclass
class Cohort:
    spec: CohortSpec
    records: list[PatientRecord]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.outcome for r in self.records], dtype=np.int64)

    @property
    def bag_sizes(self) -> np.ndarray:
        return np.array([r.bag_size for r in self.records])

    def clinical_matrix(self, mode: str = "0m+3m") -> np.ndarray:
        width = clinical_width(mode)
        return np.stack([r.clinical[:width] for r in self.records])

    def type_labels(self, predicted: bool = True) -> list[np.ndarray]:
        if predicted and all(r.pred_types is not None for r in self.records):
            return [r.pred_types for r in self.records]
        return [r.types for r in self.records]


def clinical_width(mode: str) -> int:
    try:
        return CLINICAL_MODES[mode]
    except KeyError:
        raise ConfigError(f"clinical mode must be one of {sorted(CLINICAL_MODES)}, got {mode!r}") from None


# ---------------------------------------------------------------- KDIGO

@dataclass(frozen=True)
class KdigoThresholds:
    norm_threshold: float = 0.5
    stable_band: float = 0.25
    reduction: float = 0.5


def kdigo_label(proteinuria_0m: float, proteinuria_12m: float, creatinine_0m: float,
                creatinine_12m: float, thresholds: KdigoThresholds = KdigoThresholds()) -> int:
    """CR: normalised proteinuria with stable creatinine; PR: >= 50% proteinuria reduction; else NR."""
    values = (proteinuria_0m, proteinuria_12m, creatinine_0m, creatinine_12m)
    if any(not np.isfinite(v) or v <= 0 for v in values):
        raise ContractError(f"KDIGO measurements must be positive, got {values}")
    stable = abs(creatinine_12m / creatinine_0m - 1.0) <= thresholds.stable_band
    if proteinuria_12m < thresholds.norm_threshold and stable:
        return CR
    if proteinuria_12m <= thresholds.reduction * proteinuria_0m:
        return PR
    return NR


def _sample_labs(outcome: int, rng: np.random.Generator) -> dict:
    """Draw 0m/12m proteinuria and creatinine consistent with ``outcome`` under KDIGO rules."""
    while True:
        p0 = float(rng.lognormal(np.log(3.0), 0.4))
        c0 = float(rng.lognormal(np.log(60.0), 0.2))
        if outcome == CR:
            p12 = float(rng.uniform(0.05, 0.5))
            c12 = c0 * float(rng.uniform(0.85, 1.15))
        elif outcome == PR:
            p12 = float(rng.uniform(0.05, 0.5) * p0)
            c12 = c0 * float(rng.uniform(0.8, 1.4))
        else:
            p12 = float(rng.uniform(0.55 * p0, 1.2 * p0))
            c12 = c0 * float(rng.uniform(0.9, 1.8))
        if p12 > 0 and kdigo_label(p0, p12, c0, c12) == outcome:
            return {"proteinuria_0m": p0, "proteinuria_12m": p12, "creatinine_0m": c0, "creatinine_12m": c12}


# ---------------------------------------------------------------- tiles

def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:size, 0:size].astype(np.float64)


def render_tile(morph_type: int, rng: np.random.Generator, size: int = 32, lesion_kind: int | None = None,
                grating_amplitude: float = 0.12, brightness: float = 0.0, noise: float = 0.05) -> np.ndarray:
    """One grayscale glomerulus tile in [0, 1]."""
    yy, xx = _grid(size)
    cy, cx = size / 2 + rng.uniform(-2, 2, size=2)
    radius = size * rng.uniform(0.28, 0.36)
    dist = np.hypot(yy - cy, xx - cx)
    angle = np.arctan2(yy - cy, xx - cx)
    img = np.full((size, size), 0.15)
    inside = dist < radius

    def ring(thickness: float, level: float) -> None:
        img[np.abs(dist - radius) < thickness] = level

    def blobs(count: int, amp: float, spread: float) -> None:
        for _ in range(count):
            r = radius * 0.7 * np.sqrt(rng.uniform())
            t = rng.uniform(0, 2 * np.pi)
            by, bx = cy + r * np.sin(t), cx + r * np.cos(t)
            img[:] += amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * spread ** 2))

    if morph_type == 0:  # mesangial proliferative
        img[inside] = 0.35
        ring(1.5, 0.7)
        blobs(8, 0.4, 1.2)
    elif morph_type == 1:  # normal
        img[inside] = 0.22
        ring(1.0, 0.8)
        blobs(2, 0.2, 1.0)
    elif morph_type == 2:  # endocapillary proliferative
        img[inside] = 0.6
        ring(1.5, 0.75)
        blobs(3, 0.15, 2.5)
    elif morph_type == 3:  # crescentic
        img[inside] = 0.3
        ring(1.0, 0.7)
        facing = rng.uniform(-np.pi, np.pi)
        half = np.abs(np.angle(np.exp(1j * (angle - facing)))) < np.pi / 2
        img[(dist > radius - 5.0) & (dist < radius + 1.0) & half] = 0.9
    elif morph_type == 4:  # sclerotic
        img[inside] = 0.8
        theta = rng.uniform(0, np.pi)
        for offset in rng.uniform(-radius * 0.6, radius * 0.6, size=2):
            along = (yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta) - offset
            img[(np.abs(along) < 1.0) & inside] = 0.45
    else:
        raise ContractError(f"unknown morph type {morph_type}")

    if lesion_kind is not None:
        axis = yy if lesion_kind == 0 else xx
        img += grating_amplitude * np.cos(2 * np.pi * axis / 4.0)
    img += brightness + noise * rng.normal(size=(size, size))
    return np.clip(img, 0.0, 1.0)


def generate_tile_set(n: int, seed: int, size: int = 32, lesions: bool = True,
                      noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Balanced labelled tiles (n // 5 per type, remainder spread from type 0)."""
    if n < 1:
        raise ContractError("tile set needs n >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x711E]))
    types = np.arange(n) % N_TYPES
    rng.shuffle(types)
    tiles = np.empty((n, size, size))
    for i, t in enumerate(types):
        kind = int(rng.integers(2)) if lesions and rng.uniform() < 0.4 else None
        tiles[i] = render_tile(int(t), rng, size, kind, noise=noise)
    return tiles, types.astype(np.int64)


# ---------------------------------------------------------------- cohort

def _outcome_sequence(spec: CohortSpec, rng: np.random.Generator) -> np.ndarray:
    prior = np.asarray(spec.class_prior)
    if not spec.stratified:
        return rng.choice(3, size=spec.n_patients, p=prior)
    raw = prior * spec.n_patients
    counts = np.floor(raw).astype(int)
    short = spec.n_patients - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    labels = np.repeat(np.arange(3), counts)
    rng.shuffle(labels)
    return labels


def _bag_size(spec: CohortSpec, rng: np.random.Generator) -> int:
    mean_extra = spec.bag_mean - spec.bag_min
    r = spec.bag_dispersion
    n = spec.bag_min + rng.negative_binomial(r, r / (r + mean_extra))
    return int(min(n, spec.bag_max))


def _clinical(spec: CohortSpec, outcome: int, phenotype: int | None, rng: np.random.Generator) -> np.ndarray:
    c = rng.normal(size=D_FULL)
    # mild correlation among nuisance labs
    c[12:25] = 0.6 * c[12:25] + 0.4 * c[12]
    if phenotype is not None:
        c[PHENOTYPE_COLS] = spec.phenotype_strength * (2 * phenotype - 1) + spec.clinical_noise * rng.normal(
            size=PHENOTYPE_COLS.size)
    if spec.clinical_signal:
        c[SIGNAL_COLS] += spec.clinical_shift * outcome
    return c


def generate_cohort(spec: CohortSpec) -> Cohort:
    """Pure function of ``spec`` (including its seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0407]))
    outcomes = _outcome_sequence(spec, rng)
    records = []
    for i, y in enumerate(outcomes):
        y = int(y)
        n = _bag_size(spec, rng)
        mix = OUTCOME_MIX[y] if spec.composition_signal else BASE_MIX
        probs = rng.dirichlet(spec.composition_concentration * mix)
        types = rng.choice(N_TYPES, size=n, p=probs)

        latents: dict = {}
        kinds = np.full(n, -1)
        phenotype = None
        if spec.interaction_signal:
            phenotype = int(rng.integers(2))
            lesion_kind = 1 - phenotype if y == CR else phenotype
            lo, hi = BURDEN_BANDS[y]
            burden = float(rng.uniform(lo, hi))
            has = rng.uniform(size=n) < burden
            pure = rng.uniform(size=n) < spec.lesion_purity
            kinds = np.where(has, np.where(pure, lesion_kind, 1 - lesion_kind), -1)
            latents = {"phenotype": phenotype, "lesion_kind": lesion_kind, "burden": burden,
                       "realised_burden": float(has.mean())}
        brightness = spec.brightness_shift * y if spec.image_signal else 0.0
        tiles = np.empty((n, spec.tile_size, spec.tile_size))
        for j in range(n):
            kind = None if kinds[j] < 0 else int(kinds[j])
            tiles[j] = render_tile(int(types[j]), rng, spec.tile_size, kind, spec.grating_amplitude,
                                   brightness, spec.pixel_noise)

        clinical = _clinical(spec, y, phenotype, rng)
        observed = rng.uniform(size=D_FULL) >= spec.missing_rate
        clinical = np.where(observed, clinical, np.nan)
        records.append(PatientRecord(
            id=f"P{i:04d}", outcome=y, types=types.astype(np.int64), clinical=clinical, observed=observed,
            tiles=tiles, latents=latents, labs=_sample_labs(y, rng),
        ))
    return Cohort(spec, records, {"generator": "citmil.cohort", "format_version": FORMAT_VERSION})


def bayes_accuracy(spec: CohortSpec, modality: str) -> float:
    """Bayes-optimal accuracy of the interaction signal given exact latents.

    ``modality`` is "image" (lesion kind and burden), "clinical" (phenotype) or
    "joint".  Burden densities are piecewise uniform, so the integral of
    max_y prior_y f_y(burden) is exact over the band breakpoints.
    """
    prior = np.asarray(spec.class_prior)
    if modality == "clinical":
        # phenotype is uniform and independent of the outcome
        return float(prior.max())
    if modality == "joint":
        # match flag separates CR; disjoint PR/NR bands separate the rest
        lo_pr, hi_pr = BURDEN_BANDS[PR]
        lo_nr, hi_nr = BURDEN_BANDS[NR]
        if hi_pr > lo_nr:
            raise ConfigError("PR and NR burden bands overlap")
        return 1.0
    if modality != "image":
        raise ContractError(f"unknown modality {modality!r}")
    # lesion kind alone is independent of outcome (phenotype symmetric)
    cuts = sorted({x for band in BURDEN_BANDS.values() for x in band})
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (a + b)
        dens = [prior[y] / (hi - lo) if lo <= mid < hi else 0.0 for y, (lo, hi) in BURDEN_BANDS.items()]
        total += max(dens) * (b - a)
    return float(total)


# ---------------------------------------------------------------- preprocessing

def impute_missing(cohort: Cohort, train_indices) -> tuple[Cohort, np.ndarray]:
    """Fill every unobserved clinical entry with the training-split mean of that feature."""
    train_indices = np.asarray(train_indices, dtype=np.int64)
    clin = np.stack([r.clinical for r in cohort.records])
    train = clin[train_indices]
    observed = ~np.isnan(train)
    empty = np.flatnonzero(observed.sum(axis=0) == 0)
    if empty.size:
        raise ConfigError(f"clinical features {empty.tolist()} have no observed training values")
    fill = np.nansum(train, axis=0) / observed.sum(axis=0)
    records = [
        replace(r, clinical=np.where(np.isnan(r.clinical), fill, r.clinical)) for r in cohort.records
    ]
    return Cohort(cohort.spec, records, dict(cohort.meta)), fill


def stratified_folds(labels, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold id per sample; per class, fold counts differ by at most one."""
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ContractError("need k >= 2 folds")
    if k > labels.size:
        raise ContractError(f"k={k} folds for only {labels.size} samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    folds = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        rng.shuffle(members)
        folds[members] = (offset + np.arange(members.size)) % k
        offset += members.size
    return folds


def stratified_holdout(labels, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split positions into (kept, held-out), holding out round(fraction * n_c) of each class."""
    labels = np.asarray(labels, dtype=np.int64)
    if not 0 < fraction < 1:
        raise ContractError("holdout fraction must lie in (0, 1)")
    held = []
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        held.extend(members[: int(round(fraction * members.size))])
    held = np.sort(np.asarray(held, dtype=np.int64))
    return np.setdiff1d(np.arange(labels.size), held), held


# ---------------------------------------------------------------- persistence

def _record_files(rec: PatientRecord) -> dict[str, np.ndarray]:
    arrays = {"clinical": rec.clinical, "observed": rec.observed.astype(np.float64),
              "types": rec.types.astype(np.float64)}
    if rec.tiles is not None:
        arrays["tiles"] = rec.tiles
    if rec.features is not None:
        arrays["features"] = rec.features
    if rec.pred_types is not None:
        arrays["pred_types"] = rec.pred_types.astype(np.float64)
    return arrays


def save_cohort(cohort: Cohort, path: str | os.PathLike) -> Path:
    """Write manifest.json plus one tensor file per array; replaces ``path`` atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "tensors").mkdir(parents=True)
    patients = []
    for rec in cohort.records:
        files = {}
        for key, arr in _record_files(rec).items():
            name = f"tensors/{rec.id}_{key}.citb"
            write_tensor(tmp / name, arr)
            files[key] = name
        patients.append({"id": rec.id, "outcome": rec.outcome, "bag_size": rec.bag_size,
                         "latents": rec.latents, "labs": rec.labs, "files": files})
    manifest = {"magic": FORMAT_MAGIC, "version": FORMAT_VERSION, "spec": cohort.spec.to_dict(),
                "meta": cohort.meta, "patients": patients}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_cohort(path: str | os.PathLike) -> Cohort:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}/manifest.json: {exc}") from exc
    if manifest.get("magic") != FORMAT_MAGIC:
        raise FormatError(f"{path}: field 'magic' is {manifest.get('magic')!r}, expected {FORMAT_MAGIC!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: field 'version' is {manifest.get('version')!r}, expected {FORMAT_VERSION}")
    records = []
    for p in manifest["patients"]:
        arrays = {key: read_tensor(path / name) for key, name in p["files"].items()}
        types = arrays["types"].astype(np.int64)
        if types.size != p["bag_size"]:
            raise FormatError(f"{p['id']}: field 'bag_size' {p['bag_size']} != {types.size} stored types")
        records.append(PatientRecord(
            id=p["id"], outcome=int(p["outcome"]), types=types, clinical=arrays["clinical"],
            observed=arrays["observed"].astype(bool), tiles=arrays.get("tiles"),
            features=arrays.get("features"),
            pred_types=arrays["pred_types"].astype(np.int64) if "pred_types" in arrays else None,
            latents=p.get("latents", {}), labs=p.get("labs", {}),
        ))
    return Cohort(CohortSpec.from_dict(manifest["spec"]), records, manifest.get("meta", {}))


def write_summary_csv(cohort: Cohort, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "outcome", "bag_size"] + [f"type_{k}" for k in range(N_TYPES)])
        for r in cohort.records:
            w.writerow([r.id, OUTCOMES[r.outcome], r.bag_size] + np.bincount(r.types, minlength=N_TYPES).tolist())
