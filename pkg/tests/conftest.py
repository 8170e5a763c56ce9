from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from citmil.cohort import CohortSpec, generate_cohort
from citmil.cohort import generate_tile_set
from citmil.encoder import VitConfig, extract_features, init_encoder, pretrain_mae
from citmil.injection import BagDataset

settings.register_profile("ci", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def toy_bags(n: int, d: int, rng: np.random.Generator, lo: int = 2, hi: int = 7):
    sizes = rng.integers(lo, hi, size=n)
    feats = [rng.normal(size=(s, d)) for s in sizes]
    types = [rng.integers(0, 5, size=s) for s in sizes]
    return feats, types


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_dataset(rng):
    feats, types = toy_bags(12, 6, rng)
    clin = rng.normal(size=(12, 4))
    labels = np.arange(12) % 3
    return BagDataset(feats, types, clin, labels)


def cheap_featurize(cohort, seed: int = 0):
    """Random-init encoder features and ground-truth types; fast stand-in for the full tile pipeline."""
    cfg = VitConfig(embed_dim=16, layers=1, heads=2, mlp_ratio=2)
    params = init_encoder(cfg, np.random.default_rng(seed)).freeze()
    for r in cohort.records:
        r.features = extract_features(r.tiles, params, cfg)
        r.pred_types = r.types.copy()
    return cohort


@pytest.fixture(scope="session")
def small_cohort():
    return cheap_featurize(generate_cohort(CohortSpec(n_patients=45, seed=3, bag_mean=8, bag_max=16)))


@pytest.fixture(scope="session")
def pretrained_mae_timed():
    """MAE on 200 default synthetic tiles for 30 epochs, with wall time (shared with the acceptance run)."""
    t0 = time.perf_counter()
    tiles, _ = generate_tile_set(200, seed=0)
    res = pretrain_mae(tiles, seed=0)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def pretrained_mae(pretrained_mae_timed):
    return pretrained_mae_timed[0]


# acceptance verdicts, filled by test_acceptance.py and echoed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE[key])
