"""Tiles to model inputs: MAE pretraining on cohort tiles, morphology finetuning on a
labelled tile set, then frozen features and predicted types for every patient."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .cohort import Cohort, generate_tile_set
from .encoder import (
    EncoderTrainOpts,
    MorphClassifier,
    PretrainResult,
    VitConfig,
    classify_morph,
    extract_features,
    finetune_morph,
    pretrain_mae,
)
from .errors import ContractError

log = logging.getLogger(__name__)


@dataclass
class TileEncoders:
    pretrained: PretrainResult
    classifier: MorphClassifier


def sample_cohort_tiles(cohort: Cohort, n: int, seed: int) -> np.ndarray:
    """Uniform sample of ``n`` tiles pooled across all patients (without replacement)."""
    if any(r.tiles is None for r in cohort.records):
        raise ContractError("cohort carries no tiles")
    pooled = np.concatenate([r.tiles for r in cohort.records])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3]))
    take = rng.choice(pooled.shape[0], size=min(n, pooled.shape[0]), replace=False)
    return pooled[np.sort(take)]


def train_tile_encoders(cohort: Cohort, mae_tiles: int = 200, morph_tiles: int = 1000,
                        mae_opts: EncoderTrainOpts = EncoderTrainOpts(),
                        morph_opts: EncoderTrainOpts = EncoderTrainOpts(epochs=20),
                        cfg: VitConfig = VitConfig(), seed: int = 0) -> TileEncoders:
    corpus = sample_cohort_tiles(cohort, mae_tiles, seed)
    pre = pretrain_mae(corpus, cfg, mae_opts, seed)
    log.info("MAE masked MSE %.4f -> %.4f", pre.loss_curve[0], pre.loss_curve[-1])
    tiles, labels = generate_tile_set(morph_tiles, seed=seed + 1, size=cfg.image_size)
    clf = finetune_morph(tiles, labels, pre.params, cfg, morph_opts, seed)
    log.info("morph classifier held-out accuracy %.3f", clf.accuracy)
    return TileEncoders(pre, clf)


def featurize_cohort(cohort: Cohort, encoders: TileEncoders) -> Cohort:
    """Copy of ``cohort`` whose records carry frozen features and predicted types."""
    cfg = encoders.pretrained.cfg
    sizes = cohort.bag_sizes
    pooled = np.concatenate([r.tiles for r in cohort.records])
    feats = extract_features(pooled, encoders.pretrained.params, cfg)
    types = classify_morph(pooled, encoders.classifier)
    bounds = np.r_[0, np.cumsum(sizes)]
    records = [
        replace(r, features=feats[a:b], pred_types=types[a:b])
        for r, a, b in zip(cohort.records, bounds[:-1], bounds[1:])
    ]
    meta = dict(cohort.meta)
    meta.update({
        "mae_initial_mse": encoders.pretrained.loss_curve[0],
        "mae_final_mse": encoders.pretrained.loss_curve[-1],
        "morph_accuracy": encoders.classifier.accuracy,
        "type_agreement": float(np.mean(types == np.concatenate([r.types for r in cohort.records]))),
    })
    return Cohort(cohort.spec, records, meta)
