"""Multi-granularity morphological type injection and padded bag batching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError

N_TYPES = 5
MORPH_TYPES = (
    "mesangial proliferative",
    "normal",
    "endocapillary proliferative",
    "crescentic",
    "sclerotic",
)


def _check_types(types: np.ndarray) -> np.ndarray:
    types = np.asarray(types, dtype=np.int64)
    if types.ndim != 1:
        raise ContractError(f"types must be 1-d, got shape {types.shape}")
    if types.size and (types.min() < 0 or types.max() >= N_TYPES):
        raise ContractError(f"type codes must lie in 0..{N_TYPES - 1}")
    return types


def one_hot_types(types) -> np.ndarray:
    types = _check_types(types)
    out = np.zeros((types.size, N_TYPES))
    out[np.arange(types.size), types] = 1.0
    return out


def inject_patch_types(features: np.ndarray, types) -> np.ndarray:
    """Row i becomes [x_i ; one_hot(t_i)]."""
    features = np.asarray(features, dtype=np.float64)
    types = _check_types(types)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ContractError(f"features must be N x d with N >= 1, got {features.shape}")
    if features.shape[0] != types.size:
        raise ContractError(f"{features.shape[0]} feature rows but {types.size} type labels")
    return np.concatenate([features, one_hot_types(types)], axis=1)


def patient_type_distribution(types) -> np.ndarray:
    types = _check_types(types)
    if types.size == 0:
        raise ContractError("type distribution of an empty bag")
    return np.bincount(types, minlength=N_TYPES) / types.size


def inject_patient_types(clinical: np.ndarray, dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != (N_TYPES,) or dist.min() < 0 or abs(dist.sum() - 1.0) > 1e-9:
        raise ContractError("type distribution must be a length-5 simplex vector")
    return np.concatenate([np.asarray(clinical, dtype=np.float64), dist])


@dataclass
class Batch:
    features: np.ndarray  # (B, Nmax, d_patch), zero rows past each bag's end
    mask: np.ndarray  # (B, Nmax) bool
    clinical: np.ndarray  # (B, d_clin)
    labels: np.ndarray  # (B,)
    types: np.ndarray  # (B, Nmax), -1 padding

    def __len__(self) -> int:
        return self.labels.size


class BagDataset:
    """Model-ready bags: injected patch features, injected clinical vectors, labels.

    ``inject_types=False`` reproduces the no-type ablation: widths stay at the
    raw feature and clinical dimensions.
    """

    def __init__(
        self,
        features: Sequence[np.ndarray],
        types: Sequence[np.ndarray],
        clinical: np.ndarray,
        labels: np.ndarray,
        inject_types: bool = True,
    ):
        if not (len(features) == len(types) == len(clinical) == len(labels)):
            raise ContractError("features, types, clinical and labels differ in length")
        self.inject_types = inject_types
        self.types = [_check_types(t) for t in types]
        if inject_types:
            self.bags = [inject_patch_types(x, t) for x, t in zip(features, self.types)]
            self.clinical = np.stack(
                [inject_patient_types(c, patient_type_distribution(t)) for c, t in zip(clinical, self.types)]
            )
        else:
            self.bags = [np.asarray(x, dtype=np.float64) for x in features]
            self.clinical = np.asarray(clinical, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def sizes(self) -> np.ndarray:
        return np.array([b.shape[0] for b in self.bags])

    @property
    def d_patch(self) -> int:
        return self.bags[0].shape[1]

    @property
    def d_clin(self) -> int:
        return self.clinical.shape[1]

    def batch(self, indices) -> Batch:
        indices = np.asarray(indices, dtype=np.int64)
        sizes = [self.bags[i].shape[0] for i in indices]
        n_max = max(sizes)
        feats = np.zeros((indices.size, n_max, self.d_patch))
        mask = np.zeros((indices.size, n_max), dtype=bool)
        types = np.full((indices.size, n_max), -1, dtype=np.int64)
        for row, (i, n) in enumerate(zip(indices, sizes)):
            feats[row, :n] = self.bags[i]
            mask[row, :n] = True
            types[row, :n] = self.types[i]
        return Batch(feats, mask, self.clinical[indices], self.labels[indices], types)

    def subset(self, indices) -> BagDataset:
        indices = np.asarray(indices, dtype=np.int64)
        out = object.__new__(BagDataset)
        out.inject_types = self.inject_types
        out.bags = [self.bags[i] for i in indices]
        out.types = [self.types[i] for i in indices]
        out.clinical = self.clinical[indices]
        out.labels = self.labels[indices]
        return out
