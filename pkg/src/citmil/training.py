"""Optimisation recipe: weighted, label-smoothed cross-entropy, manifold Mixup on the
patient representation, AdamW with cosine annealing, and patience-based early stopping."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .errors import ConfigError, ContractError, DomainError
from .fusion import FusionModel
from .injection import BagDataset, Batch

log = logging.getLogger(__name__)

N_CLASSES = 3


@dataclass
class TrainOpts:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    max_epochs: int = 500
    patience: int = 50
    mixup_alpha: float = 0.4
    smoothing_eps: float = 0.05
    batch_size: int = 32
    seed: int = 0
    mixup: bool = True

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.mixup_alpha <= 0:
            raise ConfigError("lr and weight_decay must be >= 0, mixup_alpha > 0")
        if not 0 <= self.smoothing_eps < 1:
            raise ConfigError("smoothing_eps must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- loss

def class_weights(labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """Inverse frequency n / (K n_k); an absent class gets the mean of the present weights."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ContractError("class weights of an empty label set")
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    w = np.zeros(n_classes)
    present = counts > 0
    w[present] = labels.size / (n_classes * counts[present])
    if not present.all():
        log.warning("classes %s absent from training labels", np.flatnonzero(~present).tolist())
        w[~present] = w[present].mean()
    return w


def smooth_targets(q: np.ndarray, eps: float) -> np.ndarray:
    return (1.0 - eps) * q + eps / q.shape[-1]


def soft_target_ce(logits: Tensor, weighted_targets: np.ndarray) -> Tensor:
    """mean_i -sum_k T_ik log softmax(logits_i)_k, with class weights folded into T."""
    if not np.all(np.isfinite(logits.data)):
        raise DomainError("non-finite logits")
    b = logits.shape[0]
    logp = ad.log_softmax(logits, axis=-1)
    return ad.scale(ad.sum_(ad.mul(logp, Tensor(weighted_targets))), -1.0 / b)


def smoothed_weighted_ce(logits, y, w, eps: float) -> Tensor:
    """-w_y sum_k q_k log softmax(logits)_k with q = (1-eps) one_hot(y) + eps/K.

    Accepts a single logit vector with an integer target, or a (B, K) batch with
    a (B,) target array (mean over the batch).
    """
    if not 0 <= eps < 1:
        raise ContractError("eps must lie in [0, 1)")
    logits = ad.as_tensor(logits)
    single = logits.ndim == 1
    if single:
        logits = ad.reshape(logits, (1, -1))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    w = np.asarray(w, dtype=np.float64)
    k = logits.shape[1]
    q = smooth_targets(np.eye(k)[y], eps)
    return soft_target_ce(logits, q * w[y][:, None])


def mixup_targets(
    y_a: np.ndarray, y_b: np.ndarray, lam: float, w: np.ndarray, eps: float, k: int = N_CLASSES
) -> np.ndarray:
    """Class-weighted smoothed targets for a mixed sample.

    Equals lam * w_a * q_a + (1 - lam) * w_b * q_b, i.e. the Mixup criterion with
    both components smoothed; with equal weights it is the smoothed q_mix.
    """
    eye = np.eye(k)
    return (lam * w[y_a][:, None] * smooth_targets(eye[y_a], eps)
            + (1.0 - lam) * w[y_b][:, None] * smooth_targets(eye[y_b], eps))


def manifold_mixup(h_a, h_b, y_a, y_b, alpha: float, rng: np.random.Generator | None = None,
                   lam: float | None = None, k: int = N_CLASSES):
    """lam ~ Beta(alpha, alpha); returns (lam h_a + (1-lam) h_b, lam e_a + (1-lam) e_b, lam)."""
    if lam is None:
        if alpha <= 0:
            raise ContractError("mixup alpha must be > 0")
        lam = float(rng.beta(alpha, alpha))
    eye = np.eye(k)
    q = lam * eye[np.asarray(y_a)] + (1.0 - lam) * eye[np.asarray(y_b)]
    if isinstance(h_a, Tensor) or isinstance(h_b, Tensor):
        h = ad.add(ad.scale(h_a, lam), ad.scale(h_b, 1.0 - lam))
    else:
        h = lam * np.asarray(h_a) + (1.0 - lam) * np.asarray(h_b)
    return h, q, lam


# ---------------------------------------------------------------- optimiser

def cosine_lr(t: float, total: float, lr_max: float, lr_min: float = 0.0) -> float:
    if total <= 0:
        raise ContractError("cosine schedule needs total > 0")
    if not 0 <= t <= total:
        raise ContractError(f"epoch {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: ParameterSet, state: AdamWState, lr: float, wd: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """theta <- theta - lr (m_hat / (sqrt(v_hat) + eps)) - lr wd theta, in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise DomainError(f"non-finite gradient in {name} at step {state.t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps) - lr * wd * p.data


# ---------------------------------------------------------------- loop

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    is_best: bool


@dataclass
class FitResult:
    best_epoch: int
    best_val_loss: float
    history: list[EpochRecord]
    state: dict[str, np.ndarray]


def bucketed_batches(sizes: np.ndarray, batch_size: int, rng: np.random.Generator | None,
                     chunk: int = 8) -> list[np.ndarray]:
    """Minibatches of similar bag size to limit padding.

    With ``rng`` the data are shuffled, sorted by size within chunks of
    ``chunk`` batches, and the batch order is shuffled; without it the split is
    a deterministic size-sorted one.
    """
    n = sizes.size
    if rng is None:
        order = np.argsort(sizes, kind="stable")
        return [order[i:i + batch_size] for i in range(0, n, batch_size)]
    order = rng.permutation(n)
    span = batch_size * chunk
    batches = []
    for start in range(0, n, span):
        part = order[start:start + span]
        part = part[np.argsort(sizes[part], kind="stable")]
        batches.extend(part[i:i + batch_size] for i in range(0, part.size, batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def batch_loss(model: FusionModel, batch: Batch, w: np.ndarray, opts: TrainOpts,
               rng: np.random.Generator | None = None, perm=None, lam: float | None = None) -> Tensor:
    """Training criterion for one batch: represent, manifold Mixup at h, head, smoothed weighted CE.

    ``perm`` and ``lam`` are drawn from ``rng`` unless given.
    """
    h, _ = model.represent(batch)
    n = batch.labels.size
    if opts.mixup and n > 1:
        if perm is None:
            perm = rng.permutation(n)
        if lam is None:
            lam = float(rng.beta(opts.mixup_alpha, opts.mixup_alpha))
        h = ad.add(ad.scale(h, lam), ad.scale(ad.getitem(h, perm), 1.0 - lam))
        targets = mixup_targets(batch.labels, batch.labels[perm], lam, w, opts.smoothing_eps)
    else:
        targets = mixup_targets(batch.labels, batch.labels, 1.0, w, opts.smoothing_eps)
    return soft_target_ce(model.head(h), targets)


def evaluate_loss(model: FusionModel, data: BagDataset, w: np.ndarray, batch_size: int = 64) -> float:
    """Weighted cross-entropy (no smoothing, no mixup) averaged over the dataset."""
    total = 0.0
    with ad.no_grad():
        for idx in bucketed_batches(data.sizes, batch_size, None):
            batch = data.batch(idx)
            loss = smoothed_weighted_ce(model.forward(batch), batch.labels, w, 0.0)
            total += loss.item() * idx.size
    return total / len(data)


def fit(model: FusionModel, train: BagDataset, val: BagDataset, opts: TrainOpts,
        weights: np.ndarray | None = None, rng: np.random.Generator | None = None) -> FitResult:
    """Train with early stopping on validation weighted CE; restores the best epoch's params.

    History row 0 records the untrained model and is never selected; training
    epochs are numbered from 1, so the first epoch is always an improvement.
    """
    if len(train) == 0 or len(val) == 0:
        raise ContractError("fit needs non-empty train and validation splits")
    w = class_weights(train.labels) if weights is None else np.asarray(weights)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([opts.seed, 0x6D1B]))
    state = AdamWState()
    params = model.params

    history = [EpochRecord(0, 0.0, evaluate_loss(model, train, w), evaluate_loss(model, val, w), False)]
    best_val, best_epoch, best_state = math.inf, 0, params.state()
    since_best = 0

    for epoch in range(1, opts.max_epochs + 1):
        lr = cosine_lr(epoch - 1, opts.max_epochs, opts.lr)
        running = 0.0
        for idx in bucketed_batches(train.sizes, opts.batch_size, rng):
            batch = train.batch(idx)
            params.zero_grad()
            loss = batch_loss(model, batch, w, opts, rng)
            ad.backward(loss)
            adamw_step(params, state, lr, opts.weight_decay)
            running += loss.item() * idx.size
        val_loss = evaluate_loss(model, val, w)
        improved = val_loss < best_val
        if improved:
            best_val, best_epoch, since_best = val_loss, epoch, 0
            best_state = params.state()
        else:
            since_best += 1
        history.append(EpochRecord(epoch, lr, running / len(train), val_loss, improved))
        if since_best >= opts.patience:
            break

    params.load_state(best_state)
    return FitResult(best_epoch, best_val, history, best_state)


def write_history_csv(history: list[EpochRecord], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_loss", "is_best"])
        for r in history:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss), int(r.is_best)])
