"""Tiny ViT tile encoder with two adaptation paths.

* Representation path: masked-autoencoder pretraining, after which the encoder
  is frozen and used to extract mean-pooled patch features.
* Knowledge path: a copy of the pretrained encoder plus a linear head is
  finetuned for 5-way morphological classification; its argmax predictions are
  the discrete type labels used for injection.

Parameter names: ``vit.embed``, ``vit.pos``, ``vit.layer{i}.*``, ``vit.norm``
for the encoder; ``dec.*`` and ``mask_token`` for the MAE decoder;
``morph.head`` for the classifier.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParameterSet, Tensor
from .cohort import stratified_holdout
from .errors import ConfigError, ContractError
from .injection import N_TYPES
from .training import AdamWState, adamw_step, smoothed_weighted_ce

log = logging.getLogger(__name__)


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    decoder_layers: int = 1

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.layers < 1 or self.decoder_layers < 1:
            raise ConfigError("encoder and decoder need at least one layer")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2

    @property
    def mlp_width(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderTrainOpts:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 32
    mask_ratio: float = 0.75
    holdout: float = 0.2

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if not 0 < self.holdout < 1:
            raise ConfigError("holdout must lie in (0, 1)")


# ---------------------------------------------------------------- tokens

def _check_tiles(tiles: np.ndarray, cfg: VitConfig) -> np.ndarray:
    tiles = np.asarray(tiles, dtype=np.float64)
    if tiles.ndim == 2:
        tiles = tiles[None]
    if tiles.ndim != 3:
        raise ContractError(f"tiles must be H x W or B x H x W, got shape {tiles.shape}")
    h, w = tiles.shape[1:]
    if h % cfg.patch_size or w % cfg.patch_size:
        raise ConfigError(f"tile {h}x{w} not divisible by patch size {cfg.patch_size}")
    return tiles


def patchify(tiles: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W) or (H, W) -> (B, T, p*p) flattened patches in row-major patch order."""
    tiles = np.asarray(tiles, dtype=np.float64)
    single = tiles.ndim == 2
    if single:
        tiles = tiles[None]
    b, h, w = tiles.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"tile {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    out = tiles.reshape(b, gh, patch_size, gw, patch_size).transpose(0, 1, 3, 2, 4)
    out = out.reshape(b, gh * gw, patch_size * patch_size)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int) -> np.ndarray:
    patches = np.asarray(patches)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b = patches.shape[0]
    gh, gw = height // patch_size, width // patch_size
    out = patches.reshape(b, gh, gw, patch_size, patch_size).transpose(0, 1, 3, 2, 4).reshape(b, height, width)
    return out[0] if single else out


def mae_mask(n_tokens: int, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly random split into (visible, masked) sorted index arrays, |masked| = round(ratio * T)."""
    if n_tokens < 1:
        raise ContractError("cannot mask an empty token sequence")
    if not 0 < ratio < 1:
        raise ContractError(f"mask ratio must lie in (0, 1), got {ratio}")
    n_masked = int(round(ratio * n_tokens))
    if not 1 <= n_masked <= n_tokens - 1:
        raise ContractError(f"ratio {ratio} masks {n_masked} of {n_tokens} tokens; need 1..T-1")
    perm = rng.permutation(n_tokens)
    return np.sort(perm[n_masked:]), np.sort(perm[:n_masked])


# ---------------------------------------------------------------- params

def init_encoder(cfg: VitConfig, rng: np.random.Generator) -> ParameterSet:
    params = ParameterSet()
    nn.init_linear(params, "vit.embed", cfg.patch_dim, cfg.embed_dim, rng)
    params.add("vit.pos", 0.02 * rng.normal(size=(cfg.n_tokens, cfg.embed_dim)))
    for i in range(cfg.layers):
        nn.init_transformer_layer(params, f"vit.layer{i}", cfg.embed_dim, cfg.mlp_width, rng)
    nn.init_layer_norm(params, "vit.norm", cfg.embed_dim)
    return params


def init_mae(cfg: VitConfig, seed: int = 0) -> ParameterSet:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3AE]))
    params = init_encoder(cfg, rng)
    d = cfg.embed_dim
    nn.init_linear(params, "dec.embed", d, d, rng)
    params.add("dec.pos", 0.02 * rng.normal(size=(cfg.n_tokens, d)))
    params.add("mask_token", 0.02 * rng.normal(size=(d,)))
    for i in range(cfg.decoder_layers):
        nn.init_transformer_layer(params, f"dec.layer{i}", d, cfg.mlp_width, rng)
    nn.init_layer_norm(params, "dec.norm", d)
    nn.init_linear(params, "dec.pixel", d, cfg.patch_dim, rng)
    return params


def encoder_params(params: ParameterSet) -> ParameterSet:
    """Frozen copy of the ``vit.*`` subset."""
    return params.subset("vit.", trainable=False)


# ---------------------------------------------------------------- forward

def _embed(patches: np.ndarray, params: ParameterSet) -> Tensor:
    return ad.add(nn.linear(Tensor(patches), params, "vit.embed"), params["vit.pos"])


def encode_tokens(x: Tensor, params: ParameterSet, cfg: VitConfig) -> Tensor:
    for i in range(cfg.layers):
        x, _ = nn.transformer_layer(x, params, f"vit.layer{i}", cfg.heads)
    return nn.layer_norm(x, params, "vit.norm")


def _gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """table (T, d) indexed per batch row by idx (B, k) -> (B, k, d)."""
    b = idx.shape[0]
    return ad.gather(ad.broadcast_to(table, (b,) + table.shape), idx)


def mae_predict(tiles: np.ndarray, params: ParameterSet, cfg: VitConfig, visible: np.ndarray,
                masked: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Reconstructed masked patches (B, M, p*p) and their targets.

    The encoder sees only the visible tokens.  The decoder sees the encoded
    visible tokens plus one mask token per masked position, each carrying its
    decoder positional embedding; the decoder has no other notion of order so
    the concatenation order is immaterial.
    """
    tiles = _check_tiles(tiles, cfg)
    patches = patchify(tiles, cfg.patch_size)
    b = patches.shape[0]
    tokens = _embed(patches, params)
    enc = encode_tokens(ad.gather(tokens, visible), params, cfg)
    vis = ad.add(nn.linear(enc, params, "dec.embed"), _gather_rows(params["dec.pos"], visible))
    msk = ad.add(_gather_rows(params["dec.pos"], masked), params["mask_token"])
    x = ad.concat([vis, msk], axis=1)
    for i in range(cfg.decoder_layers):
        x, _ = nn.transformer_layer(x, params, f"dec.layer{i}", cfg.heads)
    x = nn.layer_norm(x, params, "dec.norm")
    n_vis = visible.shape[1]
    pred = nn.linear(ad.getitem(x, (slice(None), slice(n_vis, None))), params, "dec.pixel")
    target = np.take_along_axis(patches, masked[:, :, None], axis=1)
    assert pred.shape == target.shape == (b, masked.shape[1], cfg.patch_dim)
    return pred, target


def masked_mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over masked patches (and their pixels) only."""
    diff = ad.sub(pred, Tensor(target))
    return ad.mean(ad.mul(diff, diff))


def draw_masks(batch: int, cfg: VitConfig, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    pairs = [mae_mask(cfg.n_tokens, ratio, rng) for _ in range(batch)]
    return np.stack([v for v, _ in pairs]), np.stack([m for _, m in pairs])


def mae_forward_loss(tiles: np.ndarray, cfg: VitConfig, params: ParameterSet, rng: np.random.Generator,
                     ratio: float = 0.75) -> Tensor:
    tiles = _check_tiles(tiles, cfg)
    visible, masked = draw_masks(tiles.shape[0], cfg, ratio, rng)
    pred, target = mae_predict(tiles, params, cfg, visible, masked)
    return masked_mse(pred, target)


# ---------------------------------------------------------------- representation path

@dataclass
class PretrainResult:
    params: ParameterSet  # frozen encoder params (vit.*)
    full: ParameterSet  # encoder + decoder, for reconstruction diagnostics
    loss_curve: list[float] = field(default_factory=list)  # index 0 = untrained
    cfg: VitConfig = field(default_factory=VitConfig)


def evaluate_mae(tiles: np.ndarray, params: ParameterSet, cfg: VitConfig, ratio: float, seed: int) -> float:
    """Masked MSE under a fixed mask draw, so values are comparable across checkpoints."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    with ad.no_grad():
        return mae_forward_loss(tiles, cfg, params, rng, ratio).item()


def pretrain_mae(tiles: np.ndarray, cfg: VitConfig = VitConfig(), opts: EncoderTrainOpts = EncoderTrainOpts(),
                 seed: int = 0) -> PretrainResult:
    tiles = _check_tiles(tiles, cfg)
    if tiles.shape[0] == 0:
        raise ContractError("MAE pretraining needs at least one tile")
    params = init_mae(cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3AF]))
    state = AdamWState()
    curve = [evaluate_mae(tiles, params, cfg, opts.mask_ratio, seed)]
    n = tiles.shape[0]
    for epoch in range(opts.epochs):
        order = rng.permutation(n)
        for start in range(0, n, opts.batch_size):
            idx = order[start:start + opts.batch_size]
            params.zero_grad()
            loss = mae_forward_loss(tiles[idx], cfg, params, rng, opts.mask_ratio)
            ad.backward(loss)
            adamw_step(params, state, opts.lr, opts.weight_decay)
        curve.append(evaluate_mae(tiles, params, cfg, opts.mask_ratio, seed))
        log.debug("mae epoch %d masked mse %.5f", epoch + 1, curve[-1])
    frozen = encoder_params(params)
    return PretrainResult(frozen, params, curve, cfg)


def extract_features(tiles: np.ndarray, params: ParameterSet, cfg: VitConfig = VitConfig(),
                     batch_size: int = 256) -> np.ndarray:
    """Mean-pooled final-layer token embeddings, (B, d_e); records no graph."""
    tiles = _check_tiles(tiles, cfg)
    out = np.empty((tiles.shape[0], cfg.embed_dim))
    with ad.no_grad():
        for start in range(0, tiles.shape[0], batch_size):
            chunk = tiles[start:start + batch_size]
            x = encode_tokens(_embed(patchify(chunk, cfg.patch_size), params), params, cfg)
            out[start:start + batch_size] = x.data.mean(axis=1)
    return out


# ---------------------------------------------------------------- knowledge path

@dataclass
class MorphClassifier:
    params: ParameterSet
    cfg: VitConfig
    accuracy: float  # held-out
    train_idx: np.ndarray
    test_idx: np.ndarray
    loss_curve: list[float] = field(default_factory=list)


def morph_logits(tiles: np.ndarray, params: ParameterSet, cfg: VitConfig) -> Tensor:
    x = encode_tokens(_embed(patchify(_check_tiles(tiles, cfg), cfg.patch_size), params), params, cfg)
    return nn.linear(ad.mean(x, axis=1), params, "morph.head")


def finetune_morph(tiles: np.ndarray, labels, pretrained: ParameterSet, cfg: VitConfig = VitConfig(),
                   opts: EncoderTrainOpts = EncoderTrainOpts(epochs=20), seed: int = 0) -> MorphClassifier:
    """Finetune a copy of the pretrained encoder plus a linear head; ``pretrained`` is untouched."""
    tiles = _check_tiles(tiles, cfg)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size != tiles.shape[0]:
        raise ContractError(f"{tiles.shape[0]} tiles but {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= N_TYPES):
        raise ContractError(f"morph labels must lie in 0..{N_TYPES - 1}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x40F]))
    train_idx, test_idx = stratified_holdout(labels, opts.holdout, rng)
    absent = np.setdiff1d(np.arange(N_TYPES), labels[train_idx])
    if absent.size:
        log.warning("morph classes %s absent from the finetuning split", absent.tolist())

    params = pretrained.copy(trainable=True)
    nn.init_linear(params, "morph.head", cfg.embed_dim, N_TYPES, rng)
    w = np.ones(N_TYPES)
    state = AdamWState()
    curve = []
    for _ in range(opts.epochs):
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, order.size, opts.batch_size):
            idx = order[start:start + opts.batch_size]
            params.zero_grad()
            loss = smoothed_weighted_ce(morph_logits(tiles[idx], params, cfg), labels[idx], w, 0.0)
            ad.backward(loss)
            adamw_step(params, state, opts.lr, opts.weight_decay)
            total += loss.item() * idx.size
        curve.append(total / max(order.size, 1))
    params.freeze()
    clf = MorphClassifier(params, cfg, float("nan"), train_idx, test_idx, curve)
    if test_idx.size:
        clf.accuracy = float(np.mean(classify_morph(tiles[test_idx], clf) == labels[test_idx]))
    return clf


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; exact ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


def classify_morph(tiles: np.ndarray, clf: MorphClassifier, batch_size: int = 256) -> np.ndarray:
    tiles = _check_tiles(tiles, clf.cfg)
    out = np.empty(tiles.shape[0], dtype=np.int64)
    with ad.no_grad():
        for start in range(0, tiles.shape[0], batch_size):
            logits = morph_logits(tiles[start:start + batch_size], clf.params, clf.cfg)
            out[start:start + batch_size] = argmax_lowest(logits.data)
    return out
