"""Run configuration: one flat ``key = value`` file covering cohort, encoders, model,
training and the cross-validation protocol.

Defaults follow the reference recipe (d_h=256, patience 50, 500 max epochs).
``configs/benchmark.cfg`` holds the reduced desk-scale settings used by the
benchmark tests.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, fields

from .cohort import CLINICAL_MODES, CohortSpec
from .encoder import EncoderTrainOpts, VitConfig
from .errors import ConfigError
from .fusion import MODELS, FusionConfig
from .training import TrainOpts

SIGNALS = ("interaction", "composition", "clinical", "image", "none")


@dataclass
class RunConfig:
    # cohort
    n_patients: int = 400
    cohort_seed: int = 0
    signal: str = "interaction"
    # tile encoders
    mae_tiles: int = 200
    mae_epochs: int = 30
    morph_tiles: int = 1000
    morph_epochs: int = 20
    encoder_seed: int = 0
    # fusion model
    d_h: int = 256
    layers: int = 2
    heads: int = 4
    mlp_width: int = 256
    attn_dim: int = 128
    # optimisation
    lr: float = 1e-3
    weight_decay: float = 5e-4
    max_epochs: int = 500
    patience: int = 50
    mixup_alpha: float = 0.4
    smoothing_eps: float = 0.05
    batch_size: int = 32
    mixup: bool = True
    # protocol
    folds: int = 5
    seeds: tuple[int, ...] = (0, 1, 2)
    val_fraction: float = 0.2
    inject_types: bool = True
    true_types: bool = False
    clinical_mode: str = "0m+3m"
    models: tuple[str, ...] = ("cit", "late_fusion", "clinical_mlp", "abmil")

    def __post_init__(self):
        if self.signal not in SIGNALS:
            raise ConfigError(f"signal must be one of {SIGNALS}, got {self.signal!r}")
        if self.clinical_mode not in CLINICAL_MODES:
            raise ConfigError(f"clinical_mode must be one of {sorted(CLINICAL_MODES)}")
        unknown = [m for m in self.models if m not in MODELS]
        if unknown:
            raise ConfigError(f"unknown models {unknown}; choose from {sorted(MODELS)}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.folds < 2 or not self.seeds:
            raise ConfigError("need folds >= 2 and at least one seed")
        # validate the derived configs eagerly so errors surface at load time
        self.fusion_config()
        self.train_opts()

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.d_h, self.layers, self.heads, self.mlp_width, self.attn_dim)

    def train_opts(self, seed: int = 0) -> TrainOpts:
        return TrainOpts(self.lr, self.weight_decay, self.max_epochs, self.patience, self.mixup_alpha,
                         self.smoothing_eps, self.batch_size, seed, self.mixup)

    def cohort_spec(self) -> CohortSpec:
        flags = {f"{s}_signal": self.signal == s for s in SIGNALS if s != "none"}
        return CohortSpec(n_patients=self.n_patients, seed=self.cohort_seed, **flags)

    def vit_config(self) -> VitConfig:
        return VitConfig()

    def mae_opts(self) -> EncoderTrainOpts:
        return EncoderTrainOpts(epochs=self.mae_epochs)

    def morph_opts(self) -> EncoderTrainOpts:
        return EncoderTrainOpts(epochs=self.morph_epochs)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            out.append(f"{f.name} = {v}")
        return out


_TYPES = typing.get_type_hints(RunConfig)


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        item = typing.get_args(kind)[0]
        return tuple(item(x.strip()) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def parse_overrides(pairs: dict[str, str]) -> dict:
    out = {}
    for key, raw in pairs.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path: str | os.PathLike | None = None, **overrides) -> RunConfig:
    """Read a flat key=value file (``#`` comments allowed), then apply overrides."""
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                parser.read_string("[run]\n" + fh.read(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        values.update(parse_overrides(dict(parser["run"])))
    values.update(overrides)
    return RunConfig(**values)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(cfg.to_lines()) + "\n")
