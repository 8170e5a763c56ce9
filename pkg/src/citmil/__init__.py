"""citmil: clinical-injection transformer fusion for multiple-instance prognosis.

A self-contained numpy implementation of a multimodal patient-outcome
pipeline: a small reverse-mode autodiff engine, a tiny ViT tile encoder with
masked-autoencoder pretraining and morphology finetuning, type injection,
transformer fusion with a clinical condition token and gated MIL pooling, the
training recipe, a synthetic cohort generator, and a cross-validation harness
with exact Wilcoxon tests.
"""

from .errors import CitError, ConfigError, ContractError, DimensionError, DomainError, FormatError

__version__ = "0.1.0"

__all__ = [
    "CitError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "FormatError",
]
