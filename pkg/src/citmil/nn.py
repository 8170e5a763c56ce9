"""Parameter initialisers and layer functions shared by the encoder and fusion models.

Layers are plain functions over a :class:`ParameterSet` and a name prefix, so
one set can hold several sub-networks (``vit.layer0.attn.wq`` etc.).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .errors import ConfigError


def init_linear(params: ParameterSet, name: str, d_in: int, d_out: int, rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(d_in)
    params.add(f"{name}.w", rng.uniform(-bound, bound, size=(d_in, d_out)))
    params.add(f"{name}.b", rng.uniform(-bound, bound, size=(d_out,)))


def linear(x: Tensor, params: ParameterSet, name: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def init_layer_norm(params: ParameterSet, name: str, d: int) -> None:
    params.add(f"{name}.gamma", np.ones(d))
    params.add(f"{name}.beta", np.zeros(d))


def layer_norm(x: Tensor, params: ParameterSet, name: str, eps: float = 1e-5) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"], eps)


def init_attention(params: ParameterSet, name: str, d: int, rng: np.random.Generator) -> None:
    for proj in ("wq", "wk", "wv", "wo"):
        init_linear(params, f"{name}.{proj}", d, d, rng)


def multi_head_attention(
    queries: Tensor,
    keys: Tensor,
    params: ParameterSet,
    name: str,
    heads: int,
    key_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention.

    queries (B, Sq, d), keys (B, Sk, d); key_mask (B, Sk) bool with True for
    real tokens.  Returns the projected output (B, Sq, d) and the attention
    weights (B, heads, Sq, Sk).
    """
    b, sq, d = queries.shape
    sk = keys.shape[1]
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t: Tensor, s: int) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, s, heads, dh)), (0, 2, 1, 3))

    q = split(linear(queries, params, f"{name}.wq"), sq)
    k = split(linear(keys, params, f"{name}.wk"), sk)
    v = split(linear(keys, params, f"{name}.wv"), sk)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    attn = ad.softmax(scores, axis=-1, mask=mask)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, sq, d))
    return linear(ctx, params, f"{name}.wo"), attn


def init_mlp(params: ParameterSet, name: str, d: int, width: int, rng: np.random.Generator) -> None:
    init_linear(params, f"{name}.fc1", d, width, rng)
    init_linear(params, f"{name}.fc2", width, d, rng)


def mlp(x: Tensor, params: ParameterSet, name: str) -> Tensor:
    return linear(ad.gelu(linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def init_transformer_layer(
    params: ParameterSet, name: str, d: int, mlp_width: int, rng: np.random.Generator
) -> None:
    init_layer_norm(params, f"{name}.ln1", d)
    init_attention(params, f"{name}.attn", d, rng)
    init_layer_norm(params, f"{name}.ln2", d)
    init_mlp(params, f"{name}.mlp", d, mlp_width, rng)


def transformer_layer(
    x: Tensor,
    params: ParameterSet,
    name: str,
    heads: int,
    key_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Pre-norm encoder layer: x + MHSA(LN(x)), then + MLP(LN(.))."""
    h = layer_norm(x, params, f"{name}.ln1")
    attn_out, attn = multi_head_attention(h, h, params, f"{name}.attn", heads, key_mask)
    x = ad.add(x, attn_out)
    x = ad.add(x, mlp(layer_norm(x, params, f"{name}.ln2"), params, f"{name}.mlp"))
    return x, attn


def transformer_layer_params(d: int, mlp_width: int) -> int:
    """Closed-form parameter count of one layer (used by reports)."""
    return 2 * 2 * d + 4 * (d * d + d) + (d * mlp_width + mlp_width) + (mlp_width * d + d)
