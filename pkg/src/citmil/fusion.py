"""Clinical-Injection Transformer, gated MIL pooling, and the comparison models.

All models share one interface: ``represent(batch) -> (h, attn)`` produces the
patient-level representation (where manifold Mixup is applied) together with
the MIL attention over each bag, and ``head(h)`` maps it to three logits.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParameterSet, Tensor
from .errors import ConfigError, ContractError
from .injection import Batch

N_CLASSES = 3
PAPER_CIT_PARAMS = 560_000


@dataclass
class FusionConfig:
    d_h: int = 256
    layers: int = 2
    heads: int = 4
    mlp_width: int = 256
    attn_dim: int = 128
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.d_h % self.heads:
            raise ConfigError(f"d_h={self.d_h} not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ConfigError("need at least one transformer layer")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- building blocks

def init_projection(params: ParameterSet, name: str, d_in: int, d_h: int, rng) -> None:
    nn.init_linear(params, f"{name}.lin", d_in, d_h, rng)
    nn.init_layer_norm(params, f"{name}.ln", d_h)


def project(x: Tensor, params: ParameterSet, name: str) -> Tensor:
    """LayerNorm(ReLU(W x + b))."""
    return nn.layer_norm(ad.relu(nn.linear(x, params, f"{name}.lin")), params, f"{name}.ln")


def project_clinical(c, params: ParameterSet, name: str = "clin") -> Tensor:
    """Condition token z_cond from the (type-injected) clinical vector, (B, d_c) -> (B, d_h)."""
    return project(ad.as_tensor(c), params, name)


def project_patches(x, params: ParameterSet, name: str = "patch") -> Tensor:
    """Shared patch projection, (B, N, d_in) -> (B, N, d_h)."""
    return project(ad.as_tensor(x), params, name)


def cit_forward(
    z0: Tensor, params: ParameterSet, cfg: FusionConfig, mask: np.ndarray | None = None, name: str = "cit"
) -> tuple[Tensor, list[Tensor]]:
    """Run the token sequence (row 0 = condition token) through the encoder layers.

    No positional embedding is added, so patch rows are permutation-equivariant.
    ``mask`` is (B, N+1) with True for real tokens.
    """
    z = z0
    attns = []
    for layer in range(cfg.layers):
        z, attn = nn.transformer_layer(z, params, f"{name}.layer{layer}", cfg.heads, mask)
        attns.append(attn)
    return z, attns


def init_gated_pool(params: ParameterSet, name: str, d: int, attn_dim: int, rng) -> None:
    bound = 1.0 / np.sqrt(d)
    params.add(f"{name}.V", rng.uniform(-bound, bound, size=(d, attn_dim)))
    params.add(f"{name}.U", rng.uniform(-bound, bound, size=(d, attn_dim)))
    bound = 1.0 / np.sqrt(attn_dim)
    params.add(f"{name}.w", rng.uniform(-bound, bound, size=(attn_dim, 1)))


def gated_mil_pool(
    z: Tensor, params: ParameterSet, name: str = "pool", mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """a = softmax_i w^T(tanh(V z_i) * sigmoid(U z_i)); h = sum_i a_i z_i.

    z is (B, N, d); returns h (B, d) and a (B, N).
    """
    b, n, d = z.shape
    if n == 0:
        raise ContractError("gated_mil_pool on an empty bag")
    gate = ad.mul(ad.tanh(ad.matmul(z, params[f"{name}.V"])), ad.sigmoid(ad.matmul(z, params[f"{name}.U"])))
    scores = ad.reshape(ad.matmul(gate, params[f"{name}.w"]), (b, n))
    a = ad.softmax(scores, axis=-1, mask=mask)
    h = ad.reshape(ad.matmul(ad.reshape(a, (b, 1, n)), z), (b, d))
    return h, a


# ---------------------------------------------------------------- models

class FusionModel:
    """Base class; subclasses fill ``self.params`` and implement ``represent``."""

    name = "base"
    uses_clinical = True
    uses_bag = True

    def __init__(self, cfg: FusionConfig, d_patch: int, d_clin: int, rng: np.random.Generator):
        self.cfg = cfg
        self.d_patch = d_patch
        self.d_clin = d_clin
        self.params = ParameterSet()
        self._build(rng)
        nn.init_linear(self.params, "head", self.rep_dim, cfg.n_classes, rng)

    rep_dim: int

    def _build(self, rng) -> None:
        raise NotImplementedError

    def represent(self, batch: Batch) -> tuple[Tensor, Tensor | None]:
        raise NotImplementedError

    def head(self, h: Tensor) -> Tensor:
        return nn.linear(h, self.params, "head")

    def forward(self, batch: Batch) -> Tensor:
        return self.head(self.represent(batch)[0])

    def predict_proba(self, batch: Batch) -> tuple[np.ndarray, np.ndarray | None]:
        with ad.no_grad():
            h, attn = self.represent(batch)
            logits = self.head(h).data
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return p, None if attn is None else attn.data

    def count_params(self) -> int:
        return self.params.count()


class CIT(FusionModel):
    """Condition token + patch tokens in one self-attention sequence, gated MIL pooling,
    head on [h_img ; z_cond^(L)]."""

    name = "cit"

    def _build(self, rng) -> None:
        c = self.cfg
        init_projection(self.params, "clin", self.d_clin, c.d_h, rng)
        init_projection(self.params, "patch", self.d_patch, c.d_h, rng)
        for layer in range(c.layers):
            nn.init_transformer_layer(self.params, f"cit.layer{layer}", c.d_h, c.mlp_width, rng)
        init_gated_pool(self.params, "pool", c.d_h, c.attn_dim, rng)
        self.rep_dim = 2 * c.d_h

    def tokens(self, batch: Batch) -> tuple[Tensor, np.ndarray]:
        b = len(batch)
        z_cond = project_clinical(batch.clinical, self.params)
        z_patch = project_patches(batch.features, self.params)
        z0 = ad.concat([ad.reshape(z_cond, (b, 1, self.cfg.d_h)), z_patch], axis=1)
        mask = np.concatenate([np.ones((b, 1), dtype=bool), batch.mask], axis=1)
        return z0, mask

    def encode(self, batch: Batch) -> tuple[Tensor, list[Tensor], np.ndarray]:
        z0, mask = self.tokens(batch)
        z, attns = cit_forward(z0, self.params, self.cfg, mask)
        return z, attns, mask

    def represent(self, batch: Batch):
        z, _, _ = self.encode(batch)
        cond = z[:, 0, :]
        h_img, a = gated_mil_pool(z[:, 1:, :], self.params, "pool", batch.mask)
        return ad.concat([h_img, cond], axis=-1), a

    def predict(self, bag: np.ndarray, clinical: np.ndarray):
        """Single patient: (logits [3], attention [N], h [2 d_h])."""
        n = bag.shape[0]
        batch = Batch(
            np.asarray(bag, dtype=np.float64)[None],
            np.ones((1, n), dtype=bool),
            np.asarray(clinical, dtype=np.float64)[None],
            np.zeros(1, dtype=np.int64),
            np.zeros((1, n), dtype=np.int64),
        )
        with ad.no_grad():
            h, a = self.represent(batch)
            logits = self.head(h)
        return logits.data[0], a.data[0], h.data[0]

    def param_breakdown(self) -> dict[str, int]:
        p = self.params
        return {
            "clinical_projection": p.count("clin."),
            "patch_projection": p.count("patch."),
            "transformer_layers": p.count("cit."),
            "gated_pool": p.count("pool."),
            "head": p.count("head."),
        }


class ClinicalMLP(FusionModel):
    """d_c -> d_h (ReLU) -> 3; the bag is ignored."""

    name = "clinical_mlp"
    uses_bag = False

    def _build(self, rng) -> None:
        nn.init_linear(self.params, "mlp", self.d_clin, self.cfg.d_h, rng)
        self.rep_dim = self.cfg.d_h

    def represent(self, batch: Batch):
        return ad.relu(nn.linear(ad.as_tensor(batch.clinical), self.params, "mlp")), None


class ABMIL(FusionModel):
    """Image-only: patch projection -> gated MIL pooling -> head."""

    name = "abmil"
    uses_clinical = False

    def _build(self, rng) -> None:
        init_projection(self.params, "patch", self.d_patch, self.cfg.d_h, rng)
        init_gated_pool(self.params, "pool", self.cfg.d_h, self.cfg.attn_dim, rng)
        self.rep_dim = self.cfg.d_h

    def represent(self, batch: Batch):
        z = project_patches(batch.features, self.params)
        return gated_mil_pool(z, self.params, "pool", batch.mask)


class LateFusion(FusionModel):
    """ABMIL image branch and clinical MLP embedding, joined only at the head."""

    name = "late_fusion"

    def _build(self, rng) -> None:
        init_projection(self.params, "patch", self.d_patch, self.cfg.d_h, rng)
        init_gated_pool(self.params, "pool", self.cfg.d_h, self.cfg.attn_dim, rng)
        nn.init_linear(self.params, "mlp", self.d_clin, self.cfg.d_h, rng)
        self.rep_dim = 2 * self.cfg.d_h

    def represent(self, batch: Batch):
        z = project_patches(batch.features, self.params)
        h_img, a = gated_mil_pool(z, self.params, "pool", batch.mask)
        h_clin = ad.relu(nn.linear(ad.as_tensor(batch.clinical), self.params, "mlp"))
        return ad.concat([h_img, h_clin], axis=-1), a


class CrossAttention(FusionModel):
    """Dual-stream co-attention baseline.

    Clinical stream: the condition token queries the patch tokens in one
    cross-attention block (residual + MLP).  Patch stream: L-1 clinical-free
    self-attention layers, then gated MIL pooling.  Each stream ends in its own
    ReLU projection before the joint head.
    """

    name = "cross_attention"

    def _build(self, rng) -> None:
        c = self.cfg
        init_projection(self.params, "clin", self.d_clin, c.d_h, rng)
        init_projection(self.params, "patch", self.d_patch, c.d_h, rng)
        nn.init_layer_norm(self.params, "xattn.ln_q", c.d_h)
        nn.init_layer_norm(self.params, "xattn.ln_kv", c.d_h)
        nn.init_attention(self.params, "xattn.attn", c.d_h, rng)
        nn.init_layer_norm(self.params, "xattn.ln2", c.d_h)
        nn.init_mlp(self.params, "xattn.mlp", c.d_h, c.mlp_width, rng)
        for layer in range(c.layers - 1):
            nn.init_transformer_layer(self.params, f"path.layer{layer}", c.d_h, c.mlp_width, rng)
        init_gated_pool(self.params, "pool", c.d_h, c.attn_dim, rng)
        nn.init_linear(self.params, "rho_img", c.d_h, c.d_h, rng)
        nn.init_linear(self.params, "rho_clin", c.d_h, c.d_h, rng)
        self.rep_dim = 2 * c.d_h

    def cross_attend(self, batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (updated clinical token (B, d), patch tokens (B, N, d), attention (B, heads, 1, N))."""
        b = len(batch)
        z_cond = ad.reshape(project_clinical(batch.clinical, self.params), (b, 1, self.cfg.d_h))
        z_patch = project_patches(batch.features, self.params)
        q = nn.layer_norm(z_cond, self.params, "xattn.ln_q")
        kv = nn.layer_norm(z_patch, self.params, "xattn.ln_kv")
        ctx, attn = nn.multi_head_attention(q, kv, self.params, "xattn.attn", self.cfg.heads, batch.mask)
        z_c = ad.add(z_cond, ctx)
        z_c = ad.add(z_c, nn.mlp(nn.layer_norm(z_c, self.params, "xattn.ln2"), self.params, "xattn.mlp"))
        return ad.reshape(z_c, (b, self.cfg.d_h)), z_patch, attn

    def represent(self, batch: Batch):
        z_c, z_patch, _ = self.cross_attend(batch)
        for layer in range(self.cfg.layers - 1):
            z_patch, _ = nn.transformer_layer(z_patch, self.params, f"path.layer{layer}", self.cfg.heads, batch.mask)
        h_img, a = gated_mil_pool(z_patch, self.params, "pool", batch.mask)
        h_img = ad.relu(nn.linear(h_img, self.params, "rho_img"))
        h_clin = ad.relu(nn.linear(z_c, self.params, "rho_clin"))
        return ad.concat([h_img, h_clin], axis=-1), a


MODELS: dict[str, type[FusionModel]] = {
    m.name: m for m in (CIT, ClinicalMLP, ABMIL, LateFusion, CrossAttention)
}


def build_model(name: str, cfg: FusionConfig, d_patch: int, d_clin: int, rng: np.random.Generator) -> FusionModel:
    try:
        cls = MODELS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(cfg, d_patch, d_clin, rng)


def fusion_param_count(model: FusionModel) -> int:
    """Parameters of the fusion stage proper (everything past the input projections)."""
    return sum(
        t.size for n, t in model.params.items() if not (n.startswith("clin.") or n.startswith("patch."))
    )


def attention_by_type(
    attn: np.ndarray, types: np.ndarray, mask: np.ndarray, labels: np.ndarray, n_types: int = 5, n_classes: int = 3
) -> tuple[np.ndarray, np.ndarray]:
    """Mean MIL attention mass per (outcome class, morph type).

    Each patient's attention is summed within each type (a row summing to 1),
    then rows are averaged within outcome class.  Returns (table, counts).
    """
    table = np.zeros((n_classes, n_types))
    counts = np.zeros(n_classes, dtype=np.int64)
    for a, t, m, y in zip(attn, types, mask, labels):
        per_type = np.bincount(t[m], weights=a[m], minlength=n_types)
        table[y] += per_type
        counts[y] += 1
    nz = counts > 0
    table[nz] /= counts[nz, None]
    return table, counts
