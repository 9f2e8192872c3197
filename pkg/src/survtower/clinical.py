"""Clinical-record tower: item embedding plus a small pre-norm
multi-head self-attention encoder that pools to one feature vector.

Categorical values become embedding-table rows; each continuous
covariate becomes one extra token through a learned 1->d projection, so
a record with m categorical items and p covariates enters the encoder
as an (m+p) x d token matrix. Tokens are an unordered set: there is no
positional encoding, and mean pooling keeps the output permutation
invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, VocabularyError
from .params import ParameterStore, uniform_fan_in


@dataclass
class ClinicalRecord:
    patient_id: str
    items: list[str]                 # categorical values as "field=value"
    covariates: dict[str, float | None]  # e.g. {"age": 61.0}; None = missing
    survival_days: float
    event: int

    def __post_init__(self):
        if self.survival_days <= 0:
            raise ConfigError(f"survival time must be positive, got {self.survival_days}")
        if self.event not in (0, 1):
            raise ConfigError(f"event flag must be 0 or 1, got {self.event}")


@dataclass
class FieldStats:
    min: float
    max: float
    mean: float
    std: float


@dataclass
class ClinicalVocabulary:
    """Dense item -> index map plus the continuous-field registry."""

    items: dict[str, int]
    continuous: dict[str, FieldStats] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.items)

    @classmethod
    def from_records(cls, records) -> "ClinicalVocabulary":
        values = sorted({item for r in records for item in r.items})
        return cls(items={v: i for i, v in enumerate(values)})

    def encode_items(self, items) -> np.ndarray:
        indices = []
        for item in items:
            if item not in self.items:
                raise VocabularyError(f"unknown clinical item {item!r}")
            indices.append(self.items[item])
        return np.asarray(indices, dtype=np.int64)


@dataclass
class ClinicalEncoderConfig:
    embed_dim: int = 48
    heads: int = 3
    layers: int = 5
    mlp_hidden: int = 192
    encoder: str = "attention"  # "attention" or "mlp" (ablation substitute)

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layer count must be >= 1, got {self.layers}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must split evenly over {self.heads} heads"
            )
        if self.encoder not in ("attention", "mlp"):
            raise ConfigError(f"unknown clinical encoder {self.encoder!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


def init_clinical_params(
    store: ParameterStore,
    config: ClinicalEncoderConfig,
    vocab: ClinicalVocabulary,
    continuous_fields: list[str],
    rng: np.random.Generator,
    dtype=np.float32,
    prefix: str = "clinical",
):
    d, h = config.embed_dim, config.head_dim
    store.add(f"{prefix}.embed.weight", uniform_fan_in(rng, (vocab.size, d), d, dtype))
    for name in continuous_fields:
        store.add(f"{prefix}.cont.{name}.weight", uniform_fan_in(rng, (1, d), 1, dtype))
        store.add(f"{prefix}.cont.{name}.bias", np.zeros(d, dtype=dtype))

    if config.encoder == "mlp":
        store.add(f"{prefix}.mlp_enc.w1", uniform_fan_in(rng, (d, config.mlp_hidden), d, dtype))
        store.add(f"{prefix}.mlp_enc.b1", np.zeros(config.mlp_hidden, dtype=dtype))
        store.add(f"{prefix}.mlp_enc.w2", uniform_fan_in(rng, (config.mlp_hidden, d), config.mlp_hidden, dtype))
        store.add(f"{prefix}.mlp_enc.b2", np.zeros(d, dtype=dtype))
        return

    for i in range(config.layers):
        layer = f"{prefix}.layer{i}"
        store.add(f"{layer}.ln1.gain", np.ones(d, dtype=dtype), decay=False)
        store.add(f"{layer}.ln1.bias", np.zeros(d, dtype=dtype), decay=False)
        for j in range(config.heads):
            head = f"{layer}.head{j}"
            store.add(f"{head}.wq", uniform_fan_in(rng, (d, h), d, dtype))
            store.add(f"{head}.wk", uniform_fan_in(rng, (d, h), d, dtype))
            store.add(f"{head}.wv", uniform_fan_in(rng, (d, h), d, dtype))
        # residual-branch output projections start at zero for a stable start
        store.add(f"{layer}.attn_out.weight", np.zeros((d, d), dtype=dtype))
        store.add(f"{layer}.attn_out.bias", np.zeros(d, dtype=dtype))
        store.add(f"{layer}.ln2.gain", np.ones(d, dtype=dtype), decay=False)
        store.add(f"{layer}.ln2.bias", np.zeros(d, dtype=dtype), decay=False)
        store.add(f"{layer}.mlp.w1", uniform_fan_in(rng, (d, config.mlp_hidden), d, dtype))
        store.add(f"{layer}.mlp.b1", np.zeros(config.mlp_hidden, dtype=dtype))
        store.add(f"{layer}.mlp.w2", np.zeros((config.mlp_hidden, d), dtype=dtype))
        store.add(f"{layer}.mlp.b2", np.zeros(d, dtype=dtype))
    store.add(f"{prefix}.final_ln.gain", np.ones(d, dtype=dtype), decay=False)
    store.add(f"{prefix}.final_ln.bias", np.zeros(d, dtype=dtype), decay=False)


def embed_tokens(
    store: ParameterStore,
    token_indices: np.ndarray,
    covariates: dict[str, float],
    prefix: str = "clinical",
) -> ad.Tensor:
    """Token matrix for one record: embedding rows plus covariate tokens."""
    rows = [ad.gather_rows(store[f"{prefix}.embed.weight"], token_indices)]
    for name in sorted(covariates):
        w = store[f"{prefix}.cont.{name}.weight"]
        b = store[f"{prefix}.cont.{name}.bias"]
        rows.append(ad.add(ad.mul(w, float(covariates[name])), ad.reshape(b, (1, -1))))
    return ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]


def embed_record(
    store: ParameterStore,
    record: ClinicalRecord,
    vocab: ClinicalVocabulary,
    prefix: str = "clinical",
) -> ad.Tensor:
    indices = vocab.encode_items(record.items)
    covariates = {k: float(v) for k, v in record.covariates.items() if v is not None}
    return embed_tokens(store, indices, covariates, prefix=prefix)


def self_attention(c, wq, wk, wv, return_weights: bool = False):
    """Single-head scaled dot-product self-attention over token rows."""
    h = wq.shape[1]
    q = ad.matmul(c, wq)
    k = ad.matmul(c, wk)
    v = ad.matmul(c, wv)
    logits = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(h))
    weights = ad.softmax(logits, axis=-1)
    attended = ad.matmul(weights, v)
    if return_weights:
        return attended, weights
    return attended


def multi_head_attention(store, config, x, layer_prefix, return_weights=False):
    outputs = []
    all_weights = []
    for j in range(config.heads):
        head = f"{layer_prefix}.head{j}"
        att, w = self_attention(
            x, store[f"{head}.wq"], store[f"{head}.wk"], store[f"{head}.wv"], return_weights=True
        )
        outputs.append(att)
        all_weights.append(w)
    merged = ad.concat(outputs, axis=1)
    out = ad.add(
        ad.matmul(merged, store[f"{layer_prefix}.attn_out.weight"]),
        ad.reshape(store[f"{layer_prefix}.attn_out.bias"], (1, -1)),
    )
    if return_weights:
        return out, all_weights
    return out


def encode_clinical(
    store: ParameterStore,
    config: ClinicalEncoderConfig,
    token_matrix: ad.Tensor,
    prefix: str = "clinical",
    return_weights: bool = False,
):
    """Encode an (m x d) token matrix to a (1 x d) clinical feature vector."""
    if token_matrix.shape[1] != config.embed_dim:
        raise ConfigError(
            f"token matrix width {token_matrix.shape[1]} != embed_dim {config.embed_dim}"
        )
    if config.encoder == "mlp":
        pooled = ad.reshape(ad.mean_over(token_matrix, (0,)), (1, -1))
        hidden = ad.relu(ad.add(
            ad.matmul(pooled, store[f"{prefix}.mlp_enc.w1"]),
            ad.reshape(store[f"{prefix}.mlp_enc.b1"], (1, -1)),
        ))
        out = ad.add(
            ad.matmul(hidden, store[f"{prefix}.mlp_enc.w2"]),
            ad.reshape(store[f"{prefix}.mlp_enc.b2"], (1, -1)),
        )
        return (out, []) if return_weights else out

    x = token_matrix
    collected = []
    for i in range(config.layers):
        layer = f"{prefix}.layer{i}"
        normed = ad.layer_norm(x, store[f"{layer}.ln1.gain"], store[f"{layer}.ln1.bias"])
        if return_weights:
            attended, weights = multi_head_attention(store, config, normed, layer, return_weights=True)
            collected.extend(weights)
        else:
            attended = multi_head_attention(store, config, normed, layer)
        x = ad.add(x, attended)
        normed2 = ad.layer_norm(x, store[f"{layer}.ln2.gain"], store[f"{layer}.ln2.bias"])
        hidden = ad.relu(ad.add(
            ad.matmul(normed2, store[f"{layer}.mlp.w1"]),
            ad.reshape(store[f"{layer}.mlp.b1"], (1, -1)),
        ))
        mlp_out = ad.add(
            ad.matmul(hidden, store[f"{layer}.mlp.w2"]),
            ad.reshape(store[f"{layer}.mlp.b2"], (1, -1)),
        )
        x = ad.add(x, mlp_out)
    final = ad.layer_norm(x, store[f"{prefix}.final_ln.gain"], store[f"{prefix}.final_ln.bias"])
    pooled = ad.reshape(ad.mean_over(final, (0,)), (1, -1))
    return (pooled, collected) if return_weights else pooled
