"""Multi-head attention and the shared post-norm transformer block.

Every attention-bearing stage of the model (SFM/MSCNN fusion, temporal
encoding, layer encoding, reference and cross-ear exchange) is built from
the one block defined here: multi-head attention with residual + LayerNorm,
followed by a SiLU-gated feed-forward with residual + LayerNorm.  Inputs
are [B, T, d_model]; masks are boolean keep-masks over key positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError, PreconditionError, ShapeError
from .tensor import ParameterStore, Tensor

MASK_FILL = -1e30


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 256
    n_heads: int = 4
    ffn_mult: int = 2
    dropout: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")
        if self.ffn_mult < 1:
            raise ConfigError(f"ffn_mult must be >= 1, got {self.ffn_mult}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _uniform_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_attention_block(store: ParameterStore, prefix: str, cfg: AttentionConfig,
                         rng: np.random.Generator) -> None:
    """Register one block's parameters under `prefix.` names."""
    d, h = cfg.d_model, cfg.ffn_mult * cfg.d_model
    for name in ("wq", "wk", "wv", "wo"):
        store.register(f"{prefix}.{name}", Tensor(_uniform_linear(rng, d, d)))
        store.register(f"{prefix}.{name[1]}b", Tensor(np.zeros(d)))
    store.register(f"{prefix}.ln1.g", Tensor(np.ones(d)))
    store.register(f"{prefix}.ln1.b", Tensor(np.zeros(d)))
    store.register(f"{prefix}.ffn.w1", Tensor(_uniform_linear(rng, d, 2 * h)))
    store.register(f"{prefix}.ffn.b1", Tensor(np.zeros(2 * h)))
    store.register(f"{prefix}.ffn.w2", Tensor(_uniform_linear(rng, h, d)))
    store.register(f"{prefix}.ffn.b2", Tensor(np.zeros(d)))
    store.register(f"{prefix}.ln2.g", Tensor(np.ones(d)))
    store.register(f"{prefix}.ln2.b", Tensor(np.zeros(d)))


def attention_block_param_count(cfg: AttentionConfig) -> int:
    """Closed-form scalar count for one block; oracle for sharing tests.

    q/k/v/out projections 4(D^2+D), two layer norms 4D, gated FFN
    D->2H (+2H) and H->D (+D) with H = ffn_mult*D.
    """
    d, h = cfg.d_model, cfg.ffn_mult * cfg.d_model
    return 4 * (d * d + d) + 4 * d + (d * 2 * h + 2 * h) + (h * d + d)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return tz.transpose(tz.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return tz.reshape(tz.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, store: ParameterStore, prefix: str,
                         cfg: AttentionConfig, mask: np.ndarray | None = None):
    """Scaled dot-product attention over [B, T, d_model] inputs.

    `mask` is a boolean keep-mask for key positions, shape [B, Tk] (or
    [B, Tq, Tk]); masked logits are filled with -1e30 before the softmax,
    which drives the corresponding weights to exactly zero in float64.
    Returns (output [B, Tq, d_model], weights [B, heads, Tq, Tk]).
    """
    for name, x in (("q", q), ("k", k), ("v", v)):
        if x.ndim != 3 or x.shape[2] != cfg.d_model:
            raise ShapeError(f"{name} must be [B,T,{cfg.d_model}], got {x.shape}")
    if k.shape[:2] != v.shape[:2]:
        raise ShapeError(f"k/v disagree: {k.shape} vs {v.shape}")
    if q.shape[0] != k.shape[0]:
        raise ShapeError(f"batch mismatch: q {q.shape} vs k {k.shape}")

    p = lambda s: store[f"{prefix}.{s}"]
    qh = _split_heads(tz.linear(q, p("wq"), p("qb")), cfg.n_heads)
    kh = _split_heads(tz.linear(k, p("wk"), p("kb")), cfg.n_heads)
    vh = _split_heads(tz.linear(v, p("wv"), p("vb")), cfg.n_heads)

    scale = 1.0 / np.sqrt(cfg.head_dim)
    logits = tz.matmul(qh, tz.transpose(kh, (0, 1, 3, 2))) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape == (k.shape[0], k.shape[1]):
            keep = mask[:, None, None, :]
        elif mask.shape == (q.shape[0], q.shape[1], k.shape[1]):
            keep = mask[:, None, :, :]
        else:
            raise ShapeError(f"mask shape {mask.shape} fits neither [B,Tk] nor [B,Tq,Tk]")
        if not np.all(np.any(keep, axis=-1)):
            raise PreconditionError("attention mask leaves a query with no visible keys")
        logits = tz.masked_fill(logits, keep, MASK_FILL)
    weights = tz.softmax(logits, axis=-1)
    out = _merge_heads(tz.matmul(weights, vh))
    return tz.linear(out, p("wo"), p("ob")), weights


def _ffn(x: Tensor, store: ParameterStore, prefix: str, cfg: AttentionConfig,
         rng: np.random.Generator | None, train: bool) -> Tensor:
    h = tz.glu_gate(tz.linear(x, store[f"{prefix}.ffn.w1"], store[f"{prefix}.ffn.b1"]),
                    activation="silu")
    h = tz.dropout(h, cfg.dropout, rng, train)
    return tz.linear(h, store[f"{prefix}.ffn.w2"], store[f"{prefix}.ffn.b2"])


def cross_attention_block(x: Tensor, context: Tensor, store: ParameterStore, prefix: str,
                          cfg: AttentionConfig, mask: np.ndarray | None = None,
                          rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    """Post-norm residual block: x attends to context, then gated FFN.

        y = LN(x + drop(attn(x -> context)));  out = LN(y + FFN(y))
    """
    attn, _ = multi_head_attention(x, context, context, store, prefix, cfg, mask)
    attn = tz.dropout(attn, cfg.dropout, rng, train)
    y = tz.layer_norm(x + attn, store[f"{prefix}.ln1.g"], store[f"{prefix}.ln1.b"], cfg.eps)
    return tz.layer_norm(y + _ffn(y, store, prefix, cfg, rng, train),
                         store[f"{prefix}.ln2.g"], store[f"{prefix}.ln2.b"], cfg.eps)


def self_encoder(x: Tensor, store: ParameterStore, prefix: str, cfg: AttentionConfig,
                 mask: np.ndarray | None = None, rng: np.random.Generator | None = None,
                 train: bool = False) -> Tensor:
    """Depth-1 transformer encoder: the block with context = x."""
    return cross_attention_block(x, x, store, prefix, cfg, mask, rng, train)
