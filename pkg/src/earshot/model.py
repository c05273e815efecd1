"""Binaural, reference-conditioned intelligibility model.

Per stream (left ear, right ear, clean reference), pooled SFM layer
stacks are projected to d_model and fused with full-rate log-Mel features
via a multi-scale CNN and cross-attention. A shared temporal encoder and
a reference cross-attention produce one summary token per retained SFM
layer; the layer-token sequence (plus an optional listener token and CLS)
goes through a shared layer encoder, reference and cross-ear exchange,
and a sigmoid score head. The two ear scores are combined by a smooth
best-ear log-sum-exp pool (or a plain average).

Every attention block, projection and the score head is a single shared
parameter set: the parameter count does not depend on how many streams
or layers flow through the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .attention import (AttentionConfig, attention_block_param_count,
                        cross_attention_block, init_attention_block, self_encoder)
from .conditioning import (ConditioningStats, ListenerProfile, conditioning_param_count,
                           conditioning_token, init_conditioning, CONDITIONING_MODES)
from .dsp import (SFM_DIM, BackboneId, FeatureBundle, display_window_to_indices,
                  select_layers, temporal_pool_x8)
from .errors import ConfigError, DataError
from .tensor import ParameterStore, Tensor

MSCNN_BRANCHES = ((3, 1), (5, 2), (9, 4))  # (kernel, dilation)
READOUTS = ("listener_token", "mean", "cls")
EAR_POOLING = ("best", "average")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_heads: int = 4
    ffn_mult: int = 2
    dropout: float = 0.1
    mscnn_channels: int = 192
    layer_window: tuple[int, int] = (10, 16)   # 1-based display indices, inclusive
    backbones: tuple[str, ...] = ("canary_like", "parakeet_like")
    conditioning: str = "categorical"
    readout: str = "cls"
    use_reference: bool = True
    ear_pooling: str = "best"
    pool_beta: float = 6.0
    eps: float = 1e-5

    def __post_init__(self):
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}, got '{self.readout}'")
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigError(
                f"conditioning must be one of {CONDITIONING_MODES}, got '{self.conditioning}'"
            )
        if self.ear_pooling not in EAR_POOLING:
            raise ConfigError(f"ear_pooling must be one of {EAR_POOLING}, got '{self.ear_pooling}'")
        if self.readout == "listener_token" and self.conditioning == "none":
            raise ConfigError("readout 'listener_token' needs a conditioning token")
        if self.mscnn_channels % len(MSCNN_BRANCHES):
            raise ConfigError(f"mscnn_channels must be divisible by {len(MSCNN_BRANCHES)}")
        if self.layer_window[0] < 1 or self.layer_window[0] > self.layer_window[1]:
            raise ConfigError(f"bad layer window {self.layer_window}")
        if self.pool_beta <= 0:
            raise ConfigError(f"pool_beta must be > 0, got {self.pool_beta}")
        if not self.backbones:
            raise ConfigError("need at least one backbone")
        for b in self.backbones:
            BackboneId.from_name(b)
        AttentionConfig(self.d_model, self.n_heads, self.ffn_mult, self.dropout, self.eps)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.ffn_mult, self.dropout, self.eps)


# ---------------------------------------------------------------------------
# prepared inputs


@dataclass
class PreparedStream:
    """Model-ready numpy features for one stream: x8-pooled SFM layers
    [L, T', 1024] (all backbones stacked on the layer axis) and the
    full-rate log-Mel [T, 128]."""

    sfm: np.ndarray
    logmel: np.ndarray


@dataclass
class PreparedUtterance:
    utterance_id: str
    left: PreparedStream
    right: PreparedStream
    reference: PreparedStream | None
    listener_id: str = ""
    label: float | None = None
    scene_id: str = ""
    system_id: str = ""

    @property
    def n_layer_tokens(self) -> int:
        return self.left.sfm.shape[0]


def prepare_bundle(bundle: FeatureBundle, cfg: ModelConfig, listener_id: str = "",
                   label: float | None = None) -> PreparedUtterance:
    """Select the configured layer window, pool time by x8 and stack the
    configured backbones; done once per utterance at load time."""
    window = display_window_to_indices(cfg.layer_window)
    wanted = [BackboneId.from_name(b) for b in cfg.backbones]

    def prep(stream):
        chunks = [temporal_pool_x8(select_layers(stream.stack_for(b), window)).layers
                  for b in wanted]
        return PreparedStream(np.concatenate(chunks, axis=0), stream.logmel.frames)

    reference = None
    if cfg.use_reference:
        if bundle.reference is None:
            raise DataError(f"utterance {bundle.utterance_id} has no reference stream")
        reference = prep(bundle.reference)
    return PreparedUtterance(bundle.utterance_id, prep(bundle.left), prep(bundle.right),
                             reference, listener_id, label)


# ---------------------------------------------------------------------------
# parameters


def build_model(cfg: ModelConfig, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    d, br = cfg.d_model, cfg.mscnn_channels // len(MSCNN_BRANCHES)
    for i, (k, _) in enumerate(MSCNN_BRANCHES):
        bound = 1.0 / np.sqrt(k * 128)
        store.register(f"mscnn.b{i}.w", Tensor(rng.uniform(-bound, bound, size=(k, 128, br))))
        store.register(f"mscnn.b{i}.bias", Tensor(np.zeros(br)))
    bound = 1.0 / np.sqrt(cfg.mscnn_channels)
    store.register("mscnn.proj.w", Tensor(rng.uniform(-bound, bound, size=(cfg.mscnn_channels, d))))
    store.register("mscnn.proj.b", Tensor(np.zeros(d)))
    bound = 1.0 / np.sqrt(SFM_DIM)
    store.register("sfm_proj.w", Tensor(rng.uniform(-bound, bound, size=(SFM_DIM, d))))
    store.register("sfm_proj.b", Tensor(np.zeros(d)))
    acfg = cfg.attention
    init_attention_block(store, "fuse", acfg, rng)
    init_attention_block(store, "temporal.self", acfg, rng)
    if cfg.use_reference:
        init_attention_block(store, "temporal.xref", acfg, rng)
    init_attention_block(store, "layers.self", acfg, rng)
    if cfg.use_reference:
        init_attention_block(store, "layers.xref", acfg, rng)
    init_attention_block(store, "xear", acfg, rng)
    init_conditioning(store, cfg.conditioning, d, rng)
    if cfg.readout == "cls":
        store.register("cls.token", Tensor(rng.normal(0.0, 0.02, size=(1, d))))
    bound = 1.0 / np.sqrt(d)
    store.register("head.w1", Tensor(rng.uniform(-bound, bound, size=(d, d))))
    store.register("head.b1", Tensor(np.zeros(d)))
    store.register("head.w2", Tensor(rng.uniform(-bound, bound, size=(d, 1))))
    store.register("head.b2", Tensor(np.zeros(1)))
    return store


def model_param_count(cfg: ModelConfig) -> int:
    """Closed-form scalar count; independent of stream/layer multiplicity."""
    d, c = cfg.d_model, cfg.mscnn_channels
    br = c // len(MSCNN_BRANCHES)
    n = sum(k * 128 * br + br for k, _ in MSCNN_BRANCHES) + c * d + d  # MSCNN + proj
    n += SFM_DIM * d + d                                               # SFM projection
    n_blocks = 4 + (2 if cfg.use_reference else 0)
    n += n_blocks * attention_block_param_count(cfg.attention)
    n += conditioning_param_count(cfg.conditioning, d)
    if cfg.readout == "cls":
        n += d
    n += d * d + d + d + 1                                             # score head
    return n


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardResult:
    prediction: Tensor          # scalar, 0..100
    score_left: Tensor          # [1]
    score_right: Tensor         # [1]


def _mscnn(store: ParameterStore, logmel: Tensor) -> Tensor:
    """Three dilated conv branches over [T, 128], SiLU, concat, project."""
    outs = []
    for i, (_, dilation) in enumerate(MSCNN_BRANCHES):
        h = tz.conv1d_dilated(logmel, store[f"mscnn.b{i}.w"], store[f"mscnn.b{i}.bias"], dilation)
        outs.append(tz.silu(h))
    return tz.linear(tz.concat(outs, axis=-1), store["mscnn.proj.w"], store["mscnn.proj.b"])


def _encode_stream(store: ParameterStore, cfg: ModelConfig, stream: PreparedStream,
                   rng, train: bool) -> Tensor:
    """Project + fuse + temporally self-encode one stream -> [L, T', d]."""
    acfg = cfg.attention
    tokens = tz.linear(Tensor(stream.sfm), store["sfm_proj.w"], store["sfm_proj.b"])
    feats = _mscnn(store, Tensor(stream.logmel))
    ctx = tz.expand(tz.reshape(feats, (1,) + feats.shape), (tokens.shape[0],) + feats.shape)
    fused = cross_attention_block(tokens, ctx, store, "fuse", acfg, None, rng, train)
    return self_encoder(fused, store, "temporal.self", acfg, None, rng, train)


def _layer_sequence(store: ParameterStore, cfg: ModelConfig, summary: Tensor,
                    cond: Tensor | None) -> Tensor:
    """[L, d] layer summaries -> [1, L(+listener)(+cls), d] sequence.

    The listener token (if any) sits right after the layer tokens and the
    CLS token (if any) is always last.
    """
    parts = [summary]
    if cond is not None:
        parts.append(cond)
    if cfg.readout == "cls":
        parts.append(store["cls.token"])
    seq = tz.concat(parts, axis=0)
    return tz.reshape(seq, (1,) + seq.shape)


def _read_out(cfg: ModelConfig, seq: Tensor, n_layers: int) -> Tensor:
    if cfg.readout == "listener_token":
        r = tz.narrow(seq, 1, n_layers, 1)
    elif cfg.readout == "mean":
        r = tz.mean(tz.narrow(seq, 1, 0, n_layers), axis=1, keepdims=True)
    else:  # cls, last position
        r = tz.narrow(seq, 1, seq.shape[1] - 1, 1)
    return tz.reshape(r, (1, cfg.d_model))


def _score(store: ParameterStore, readout: Tensor) -> Tensor:
    h = tz.silu(tz.linear(readout, store["head.w1"], store["head.b1"]))
    s = tz.sigmoid(tz.linear(h, store["head.w2"], store["head.b2"])) * 100.0
    return tz.reshape(s, (1,))


def best_ear_pool(score_left: Tensor, score_right: Tensor, beta: float) -> Tensor:
    """Smooth maximum of the two ear scores.

    lse_beta(a, b) - ln(2)/beta: exact at a == b, within ln(2)/beta of
    max(a, b) everywhere, and differentiable in both ears.
    """
    both = tz.concat([score_left, score_right], axis=0)
    return tz.logsumexp(both, axis=0, beta=beta) - np.log(2.0) / beta


def average_ear_pool(left_readout: Tensor, right_readout: Tensor,
                     store: ParameterStore) -> Tensor:
    """Binaural-averaging baseline: fuse the two ear readout vectors at the
    feature level, then score the single fused vector with the shared head.
    Unlike best-ear pooling this discards which ear was better before the
    nonlinearity ever sees it."""
    fused = (left_readout + right_readout) * 0.5
    return _score(store, fused)


def forward(store: ParameterStore, cfg: ModelConfig, prep: PreparedUtterance,
            profile: ListenerProfile | None, stats: ConditioningStats | None = None,
            rng: np.random.Generator | None = None, train: bool = False) -> ForwardResult:
    """Run the full model on one prepared utterance."""
    acfg = cfg.attention
    if cfg.conditioning != "none" and profile is None:
        raise DataError(f"utterance {prep.utterance_id}: conditioning needs a listener profile")
    if prep.left.sfm.shape[0] != prep.right.sfm.shape[0]:
        raise DataError(f"utterance {prep.utterance_id}: ears disagree on layer count")

    enc_ref = None
    if cfg.use_reference:
        if prep.reference is None:
            raise DataError(f"utterance {prep.utterance_id}: model expects a reference stream")
        enc_ref = _encode_stream(store, cfg, prep.reference, rng, train)
    enc = {e: _encode_stream(store, cfg, getattr(prep, e), rng, train) for e in ("left", "right")}

    summaries = {}
    for ear, x in enc.items():
        if enc_ref is not None:
            x = cross_attention_block(x, enc_ref, store, "temporal.xref", acfg, None, rng, train)
        summaries[ear] = tz.masked_mean(x, np.ones(x.shape[1], dtype=bool))  # [L, d]
    if enc_ref is not None:
        ref_summary = tz.masked_mean(enc_ref, np.ones(enc_ref.shape[1], dtype=bool))

    cond = conditioning_token(store, cfg.conditioning, profile, stats) \
        if cfg.conditioning != "none" else None
    n_layers = prep.n_layer_tokens

    seqs = {ear: self_encoder(_layer_sequence(store, cfg, s, cond), store, "layers.self",
                              acfg, None, rng, train)
            for ear, s in summaries.items()}
    if enc_ref is not None:
        ref_seq = self_encoder(_layer_sequence(store, cfg, ref_summary, cond), store,
                               "layers.self", acfg, None, rng, train)
        seqs = {ear: cross_attention_block(s, ref_seq, store, "layers.xref", acfg, None, rng, train)
                for ear, s in seqs.items()}

    # symmetric cross-ear exchange computed from the same pre-exchange states
    pre_l, pre_r = seqs["left"], seqs["right"]
    post_l = cross_attention_block(pre_l, pre_r, store, "xear", acfg, None, rng, train)
    post_r = cross_attention_block(pre_r, pre_l, store, "xear", acfg, None, rng, train)

    ro_l = _read_out(cfg, post_l, n_layers)
    ro_r = _read_out(cfg, post_r, n_layers)
    score_l = _score(store, ro_l)
    score_r = _score(store, ro_r)
    if cfg.ear_pooling == "best":
        pred = best_ear_pool(score_l, score_r, cfg.pool_beta)
    else:
        pred = average_ear_pool(ro_l, ro_r, store)
    return ForwardResult(pred, score_l, score_r)
