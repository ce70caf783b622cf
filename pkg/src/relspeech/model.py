"""Encoder/decoder transformer over speech-like feature frames.

Pre-norm residual wiring throughout: every sub-layer computes
``h + Dropout(SubLayer(LayerNorm(h)))`` and each stack ends with a final
layer normalization, which is what keeps very deep stacks trainable.
Position information enters either as absolute encodings added to the
projected inputs, or as relative-distance terms inside the
self-attention energies; cross-attention is always content-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import attention as A
from . import tensor as T
from .data import BOS_ID, EOS_ID, PAD_ID, RESERVED_TOKENS, UNK_ID
from .position import ABSOLUTE, RELATIVE, absolute_encoding, grow, relative_encoding
from .tensor import ConfigError, Tensor


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 6
    dec_layers: int = 3
    ffn_dim: int = 256
    residual_dropout: float = 0.1
    word_dropout: float = 0.0
    layer_drop: float = 0.0
    position_mode: str = RELATIVE
    input_dim: int = 8
    frame_stack: int = 1
    vocab_size: int = 12
    max_len: int = 512
    # None means "use residual_dropout" for the post-softmax attention dropout
    attn_dropout: Optional[float] = None

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even for sinusoidal encodings")
        if self.ffn_dim < self.d_model:
            raise ConfigError(f"ffn_dim {self.ffn_dim} must be >= d_model {self.d_model}")
        for name in ("residual_dropout", "word_dropout", "layer_drop"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {p}")
        if self.frame_stack < 1:
            raise ConfigError(f"frame_stack must be >= 1, got {self.frame_stack}")
        if self.position_mode not in (ABSOLUTE, RELATIVE):
            raise ConfigError(f"unknown position_mode {self.position_mode!r}")
        if self.vocab_size <= RESERVED_TOKENS:
            raise ConfigError(f"vocab_size must exceed {RESERVED_TOKENS} reserved ids")

    @property
    def attn_dropout_rate(self) -> float:
        return self.residual_dropout if self.attn_dropout is None else self.attn_dropout


@dataclass
class TrainContext:
    """Sampling state for one training forward pass (dropout, layer drop)."""

    rng: np.random.Generator
    dropout: bool = True


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d: int):
        return cls(T.ones(d), T.zeros(d))

    def named(self, prefix):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, d: int, hidden: int):
        return cls(T.glorot(rng, d, hidden), T.zeros(hidden),
                   T.glorot(rng, hidden, d), T.zeros(d))

    def named(self, prefix):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class EncoderLayerParams:
    ln1: LayerNormParams
    attn: A.AttentionParams
    ln2: LayerNormParams
    ffn: FeedForwardParams

    def named(self, prefix):
        yield from self.ln1.named(f"{prefix}.ln1")
        yield from self.attn.named(f"{prefix}.attn")
        yield from self.ln2.named(f"{prefix}.ln2")
        yield from self.ffn.named(f"{prefix}.ffn")


@dataclass
class DecoderLayerParams:
    ln1: LayerNormParams
    self_attn: A.AttentionParams
    ln2: LayerNormParams
    cross_attn: A.AttentionParams
    ln3: LayerNormParams
    ffn: FeedForwardParams

    def named(self, prefix):
        yield from self.ln1.named(f"{prefix}.ln1")
        yield from self.self_attn.named(f"{prefix}.self_attn")
        yield from self.ln2.named(f"{prefix}.ln2")
        yield from self.cross_attn.named(f"{prefix}.cross_attn")
        yield from self.ln3.named(f"{prefix}.ln3")
        yield from self.ffn.named(f"{prefix}.ffn")


class Model:
    """All parameters plus the (lazily regrown) position tables."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, h, rel = cfg.d_model, cfg.heads, cfg.position_mode == RELATIVE
        stacked_dim = cfg.input_dim * cfg.frame_stack
        self.w_in = T.glorot(rng, stacked_dim, d)
        self.b_in = T.zeros(d)
        self.enc_layers = [
            EncoderLayerParams(
                LayerNormParams.init(d),
                A.AttentionParams.init(rng, d, h, relative=rel),
                LayerNormParams.init(d),
                FeedForwardParams.init(rng, d, cfg.ffn_dim),
            )
            for _ in range(cfg.enc_layers)
        ]
        self.enc_ln = LayerNormParams.init(d)
        self.embedding = Tensor(rng.normal(0.0, 0.05, size=(cfg.vocab_size, d)))
        self.dec_layers = [
            DecoderLayerParams(
                LayerNormParams.init(d),
                A.AttentionParams.init(rng, d, h, relative=rel),
                LayerNormParams.init(d),
                A.AttentionParams.init(rng, d, h, relative=False),
                LayerNormParams.init(d),
                FeedForwardParams.init(rng, d, cfg.ffn_dim),
            )
            for _ in range(cfg.dec_layers)
        ]
        self.dec_ln = LayerNormParams.init(d)
        self.abs_table = absolute_encoding(cfg.max_len, d)
        self.rel_table = relative_encoding(cfg.max_len, d)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        return cls(cfg, np.random.default_rng(seed))

    def named_parameters(self):
        yield "frontend.w_in", self.w_in
        yield "frontend.b_in", self.b_in
        for i, layer in enumerate(self.enc_layers):
            yield from layer.named(f"encoder.{i}")
        yield from self.enc_ln.named("encoder.final_ln")
        yield "embedding.weight", self.embedding
        for i, layer in enumerate(self.dec_layers):
            yield from layer.named(f"decoder.{i}")
        yield from self.dec_ln.named("decoder.final_ln")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grads(self):
        for p in self.parameters():
            p.grad = None

    def ensure_tables(self, length: int):
        self.abs_table = grow(self.abs_table, length)
        self.rel_table = grow(self.rel_table, length)


def layer_drop_decision(layer_index: int, total_layers: int, p_max: float,
                        rng: np.random.Generator) -> bool:
    """Training-time keep/drop for layer ``layer_index`` (1-based).

    Drop probability grows linearly with depth: p_l = (l / L) * p_max,
    so the last layer is dropped with exactly p_max.
    """
    p = (layer_index / total_layers) * p_max
    return rng.random() >= p


def layer_keep_scale(layer_index: int, total_layers: int, p_max: float) -> float:
    """Inference-time factor (1 - p_l) applied to sub-layer outputs."""
    return 1.0 - (layer_index / total_layers) * p_max


def _dropout_mask(rng: np.random.Generator, d: int, p: float) -> np.ndarray | None:
    if p <= 0.0:
        return None
    return rng.random(d) >= p


def _attn_drop(cfg: ModelConfig, ctx: Optional[TrainContext], shape):
    p = cfg.attn_dropout_rate
    if ctx is None or not ctx.dropout or p <= 0.0:
        return None, 0.0
    return ctx.rng.random(shape) >= p, p


def _residual_branch(h: Tensor, branch: Tensor, cfg: ModelConfig,
                     ctx: Optional[TrainContext], scale: float) -> Tensor:
    """Residual add with shared-across-time dropout on the branch."""
    if ctx is not None and ctx.dropout:
        mask = _dropout_mask(ctx.rng, cfg.d_model, cfg.residual_dropout)
        branch = T.apply_dropout_mask(branch, mask, cfg.residual_dropout)
    if scale != 1.0:
        branch = T.scale(branch, scale)
    return T.add(h, branch)


def _feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    return T.add(T.matmul(T.relu(T.add(T.matmul(x, p.w1), p.b1)), p.w2), p.b2)


def stack_frames(x: np.ndarray, s: int) -> np.ndarray:
    """Stack s consecutive frames per output row, zero-padding the tail."""
    n, f = x.shape
    if s == 1:
        return x
    out_len = -(-n // s)
    padded = np.zeros((out_len * s, f), dtype=np.float64)
    padded[:n] = x
    return padded.reshape(out_len, s * f)


def speech_frontend(model: Model, x: np.ndarray, ctx: Optional[TrainContext]) -> Tensor:
    """Frame stacking plus linear projection into the model dimension.

    Absolute mode then adds the position encodings; relative mode leaves
    the inputs untouched because positions live in the energies.
    """
    cfg = model.cfg
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise T.ShapeError(f"features have shape {x.shape}, expected [N x {cfg.input_dim}]")
    if x.shape[0] == 0:
        raise ValueError("empty utterance")
    stacked = stack_frames(np.asarray(x, dtype=np.float64), cfg.frame_stack)
    model.ensure_tables(stacked.shape[0])
    h = T.add(T.matmul(Tensor(stacked), model.w_in), model.b_in)
    if cfg.position_mode == ABSOLUTE:
        h = T.add(h, Tensor(model.abs_table.rows[: stacked.shape[0]]))
    return h


def encoder_layer(model: Model, params: EncoderLayerParams, h: Tensor,
                  layer_index: int, ctx: Optional[TrainContext],
                  mask: np.ndarray | None = None) -> Tensor:
    cfg = model.cfg
    total = cfg.enc_layers
    if ctx is not None:
        if not layer_drop_decision(layer_index, total, cfg.layer_drop, ctx.rng):
            return h
        scale = 1.0
    else:
        scale = layer_keep_scale(layer_index, total, cfg.layer_drop)

    a = T.layer_norm(h, params.ln1.gain, params.ln1.bias)
    k = a.shape[0]
    drop_mask, drop_p = _attn_drop(cfg, ctx, (cfg.heads, k, k))
    attn = A.multi_head_attention(a, a, params.attn, cfg.position_mode, mask,
                                  model.rel_table, drop_mask, drop_p)
    h = _residual_branch(h, attn, cfg, ctx, scale)
    f = _feed_forward(T.layer_norm(h, params.ln2.gain, params.ln2.bias), params.ffn)
    return _residual_branch(h, f, cfg, ctx, scale)


def encode(model: Model, x: np.ndarray, ctx: Optional[TrainContext],
           valid_frames: int | None = None) -> tuple[Tensor, int]:
    """Run the encoder; returns hidden states and the count of valid rows.

    ``valid_frames`` marks the true length when ``x`` carries zero
    padding; padded key columns are masked out of self-attention so the
    valid rows match an unpadded computation.
    """
    cfg = model.cfg
    h = speech_frontend(model, x, ctx)
    k_total = h.shape[0]
    if valid_frames is None or valid_frames >= x.shape[0]:
        valid = k_total
        mask = None
    else:
        valid = -(-valid_frames // cfg.frame_stack)
        mask = A.padding_mask(k_total, k_total, valid)
    for i, layer in enumerate(model.enc_layers, start=1):
        h = encoder_layer(model, layer, h, i, ctx, mask)
    return T.layer_norm(h, model.enc_ln.gain, model.enc_ln.bias), valid


def decoder_layer(model: Model, params: DecoderLayerParams, h: Tensor,
                  enc: Tensor, layer_index: int, ctx: Optional[TrainContext],
                  self_mask: np.ndarray, cross_mask: np.ndarray | None) -> Tensor:
    cfg = model.cfg
    total = cfg.dec_layers
    if ctx is not None:
        if not layer_drop_decision(layer_index, total, cfg.layer_drop, ctx.rng):
            return h
        scale = 1.0
    else:
        scale = layer_keep_scale(layer_index, total, cfg.layer_drop)

    m = h.shape[0]
    a = T.layer_norm(h, params.ln1.gain, params.ln1.bias)
    drop_mask, drop_p = _attn_drop(cfg, ctx, (cfg.heads, m, m))
    self_out = A.multi_head_attention(a, a, params.self_attn, cfg.position_mode,
                                      self_mask, model.rel_table, drop_mask, drop_p)
    h = _residual_branch(h, self_out, cfg, ctx, scale)

    b = T.layer_norm(h, params.ln2.gain, params.ln2.bias)
    drop_mask, drop_p = _attn_drop(cfg, ctx, (cfg.heads, m, enc.shape[0]))
    cross_out = A.multi_head_attention(b, enc, params.cross_attn, ABSOLUTE,
                                       cross_mask, None, drop_mask, drop_p)
    h = _residual_branch(h, cross_out, cfg, ctx, scale)

    f = _feed_forward(T.layer_norm(h, params.ln3.gain, params.ln3.bias), params.ffn)
    return _residual_branch(h, f, cfg, ctx, scale)


def _check_token_ids(y: np.ndarray, vocab_size: int):
    if y.size == 0:
        raise ValueError("empty token sequence")
    if y.min() < 0 or y.max() >= vocab_size:
        raise ValueError(f"token id outside vocabulary of size {vocab_size}")


def decode_states(model: Model, y: np.ndarray, enc: Tensor, enc_valid: int,
                  ctx: Optional[TrainContext]) -> Tensor:
    """Teacher-forced decoder states for input tokens ``y`` (BOS first)."""
    cfg = model.cfg
    m = len(y)
    ids = np.asarray(y, dtype=np.intp)
    if ctx is not None and ctx.dropout and cfg.word_dropout > 0.0:
        replace = ctx.rng.random(m) < cfg.word_dropout
        ids = np.where(replace, UNK_ID, ids)
    model.ensure_tables(m)
    h = T.embed_rows(model.embedding, ids)
    if cfg.position_mode == ABSOLUTE:
        h = T.add(h, Tensor(model.abs_table.rows[:m]))
    self_mask = A.causal_mask(m)
    cross_mask = None
    if enc_valid < enc.shape[0]:
        cross_mask = A.padding_mask(m, enc.shape[0], enc_valid)
    for i, layer in enumerate(model.dec_layers, start=1):
        h = decoder_layer(model, layer, h, enc, i, ctx, self_mask, cross_mask)
    return T.layer_norm(h, model.dec_ln.gain, model.dec_ln.bias)


def output_logits(model: Model, dec_states: Tensor) -> Tensor:
    """Vocabulary logits via the transposed (tied) embedding matrix."""
    return T.matmul(dec_states, T.transpose2d(model.embedding))


def forward_train(model: Model, x: np.ndarray, y, ctx: Optional[TrainContext] = None,
                  valid_frames: int | None = None) -> Tensor:
    """Logits [M x V] for teacher forcing; y must start with BOS."""
    y = np.asarray(y, dtype=np.intp)
    _check_token_ids(y, model.cfg.vocab_size)
    if y[0] != BOS_ID:
        raise ValueError("decoder input must begin with BOS")
    enc, enc_valid = encode(model, x, ctx, valid_frames)
    dec = decode_states(model, y, enc, enc_valid, ctx)
    return output_logits(model, dec)


def shifted_targets(y, valid_tokens: int | None = None) -> tuple[np.ndarray, int]:
    """Targets for decoder input y: y shifted left, ending in EOS.

    Positions past ``valid_tokens`` (when y carries PAD) are filled with
    PAD and excluded by the loss weighting.
    """
    y = np.asarray(y, dtype=np.intp)
    m = len(y)
    valid = m if valid_tokens is None else valid_tokens
    targets = np.full(m, PAD_ID, dtype=np.intp)
    targets[: valid - 1] = y[1:valid]
    targets[valid - 1] = EOS_ID
    return targets, valid


def sequence_loss(logits: Tensor, targets: np.ndarray, valid_tokens: int,
                  smoothing: float = 0.0) -> tuple[Tensor, int]:
    """Summed (not averaged) cross entropy over the first ``valid_tokens`` rows.

    With label smoothing eps the target distribution mixes (1-eps) on
    the gold token with eps spread uniformly over the vocabulary.
    """
    m, vocab = logits.shape
    weights = np.zeros(m)
    weights[:valid_tokens] = 1.0
    logp = T.log_softmax_rows(logits)
    gold = T.sum_all(T.mul(T.take_per_row(logp, targets), Tensor(weights)))
    loss = T.scale(gold, -(1.0 - smoothing))
    if smoothing > 0.0:
        spread = T.sum_all(T.mul(logp, Tensor(weights[:, None])))
        loss = T.add(loss, T.scale(spread, -smoothing / vocab))
    return loss, valid_tokens


def utterance_loss(model: Model, x: np.ndarray, y, ctx: Optional[TrainContext] = None,
                   smoothing: float = 0.0, valid_frames: int | None = None,
                   valid_tokens: int | None = None) -> tuple[Tensor, int]:
    logits = forward_train(model, x, y, ctx, valid_frames)
    targets, valid = shifted_targets(y, valid_tokens)
    return sequence_loss(logits, targets, valid, smoothing)


class DecoderCache:
    """Per-layer projected key/value state for incremental decoding."""

    def __init__(self, model: Model, enc: Tensor):
        self.length = 0
        self.self_k = [None] * len(model.dec_layers)
        self.self_v = [None] * len(model.dec_layers)
        self.cross_k = []
        self.cross_v = []
        for layer in model.dec_layers:
            heads = layer.cross_attn.heads
            self.cross_k.append(A.project_heads(enc, layer.cross_attn.w_k, heads).data)
            self.cross_v.append(A.project_heads(enc, layer.cross_attn.w_v, heads).data)

    def append_self(self, idx: int, k: np.ndarray, v: np.ndarray):
        if self.self_k[idx] is None:
            self.self_k[idx] = k
            self.self_v[idx] = v
        else:
            self.self_k[idx] = np.concatenate([self.self_k[idx], k], axis=1)
            self.self_v[idx] = np.concatenate([self.self_v[idx], v], axis=1)


def _attend(weights: np.ndarray, values: np.ndarray, w_o: Tensor) -> np.ndarray:
    out = np.matmul(weights, values)
    h, kq, d = out.shape
    return out.transpose(1, 0, 2).reshape(kq, h * d) @ w_o.data


def _softmax_last(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _ln_rows(x: np.ndarray, p: LayerNormParams, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    return (c / np.sqrt(var + eps)) * p.gain.data + p.bias.data


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    k, d = x.shape
    return x.reshape(k, heads, d // heads).transpose(1, 0, 2)


def decode_step(model: Model, cache: DecoderCache, token_id: int) -> np.ndarray:
    """Advance the incremental decoder by one token; returns the logit row.

    Reproduces the full-sequence forward at the current position to
    float64 round-off: identical projections, energies and residuals,
    restricted to the new query row.
    """
    cfg = model.cfg
    pos = cache.length
    model.ensure_tables(pos + 1)
    h = model.embedding.data[np.asarray([token_id], dtype=np.intp)]
    if cfg.position_mode == ABSOLUTE:
        h = h + model.abs_table.rows[pos:pos + 1]
    scale = 1.0 / math.sqrt(cfg.d_model // cfg.heads)
    for idx, layer in enumerate(model.dec_layers):
        keep = layer_keep_scale(idx + 1, cfg.dec_layers, cfg.layer_drop)
        a = _ln_rows(h, layer.ln1)
        q = _split_heads(a @ layer.self_attn.w_q.data, cfg.heads)
        cache.append_self(idx,
                          _split_heads(a @ layer.self_attn.w_k.data, cfg.heads),
                          _split_heads(a @ layer.self_attn.w_v.data, cfg.heads))
        keys = cache.self_k[idx]
        energies = np.matmul(q, keys.transpose(0, 2, 1))
        if cfg.position_mode == RELATIVE:
            table = model.rel_table
            # distances pos..0 for keys 0..pos are contiguous table rows
            rows = table.rows[table.max_len - 1 - pos: table.max_len]
            rel = _split_heads(rows @ layer.self_attn.w_r.data, cfg.heads)
            heads_dim = cfg.d_model // cfg.heads
            u = layer.self_attn.u.data.reshape(cfg.heads, 1, heads_dim)
            v = layer.self_attn.v.data.reshape(cfg.heads, 1, heads_dim)
            energies = energies + np.matmul(u, keys.transpose(0, 2, 1))
            energies = energies + np.matmul(q + v, rel.transpose(0, 2, 1))
        h = h + keep * _attend(_softmax_last(energies * scale),
                               cache.self_v[idx], layer.self_attn.w_o)

        b = _ln_rows(h, layer.ln2)
        qc = _split_heads(b @ layer.cross_attn.w_q.data, cfg.heads)
        cross_e = np.matmul(qc, cache.cross_k[idx].transpose(0, 2, 1)) * scale
        h = h + keep * _attend(_softmax_last(cross_e),
                               cache.cross_v[idx], layer.cross_attn.w_o)

        f = _ln_rows(h, layer.ln3)
        f = np.maximum(f @ layer.ffn.w1.data + layer.ffn.b1.data, 0.0) @ layer.ffn.w2.data
        h = h + keep * (f + layer.ffn.b2.data)
    cache.length += 1
    final = _ln_rows(h, model.dec_ln)
    return (final @ model.embedding.data.T)[0]


def decode_greedy(model: Model, x: np.ndarray, max_out: int,
                  use_cache: bool = True, sample: bool = False,
                  rng: np.random.Generator | None = None,
                  collect_logits: bool = False):
    """Autoregressive decoding from BOS until EOS or ``max_out`` tokens.

    Greedy argmax by default; ``sample=True`` draws from the softmax
    instead. ``use_cache=False`` re-runs the full decoder prefix at each
    step (slow path used to validate the cache).
    """
    if max_out <= 0:
        raise ValueError(f"max_out must be positive, got {max_out}")
    if sample and rng is None:
        raise ValueError("sampling requires an rng")
    enc, enc_valid = encode(model, x, None)
    cache = DecoderCache(model, enc) if use_cache else None
    tokens = [BOS_ID]
    out: list[int] = []
    logits_rows = []
    for _ in range(max_out):
        if use_cache:
            row = decode_step(model, cache, tokens[-1])
        else:
            states = decode_states(model, np.asarray(tokens), enc, enc_valid, None)
            row = output_logits(model, states).data[-1]
        if collect_logits:
            logits_rows.append(row)
        if sample:
            probs = _softmax_last(row)
            nxt = int(rng.choice(len(probs), p=probs))
        else:
            nxt = int(np.argmax(row))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        tokens.append(nxt)
    if collect_logits:
        return out, logits_rows
    return out
