"""Small Transformer encoder with three decoder variants.

* ``ARModel``: standard autoregressive decoder (causal self-attention).
* ``NATModel``: fully parallel decoder over uniform-copied source
  embeddings, with an extra positional-attention sub-layer per layer;
  a single forward pass emits the distribution for every position.
* ``FSModel``: hybrid decoder whose bottom layers are NAT-style and run
  once, fused with shifted target embeddings through a ReLU layer and
  finished by one causal top layer.

All models share the encoder implementation and parameter-initialization
order, so equal seeds give bit-identical encoders across variants. Batches
carry sequences of equal length (bucketing happens upstream), so no padding
masks are needed inside a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc

PAD, BOS, EOS, UNK = 0, 1, 2, 3
N_RESERVED = 4


class CapacityError(RuntimeError):
    """Sequence exceeds the model's configured maximum length."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    d_hidden: int = 64
    n_layer: int = 2
    n_head: int = 2
    p_dropout: float = 0.0
    vocab_size: int = 24
    max_len: int = 64

    def __post_init__(self):
        if self.d_model % self.n_head != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_head={self.n_head}"
            )
        if self.n_layer < 2:
            raise ValueError(f"n_layer must be >= 2, got {self.n_layer}")


def sinusoidal_encoding(length, d_model):
    pos = np.arange(length)[:, None]
    dim = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d_model)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def uniform_copy_positions(src_len, out_len):
    """Source position (0-based) feeding each of ``out_len`` decoder slots.

    Decoder position t (1-based) reads source position
    clamp(round_half_up(t * src_len / out_len), 1, src_len).
    """
    t = np.arange(1, out_len + 1)
    pos = np.floor(t * src_len / out_len + 0.5).astype(np.int64)
    return np.clip(pos, 1, src_len) - 1


class ParamStore:
    """Named parameter registry with a deterministic creation order."""

    def __init__(self, rng):
        self.rng = rng
        self.params = {}

    def _register(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        t = tc.Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def matrix(self, name, fan_in, fan_out, scale=1.0):
        bound = scale * math.sqrt(6.0 / (fan_in + fan_out))
        return self._register(name, self.rng.uniform(-bound, bound, (fan_in, fan_out)))

    def zeros(self, name, *shape):
        return self._register(name, np.zeros(shape))

    def ones(self, name, *shape):
        return self._register(name, np.ones(shape))

    def embedding(self, name, vocab, dim):
        return self._register(name, self.rng.normal(0.0, dim**-0.5, (vocab, dim)))


class Linear:
    def __init__(self, store, name, d_in, d_out, scale=1.0):
        self.w = store.matrix(f"{name}.w", d_in, d_out, scale)
        self.b = store.zeros(f"{name}.b", d_out)

    def __call__(self, x):
        return tc.add(tc.matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, store, name, dim):
        self.gain = store.ones(f"{name}.gain", dim)
        self.bias = store.zeros(f"{name}.bias", dim)

    def __call__(self, x):
        return tc.layer_norm(x, self.gain, self.bias)


def _split_heads(x, n_head):
    # (..., T, d) -> (..., h, T, d/h)
    *lead, T, d = x.shape
    x = tc.reshape(x, (*lead, T, n_head, d // n_head))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return tc.transpose(x, axes)


def _merge_heads(x):
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = tc.transpose(x, axes)
    *lead, T, h, dh = x.shape
    return tc.reshape(x, (*lead, T, h * dh))


class MultiHeadAttention:
    def __init__(self, store, name, d_model, n_head):
        self.n_head = n_head
        self.scale = 1.0 / math.sqrt(d_model // n_head)
        self.wq = Linear(store, f"{name}.q", d_model, d_model)
        self.wk = Linear(store, f"{name}.k", d_model, d_model)
        self.wv = Linear(store, f"{name}.v", d_model, d_model)
        self.wo = Linear(store, f"{name}.o", d_model, d_model)

    def __call__(self, q_in, k_in, v_in, mask=None):
        q = _split_heads(self.wq(q_in), self.n_head)
        k = _split_heads(self.wk(k_in), self.n_head)
        v = _split_heads(self.wv(v_in), self.n_head)
        k_axes = list(range(k.ndim))
        k_axes[-1], k_axes[-2] = k_axes[-2], k_axes[-1]
        scores = tc.mul(tc.matmul(q, tc.transpose(k, k_axes)), self.scale)
        if mask is not None:
            scores = tc.masked_fill(scores, mask, -1e9)
        ctx = tc.matmul(tc.softmax_rows(scores), v)
        return self.wo(_merge_heads(ctx))


class FeedForward:
    def __init__(self, store, name, d_model, d_hidden):
        self.inner = Linear(store, f"{name}.inner", d_model, d_hidden)
        self.outer = Linear(store, f"{name}.outer", d_hidden, d_model)

    def __call__(self, x):
        return self.outer(tc.relu(self.inner(x)))


def causal_mask(T):
    return np.triu(np.ones((T, T), dtype=bool), k=1)


class EncoderLayer:
    def __init__(self, store, name, cfg):
        self.attn = MultiHeadAttention(store, f"{name}.attn", cfg.d_model, cfg.n_head)
        self.ff = FeedForward(store, f"{name}.ff", cfg.d_model, cfg.d_hidden)
        self.norm1 = LayerNorm(store, f"{name}.norm1", cfg.d_model)
        self.norm2 = LayerNorm(store, f"{name}.norm2", cfg.d_model)

    def __call__(self, x):
        x = self.norm1(tc.add(x, self.attn(x, x, x)))
        return self.norm2(tc.add(x, self.ff(x)))


class ARDecoderLayer:
    """Causal self-attention, source attention, feed-forward."""

    def __init__(self, store, name, cfg):
        self.self_attn = MultiHeadAttention(store, f"{name}.self", cfg.d_model, cfg.n_head)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross", cfg.d_model, cfg.n_head)
        self.ff = FeedForward(store, f"{name}.ff", cfg.d_model, cfg.d_hidden)
        self.norm1 = LayerNorm(store, f"{name}.norm1", cfg.d_model)
        self.norm2 = LayerNorm(store, f"{name}.norm2", cfg.d_model)
        self.norm3 = LayerNorm(store, f"{name}.norm3", cfg.d_model)

    def __call__(self, x, enc):
        T = x.shape[-2]
        x = self.norm1(tc.add(x, self.self_attn(x, x, x, mask=causal_mask(T))))
        x = self.norm2(tc.add(x, self.cross_attn(x, enc, enc)))
        return self.norm3(tc.add(x, self.ff(x)))


class NATDecoderLayer:
    """Unmasked self-attention, positional attention (sinusoidal queries and
    keys over the layer's hidden states), source attention, feed-forward."""

    def __init__(self, store, name, cfg):
        self.self_attn = MultiHeadAttention(store, f"{name}.self", cfg.d_model, cfg.n_head)
        self.pos_attn = MultiHeadAttention(store, f"{name}.pos", cfg.d_model, cfg.n_head)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross", cfg.d_model, cfg.n_head)
        self.ff = FeedForward(store, f"{name}.ff", cfg.d_model, cfg.d_hidden)
        self.norm1 = LayerNorm(store, f"{name}.norm1", cfg.d_model)
        self.norm2 = LayerNorm(store, f"{name}.norm2", cfg.d_model)
        self.norm3 = LayerNorm(store, f"{name}.norm3", cfg.d_model)
        self.norm4 = LayerNorm(store, f"{name}.norm4", cfg.d_model)

    def __call__(self, x, enc, pos_enc):
        x = self.norm1(tc.add(x, self.self_attn(x, x, x)))
        x = self.norm2(tc.add(x, self.pos_attn(pos_enc, pos_enc, x)))
        x = self.norm3(tc.add(x, self.cross_attn(x, enc, enc)))
        return self.norm4(tc.add(x, self.ff(x)))


@dataclass
class LengthTable:
    """Source length -> most frequent target length."""

    table: dict = field(default_factory=dict)
    lookups: int = 0
    fallbacks: int = 0


def predict_length(src_len, table):
    """Predicted target length: exact key, else the value at the nearest key
    (ties toward the smaller key), else the source length itself."""
    if src_len < 1:
        raise ValueError(f"src_len must be >= 1, got {src_len}")
    table.lookups += 1
    if src_len in table.table:
        return table.table[src_len]
    table.fallbacks += 1
    if table.table:
        key = min(table.table, key=lambda k: (abs(k - src_len), k))
        return table.table[key]
    return src_len


class ModelBase:
    """Shared embedding, encoder stack, softmax head, and call counters."""

    kind = "base"

    def __init__(self, config, seed=0):
        self.config = config
        enc_rng, dec_rng = np.random.default_rng(seed).spawn(2)
        # encoder params first, from their own stream: identical across
        # decoder variants for equal seeds
        store = ParamStore(enc_rng)
        self.embed = store.embedding("embed", config.vocab_size, config.d_model)
        self.enc_layers = [
            EncoderLayer(store, f"enc.{i}", config) for i in range(config.n_layer)
        ]
        store.rng = dec_rng
        self.store = store
        self.pe = sinusoidal_encoding(config.max_len, config.d_model)
        self.encoder_calls = 0
        self.training = False
        self.dropout_rng = np.random.default_rng(seed + 1)
        self._build_decoder(store, config)
        # small-scale head init keeps initial predictions near uniform
        self.out_proj = Linear(store, "out", config.d_model, config.vocab_size, scale=0.1)

    def _build_decoder(self, store, config):
        raise NotImplementedError

    def parameters(self):
        return list(self.store.params.values())

    def state(self):
        return {k: v.data for k, v in self.store.params.items()}

    def load_state(self, state):
        for name, tensor in self.store.params.items():
            data = np.asarray(state[name], dtype=np.float64)
            if data.shape != tensor.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            tensor.data = data.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def reset_counters(self):
        for name in list(vars(self)):
            if name.endswith("_calls"):
                setattr(self, name, 0)

    def _check_len(self, length, what):
        if length > self.config.max_len:
            raise CapacityError(
                f"{what} length {length} exceeds max_len {self.config.max_len}"
            )

    def _embed_tokens(self, ids):
        scale = math.sqrt(self.config.d_model)
        return tc.mul(tc.embedding(self.embed, ids), scale)

    def _dropout(self, x):
        return tc.dropout(x, self.config.p_dropout, self.dropout_rng, self.training)

    def encode(self, src_ids):
        """Run the encoder on a (B, T_s) id array."""
        src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        self._check_len(src_ids.shape[1], "source")
        self.encoder_calls += 1
        x = tc.add(self._embed_tokens(src_ids), self.pe[: src_ids.shape[1]])
        x = self._dropout(x)
        for layer in self.enc_layers:
            x = layer(x)
        return x

    def _head(self, x):
        return tc.softmax_rows(self.out_proj(x))


class ARModel(ModelBase):
    kind = "ar"

    def _build_decoder(self, store, config):
        self.dec_layers = [
            ARDecoderLayer(store, f"dec.{i}", config) for i in range(config.n_layer)
        ]
        self.decoder_calls = 0

    def forward(self, src_ids, tgt_in, enc=None):
        """Teacher-forced distributions: position t conditions on
        tgt_in[:t+1] (the shifted history) and the source only."""
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        self._check_len(tgt_in.shape[1], "target")
        if enc is None:
            enc = self.encode(src_ids)
        self.decoder_calls += 1
        x = tc.add(self._embed_tokens(tgt_in), self.pe[: tgt_in.shape[1]])
        x = self._dropout(x)
        for layer in self.dec_layers:
            x = layer(x, enc)
        return self._head(x)

    def train_distributions(self, src_ids, tgt_ids):
        return self.forward(src_ids, shift_right(tgt_ids))


class NATModel(ModelBase):
    kind = "nat"

    def _build_decoder(self, store, config):
        self.dec_layers = [
            NATDecoderLayer(store, f"dec.{i}", config) for i in range(config.n_layer)
        ]
        self.decoder_calls = 0

    def forward(self, src_ids, out_len, enc=None):
        """All ``out_len`` position distributions in one decoder pass."""
        src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        self._check_len(out_len, "decoder")
        if enc is None:
            enc = self.encode(src_ids)
        self.decoder_calls += 1
        copy_idx = uniform_copy_positions(src_ids.shape[1], out_len)
        x = tc.add(self._embed_tokens(src_ids[:, copy_idx]), self.pe[:out_len])
        x = self._dropout(x)
        pos_enc = tc.Tensor(self.pe[:out_len])
        for layer in self.dec_layers:
            x = layer(x, enc, pos_enc)
        return self._head(x)

    def train_distributions(self, src_ids, tgt_ids):
        tgt_ids = np.atleast_2d(np.asarray(tgt_ids, dtype=np.int64))
        return self.forward(src_ids, tgt_ids.shape[1])


class FSModel(ModelBase):
    kind = "fs"

    def _build_decoder(self, store, config):
        self.bottom_layers = [
            NATDecoderLayer(store, f"bottom.{i}", config)
            for i in range(config.n_layer - 1)
        ]
        self.fuse_w = store.matrix("fuse.w", config.d_model, config.d_model)
        self.fuse_u = store.matrix("fuse.u", config.d_model, config.d_model)
        self.top_layer = ARDecoderLayer(store, "top", config)
        self.bottom_calls = 0
        self.top_calls = 0

    def bottom_states(self, src_ids, out_len, enc=None):
        """One parallel pass of the NAT-style bottom layers."""
        src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        self._check_len(out_len, "decoder")
        if enc is None:
            enc = self.encode(src_ids)
        self.bottom_calls += 1
        copy_idx = uniform_copy_positions(src_ids.shape[1], out_len)
        x = tc.add(self._embed_tokens(src_ids[:, copy_idx]), self.pe[:out_len])
        x = self._dropout(x)
        pos_enc = tc.Tensor(self.pe[:out_len])
        for layer in self.bottom_layers:
            x = layer(x, enc, pos_enc)
        return x, enc

    def _fit_length(self, h, target_len):
        """Pad bottom states with zero vectors, or truncate, to target_len."""
        cur = h.shape[1]
        if cur == target_len:
            return h
        if cur > target_len:
            return tc.slice_axis(h, 1, 0, target_len)
        pad = tc.Tensor(np.zeros((h.shape[0], target_len - cur, h.shape[2])))
        return tc.concat([h, pad], axis=1)

    def fuse_and_top(self, h_bottom, tgt_in, enc):
        """ReLU fusion of bottom states with shifted target embeddings,
        then one causal decoder layer and the softmax head."""
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        self.top_calls += 1
        h = self._fit_length(h_bottom, tgt_in.shape[1])
        y = tc.add(self._embed_tokens(tgt_in), self.pe[: tgt_in.shape[1]])
        fused = tc.relu(tc.add(tc.matmul(h, self.fuse_w), tc.matmul(y, self.fuse_u)))
        x = self.top_layer(fused, enc)
        return self._head(x)

    def forward_train(self, src_ids, tgt_ids, out_len=None):
        tgt_ids = np.atleast_2d(np.asarray(tgt_ids, dtype=np.int64))
        if out_len is None:
            out_len = tgt_ids.shape[1]
        h, enc = self.bottom_states(src_ids, out_len)
        return self.fuse_and_top(h, shift_right(tgt_ids), enc)

    def train_distributions(self, src_ids, tgt_ids):
        return self.forward_train(src_ids, tgt_ids)


MODEL_KINDS = {"ar": ARModel, "nat": NATModel, "fs": FSModel}


def build_model(kind, config, seed=0):
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    return MODEL_KINDS[kind](config, seed=seed)


def shift_right(tgt_ids, bos=BOS):
    """Prepend BOS and drop the last token: position t sees tokens < t."""
    tgt_ids = np.atleast_2d(np.asarray(tgt_ids, dtype=np.int64))
    out = np.empty_like(tgt_ids)
    out[:, 0] = bos
    out[:, 1:] = tgt_ids[:, :-1]
    return out


def sequence_logprob(probs, tokens):
    """Length-normalized log-probability of a token row under (T, V) probs."""
    tokens = np.asarray(tokens, dtype=np.int64)
    p = probs[np.arange(len(tokens)), tokens]
    return float(np.log(np.maximum(p, 1e-300)).sum() / max(len(tokens), 1))


def nat_argmax(model, src_ids, out_len):
    """Raw NAT decode: one forward pass, per-row argmax."""
    probs = model.forward(src_ids, out_len)
    return probs.data[0].argmax(axis=1).tolist()


class _Stepper:
    """Adapter giving AR and FS models a shared incremental-decoding surface."""

    def __init__(self, model, src_ids, out_len):
        self.model = model
        self.out_len = out_len
        if model.kind == "fs":
            self.h, self.enc = model.bottom_states(src_ids, out_len)
        elif model.kind == "ar":
            self.enc = model.encode(src_ids)
        else:
            raise ValueError(f"incremental decoding undefined for {model.kind!r}")

    def step_probs(self, prefixes):
        """Next-token distributions for a stack of equal-length prefixes."""
        tgt_in = np.array([[BOS] + list(p) for p in prefixes], dtype=np.int64)
        if self.model.kind == "fs":
            b = tgt_in.shape[0]
            h = self.h if self.h.shape[0] == b else tc.Tensor(
                np.broadcast_to(self.h.data, (b, *self.h.data.shape[1:])).copy()
            )
            enc = self.enc if self.enc.shape[0] == b else tc.Tensor(
                np.broadcast_to(self.enc.data, (b, *self.enc.data.shape[1:])).copy()
            )
            probs = self.model.fuse_and_top(h, tgt_in, enc)
        else:
            b = tgt_in.shape[0]
            enc = self.enc if self.enc.shape[0] == b else tc.Tensor(
                np.broadcast_to(self.enc.data, (b, *self.enc.data.shape[1:])).copy()
            )
            probs = self.model.forward(None, tgt_in, enc=enc)
        return probs.data[:, -1, :]


def beam_decode(model, src_ids, out_len, beam=1, force_include=()):
    """Length-normalized beam search for AR and FS models; greedy when beam=1.

    One decoder invocation per emitted step (live beams are stacked into a
    batch). Stops on EOS or after ``out_len`` steps. ``force_include`` adds
    extra candidate token sequences to the final selection, scored under the
    model; decoding itself is unchanged.

    Returns (tokens, steps) where tokens is the raw best hypothesis
    (terminating EOS stripped) and steps the number of decoder steps taken.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    stepper = _Stepper(model, src_ids, out_len)
    live = [((), 0.0)]
    finished = []
    steps = 0
    for _ in range(out_len):
        probs = stepper.step_probs([tokens for tokens, _ in live])
        steps += 1
        logp = np.log(np.maximum(probs, 1e-300))
        candidates = []
        for (tokens, score), row in zip(live, logp):
            order = np.argsort(-row, kind="stable")[: beam + 1]
            for tok in order:
                candidates.append((tokens + (int(tok),), score + float(row[tok])))
        candidates.sort(key=lambda c: (-c[1] / len(c[0]), c[0]))
        live = []
        for tokens, score in candidates:
            if tokens[-1] == EOS:
                finished.append((tokens, score / len(tokens)))
            elif len(live) < beam:
                live.append((tokens, score))
            if len(finished) >= beam and len(live) >= beam:
                break
        if not live:
            break
    for tokens, score in live:
        finished.append((tokens, score / max(len(tokens), 1)))
    for extra in force_include:
        finished.append((tuple(extra), score_sequence(model, src_ids, extra, out_len)))
    finished.sort(key=lambda c: (-c[1], c[0]))
    best = list(finished[0][0])
    if best and best[-1] == EOS:
        best = best[:-1]
    return best, steps


def score_sequence(model, src_ids, tokens, out_len=None):
    """Length-normalized log-probability of a full hypothesis (with its
    terminating EOS) under an AR or FS model, via teacher forcing."""
    tokens = list(tokens)
    if not tokens:
        return float("-inf")
    row = np.array([tokens], dtype=np.int64)
    if model.kind == "ar":
        probs = model.forward(src_ids, shift_right(row))
    else:
        probs = model.forward_train(src_ids, row, out_len=out_len or len(tokens))
    return sequence_logprob(probs.data[0], tokens)
