"""Training loops, decoding, evaluation, and knowledge distillation.

Targets are stored as bare payload sequences. The autoregressive and hybrid
decoders train and decode with an explicit end-of-sequence token appended;
the parallel decoder predicts exactly the payload and relies on the length
table at inference. Cross-entropy training and RL fine-tuning always use the
true target length; predicted lengths are exercised only by decoding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import estimators as est
from . import rewards
from . import tensor as tc
from .data import build_length_table
from .models import EOS, PAD, LengthTable, beam_decode, predict_length

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_steps: int = 2000
    lr: float = 0.01
    warmup: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    patience: int = 10
    rng_seed: int = 0
    eval_every: int = 200

    def __post_init__(self):
        if self.warmup < 0:
            raise ContractError(f"warmup must be >= 0, got {self.warmup}")
        if self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "nat_argmax"
    beam: int = 1
    dedup: bool = True

    def __post_init__(self):
        if self.mode not in ("nat_argmax", "greedy", "beam"):
            raise ContractError(f"unknown decode mode {self.mode!r}")
        if self.beam < 1:
            raise ContractError(f"beam must be >= 1, got {self.beam}")


class Adam:
    """Adam with the inverse-sqrt warmup schedule (peak rate at ``warmup``)."""

    def __init__(self, params, cfg):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def rate(self, step):
        warm = max(self.cfg.warmup, 1)
        return self.cfg.lr * math.sqrt(warm) * min(step**-0.5, step * warm**-1.5)

    def step(self):
        self.step_count += 1
        lr = self.rate(self.step_count)
        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.step_count)
            vhat = v / (1 - b2**self.step_count)
            p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def _prep_target(kind, tgt):
    """AR and FS targets carry a terminating EOS; NAT predicts bare payload."""
    return tuple(tgt) if kind == "nat" else tuple(tgt) + (EOS,)


def _batches(corpus, kind, batch_size, rng):
    """One epoch of batches, bucketed by (source length, target length) so
    every batch is rectangular without padding."""
    buckets = {}
    for src, tgt in corpus.pairs:
        t = _prep_target(kind, tgt)
        buckets.setdefault((len(src), len(t)), []).append((src, t))
    batches = []
    for key in sorted(buckets):
        group = buckets[key]
        rng.shuffle(group)
        for i in range(0, len(group), batch_size):
            chunk = group[i : i + batch_size]
            batches.append(
                (
                    np.array([p[0] for p in chunk], dtype=np.int64),
                    np.array([p[1] for p in chunk], dtype=np.int64),
                )
            )
    rng.shuffle(batches)
    return batches


def _step_generator(corpus, kind, batch_size, rng, max_steps):
    done = 0
    while done < max_steps:
        for batch in _batches(corpus, kind, batch_size, rng):
            yield batch
            done += 1
            if done >= max_steps:
                return


def _nll_loss(model, src_batch, tgt_batch):
    """Mean per-token negative log-likelihood."""
    probs = model.train_distributions(src_batch, tgt_batch)
    B, T = tgt_batch.shape
    rows = np.repeat(np.arange(B), T)
    cols = np.tile(np.arange(T), B)
    picked = tc.take(probs, (rows, cols, tgt_batch.reshape(-1)))
    return tc.mul(tc.tsum(tc.log(picked)), -1.0 / (B * T))


def mean_validation_gleu(model, corpus, dec, table):
    total = 0.0
    for src, tgt in corpus.pairs:
        hyp = decode(model, src, dec, table)
        total += rewards.gleu(hyp, tgt)
    return total / corpus.size


def _default_decode_config(kind):
    return DecodeConfig(mode="nat_argmax" if kind == "nat" else "greedy")


def train_ce(model, corpus, cfg, valid=None, table=None):
    """Token-level cross-entropy training with Adam and warmup.

    Returns metric log rows (step, split, metric, value). Validation GLEU is
    computed every ``eval_every`` steps when a validation corpus is given;
    training stops early once ``patience`` evaluations pass without
    improvement.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    opt = Adam(model.parameters(), cfg)
    if valid is not None and table is None:
        table = build_length_table(corpus)
    dec = _default_decode_config(model.kind)
    rows, best, since_best = [], -1.0, 0
    model.training = True
    for step, (srcs, tgts) in enumerate(
        _step_generator(corpus, model.kind, cfg.batch_size, rng, cfg.max_steps), 1
    ):
        model.zero_grad()
        loss = _nll_loss(model, srcs, tgts)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"loss diverged to {value} at step {step}")
        loss.backward()
        opt.step()
        rows.append((step, "train", "loss", value))
        if valid is not None and step % cfg.eval_every == 0:
            model.training = False
            score = mean_validation_gleu(model, valid, dec, table)
            model.training = True
            rows.append((step, "valid", "gleu", score))
            if score > best:
                best, since_best = score, 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    model.training = False
    return rows


def finetune_rl(model, corpus, est_cfg, reward, cfg, valid=None, table=None):
    """Sequence-level fine-tuning of a parallel decoder with the top-k
    traversal estimator; the reference is the corpus target (distilled when a
    distilled corpus is supplied)."""
    if model.kind != "nat":
        raise ContractError(
            f"sequence-level fine-tuning is defined for the factorized NAT "
            f"output only, got model kind {model.kind!r}"
        )
    rng = np.random.default_rng(cfg.rng_seed)
    est_rng = np.random.default_rng(est_cfg.rng_seed)
    opt = Adam(model.parameters(), cfg)
    if valid is not None and table is None:
        table = build_length_table(corpus)
    dec = _default_decode_config(model.kind)
    rows, best, since_best = [], -1.0, 0
    for step, (srcs, tgts) in enumerate(
        _step_generator(corpus, model.kind, cfg.batch_size, rng, cfg.max_steps), 1
    ):
        model.zero_grad()
        probs = model.train_distributions(srcs, tgts)
        B = srcs.shape[0]
        surrogate = None
        dnorm = 0.0
        for b, stream in enumerate(est_rng.spawn(B)):
            dist = est.PositionDistributions(
                probs.data[b], tensor=probs, prefix=(b,)
            )
            ge = est.reinforce_nat_step(dist, est_cfg, reward, tgts[b], stream)
            dnorm += float(np.abs(ge.dprobs).sum())
            if ge.surrogate is not None:
                surrogate = (
                    ge.surrogate
                    if surrogate is None
                    else tc.add(surrogate, ge.surrogate)
                )
        if surrogate is None:
            raise TrainingError(f"estimator produced no surrogate at step {step}")
        loss = tc.mul(surrogate, 1.0 / B)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"surrogate diverged to {value} at step {step}")
        loss.backward()
        opt.step()
        rows.append((step, "train", "surrogate", value))
        rows.append((step, "train", "dprobs_l1", dnorm / B))
        if valid is not None and step % cfg.eval_every == 0:
            score = mean_validation_gleu(model, valid, dec, table)
            rows.append((step, "valid", "gleu", score))
            if score > best:
                best, since_best = score, 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    return rows


def dedup_consecutive(tokens):
    """Collapse runs of the same token to a single occurrence."""
    out = []
    for t in tokens:
        if not out or out[-1] != t:
            out.append(int(t))
    return out


def _strip(tokens):
    tokens = list(tokens)
    while tokens and tokens[-1] in (PAD, EOS):
        tokens.pop()
    return tokens


def _decode_raw(model, src, dec, table):
    """Decode one sentence; returns (clean tokens, raw emitted length)."""
    src = tuple(int(t) for t in src)
    src_arr = np.array([src], dtype=np.int64)
    table = table if table is not None else LengthTable()
    if model.kind == "nat":
        if dec.mode != "nat_argmax":
            raise ContractError(f"mode {dec.mode!r} undefined for NAT models")
        out_len = min(predict_length(len(src), table), model.config.max_len)
        probs = model.forward(src_arr, out_len)
        raw = probs.data[0].argmax(axis=1).tolist()
        tokens = _strip(raw)
        if dec.dedup:
            tokens = dedup_consecutive(tokens)
        return tokens, len(raw)
    if dec.mode == "nat_argmax":
        raise ContractError(f"nat_argmax undefined for model kind {model.kind!r}")
    beam = 1 if dec.mode == "greedy" else dec.beam
    if model.kind == "fs":
        out_len = min(predict_length(len(src), table) + 1, model.config.max_len)
    else:
        out_len = model.config.max_len
    tokens, steps = beam_decode(model, src_arr, out_len=out_len, beam=beam)
    return _strip(tokens), steps


def decode(model, src, dec, table=None):
    """Decode one source sentence to a clean token sequence (trailing pad and
    end markers stripped; consecutive duplicates removed for NAT when
    ``dec.dedup``)."""
    return _decode_raw(model, src, dec, table)[0]


def distill_corpus(teacher, corpus, dec, table=None):
    """Replace targets with the teacher's decodes; empty decodes keep the
    original target (count logged)."""
    from .data import ParallelCorpus

    if table is None:
        table = build_length_table(corpus)
    pairs, kept = [], 0
    for src, tgt in corpus.pairs:
        hyp = decode(teacher, src, dec, table)
        if not hyp:
            hyp = list(tgt)
            kept += 1
        pairs.append((tuple(src), tuple(hyp)))
    if kept:
        log.info("kept %d original targets for empty teacher decodes", kept)
    return ParallelCorpus(pairs, corpus.vocab)


@dataclass
class EvalReport:
    corpus_bleu: float
    mean_gleu: float
    mean_sentence_bleu: float
    mean_ref_len: float
    mean_hyp_len: float
    invocations: dict
    raw_output_lens: list
    per_sentence_invocations: dict
    buckets: list  # (bucket_lo, count, mean_gleu, mean_sentence_bleu)


def evaluate(model, corpus, dec, table=None):
    """Aggregate decode quality and structural decoding cost over a corpus.

    Decoder invocation counts stand in for wall-clock speed: the number of
    decoder (or bottom/top) passes per sentence is recorded exactly. Length
    buckets have width 10 on the reference length.
    """
    if table is None:
        table = build_length_table(corpus)
    hyps, refs, raw_lens = [], [], []
    counter_names = [n for n in vars(model) if n.endswith("_calls")]
    per_sentence = {n: [] for n in counter_names}
    for src, tgt in corpus.pairs:
        model.reset_counters()
        tokens, raw_len = _decode_raw(model, src, dec, table)
        for n in counter_names:
            per_sentence[n].append(getattr(model, n))
        hyps.append(tokens)
        refs.append(list(tgt))
        raw_lens.append(raw_len)
    gleus = [rewards.gleu(h, r) for h, r in zip(hyps, refs)]
    bleus = [rewards.bleu_sentence(h, r) for h, r in zip(hyps, refs)]
    buckets = {}
    for h, r, g, b in zip(hyps, refs, gleus, bleus):
        buckets.setdefault((len(r) // 10) * 10, []).append((g, b))
    bucket_rows = [
        (lo, len(vals), sum(v[0] for v in vals) / len(vals), sum(v[1] for v in vals) / len(vals))
        for lo, vals in sorted(buckets.items())
    ]
    return EvalReport(
        corpus_bleu=rewards.corpus_bleu(hyps, refs),
        mean_gleu=sum(gleus) / len(gleus),
        mean_sentence_bleu=sum(bleus) / len(bleus),
        mean_ref_len=sum(len(r) for r in refs) / len(refs),
        mean_hyp_len=sum(len(h) for h in hyps) / len(hyps),
        invocations={n: sum(v) / len(v) for n, v in per_sentence.items()},
        raw_output_lens=raw_lens,
        per_sentence_invocations=per_sentence,
        buckets=bucket_rows,
    )
