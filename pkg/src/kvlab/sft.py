"""Supervised ranking stage: teach scorers to reproduce oracle orderings.

Labels come from the hindsight oracle: per (sequence, layer, group,
eviction step), the eligible positions, their future scores alpha, and
the oracle keep-set. Training features replay the same eviction history
against the full-attention matrix restricted to retained entries and
row-renormalized, so one full forward per sequence yields every step's
features. The loss is a margin hinge on score differences over pairs with
strictly ordered alpha.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from kvlab.artifacts import read_jsonl, write_jsonl
from kvlab.cache import EvictionSchedule, GroupCache
from kvlab.errors import InvariantError
from kvlab.model import ModelParams, forward_full
from kvlab.numerics import RandomStream
from kvlab.rollout import chunk_bounds, full_run_info
from kvlab.scorer import (ScorerBank, extract_features, score_batch,
                          score_grad_batch, zero_grads)

__all__ = [
    "SftConfig",
    "LabelRecord",
    "PairSet",
    "build_golden_labels",
    "write_golden_labels",
    "read_golden_labels",
    "build_sft_data",
    "sample_ranking_pairs",
    "pairwise_loss_and_grad",
    "ranking_accuracy",
    "heldout_split",
    "train_sft",
]


@dataclass(frozen=True)
class SftConfig:
    margin: float = 0.01
    batch_size: int = 8
    steps: int = 1000
    lr: float = 1e-2
    lr_schedule: str = "cosine"
    warmup: int = 0
    momentum: float = 0.0
    pairs_per_step: int = 256
    heldout_fraction: float = 0.1
    eval_every: int = 50
    hidden: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise InvariantError("margin must be positive")
        if self.pairs_per_step < 1:
            raise InvariantError("pairs_per_step must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise InvariantError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class LabelRecord:
    seq: int
    layer: int
    kv_head: int
    step: int
    eligible_positions: np.ndarray
    alpha: np.ndarray
    keep_positions: np.ndarray


# ---------------------------------------------------------------------------
# Oracle labels.
# ---------------------------------------------------------------------------

def build_golden_labels(params: ModelParams, sequences,
                        schedule: EvictionSchedule) -> list:
    """Oracle traces for every sequence and (layer, group)."""
    from kvlab.golden import trace_from_block_scores

    labels = []
    for s, tokens in enumerate(sequences):
        info = full_run_info(params, tokens, schedule)
        for li in range(params.config.layers):
            for j in range(params.config.kv_heads):
                trace = trace_from_block_scores(info.blocks[li][j],
                                                tokens.size, schedule)
                for st in trace:
                    labels.append(LabelRecord(
                        seq=s, layer=li, kv_head=j, step=st.step,
                        eligible_positions=st.eligible_positions,
                        alpha=st.alpha,
                        keep_positions=st.keep_positions,
                    ))
    return labels


def write_golden_labels(path: str, meta: dict, labels) -> int:
    def records():
        for rec in labels:
            yield {
                "seq": rec.seq, "layer": rec.layer, "group": rec.kv_head,
                "step": rec.step,
                "eligible": [int(p) for p in rec.eligible_positions],
                "alpha": [float(a) for a in rec.alpha],
                "keep": [int(p) for p in rec.keep_positions],
            }
    return write_jsonl(path, "golden-labels", meta, records())


def read_golden_labels(path: str):
    header, raw = read_jsonl(path, "golden-labels")
    labels = [LabelRecord(
        seq=rec["seq"], layer=rec["layer"], kv_head=rec["group"],
        step=rec["step"],
        eligible_positions=np.asarray(rec["eligible"], dtype=np.int64),
        alpha=np.asarray(rec["alpha"], dtype=np.float64),
        keep_positions=np.asarray(rec["keep"], dtype=np.int64),
    ) for rec in raw]
    return header, labels


# ---------------------------------------------------------------------------
# Features along the labeled eviction history.
# ---------------------------------------------------------------------------

def _feature_walk(attn_g, keys_g, values_g, schedule: EvictionSchedule,
                  by_step: dict) -> dict:
    """Replay one group's labeled evictions over full-attention rows.

    Attention rows are restricted to the currently retained entries and
    renormalized before feeding the accumulators, mirroring what a cache
    would have seen had it followed this exact history.
    """
    t_len = attn_g.shape[1]
    el = schedule.eviction_length
    cache = GroupCache(attn_g.shape[0], keys_g.shape[1],
                       window_span=max(32, el))
    out = {}
    step_no = 0
    for start, end in chunk_bounds(t_len, schedule):
        cache.append_block(keys_g[start:end], values_g[start:end],
                           np.arange(start, end))
        rows = attn_g[:, start:end, :][:, :, cache.positions]
        sums = np.maximum(rows.sum(axis=2, keepdims=True), 1e-300)
        cache.update_accumulators(rows / sums)
        if len(cache) == schedule.trigger_size:
            step_no += 1
            rec = by_step.get(step_no)
            if rec is None:
                raise InvariantError(f"label file has no step {step_no}")
            eligible = cache.eligible_count(schedule)
            if not np.array_equal(cache.positions[:eligible],
                                  rec.eligible_positions):
                raise InvariantError(
                    f"step {step_no}: label eligible set does not match replay"
                )
            out[step_no] = extract_features(cache, el).astype(np.float32)
            keep_slots = np.searchsorted(rec.eligible_positions,
                                         rec.keep_positions)
            cache.apply_eviction(keep_slots, schedule)
    if step_no != len(by_step):
        raise InvariantError("label file step count does not match replay")
    return out


@dataclass
class PairSet:
    """Oriented ranking pairs: alpha[i] < alpha[j] slotwise."""

    i: np.ndarray
    j: np.ndarray

    @property
    def count(self) -> int:
        return self.i.size


def sample_ranking_pairs(alpha: np.ndarray, count: int,
                         rng: RandomStream) -> PairSet:
    """Up to `count` uniform pairs with strictly unequal alpha.

    Steps where every alpha ties produce an empty set, never an error.
    """
    n = alpha.size
    empty = PairSet(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    if n < 2 or float(alpha.max()) == float(alpha.min()):
        return empty
    lo_parts, hi_parts = [], []
    got = 0
    for _ in range(32):
        draw = 2 * max(count - got, 1)
        a = rng.integers(draw, n)
        b = rng.integers(draw, n)
        ok = alpha[a] != alpha[b]
        a, b = a[ok], b[ok]
        swap = alpha[a] > alpha[b]
        lo_parts.append(np.where(swap, b, a))
        hi_parts.append(np.where(swap, a, b))
        got += a.size
        if got >= count:
            break
    if got == 0:
        return empty
    return PairSet(np.concatenate(lo_parts)[:count],
                   np.concatenate(hi_parts)[:count])


class SftData:
    """Features, alphas, and sampled pairs keyed by (seq, layer, group, step)."""

    def __init__(self, features, alpha, pairs, sample_keys, layers, kv_heads):
        self.features = features
        self.alpha = alpha
        self.pairs = pairs
        self.sample_keys = sample_keys  # (seq, step) pairs present in labels
        self.layers = layers
        self.kv_heads = kv_heads

    def pair_features(self, keys, layer, kv_head):
        """Stacked (X_lo, X_hi) for the given (seq, step) keys and group."""
        lo, hi = [], []
        for seq, step in keys:
            k = (seq, layer, kv_head, step)
            ps = self.pairs.get(k)
            if ps is None or ps.count == 0:
                continue
            x = self.features[k]
            lo.append(x[ps.i])
            hi.append(x[ps.j])
        if not lo:
            return None, None
        return (np.concatenate(lo).astype(np.float64),
                np.concatenate(hi).astype(np.float64))


def build_sft_data(params: ModelParams, sequences, labels,
                   schedule: EvictionSchedule, cfg: SftConfig) -> SftData:
    by_group: dict = {}
    for rec in labels:
        by_group.setdefault((rec.seq, rec.layer, rec.kv_head), {})[rec.step] = rec

    config = params.config
    g = config.group_size
    features: dict = {}
    seqs_in_labels = sorted({rec.seq for rec in labels})
    for s in seqs_in_labels:
        tokens = sequences[s]

        def consume(layer, attn, keys, values, s=s):
            for j in range(config.kv_heads):
                by_step = by_group.get((s, layer, j), {})
                walked = _feature_walk(attn[j * g:(j + 1) * g], keys[:, j, :],
                                       values[:, j, :], schedule, by_step)
                for step, feats in walked.items():
                    features[(s, layer, j, step)] = feats

        forward_full(params, tokens, attn_consumer=consume)

    root = RandomStream(cfg.seed).derive("sft-pairs")
    alpha = {}
    pairs = {}
    for rec in labels:
        key = (rec.seq, rec.layer, rec.kv_head, rec.step)
        alpha[key] = rec.alpha
        pairs[key] = sample_ranking_pairs(
            rec.alpha, cfg.pairs_per_step,
            root.derive(rec.seq, rec.layer, rec.kv_head, rec.step))
    sample_keys = sorted({(rec.seq, rec.step) for rec in labels})
    return SftData(features, alpha, pairs, sample_keys,
                   config.layers, config.kv_heads)


# ---------------------------------------------------------------------------
# Loss, accuracy, training.
# ---------------------------------------------------------------------------

def pairwise_loss_and_grad(params, x_lo: np.ndarray, x_hi: np.ndarray,
                           margin: float):
    """Hinge sum over pairs: max(0, margin - (phi_hi - phi_lo)).

    Returns (loss_sum, grads, violated_count); gradient flows only through
    pairs whose margin is violated.
    """
    phi_lo = score_batch(params, x_lo)
    phi_hi = score_batch(params, x_hi)
    slack = margin - (phi_hi - phi_lo)
    viol = slack > 0
    loss = float(slack[viol].sum())
    nv = int(viol.sum())
    if nv == 0:
        return loss, zero_grads(params), 0
    xs = np.concatenate([x_lo[viol], x_hi[viol]])
    dphi = np.concatenate([np.ones(nv), -np.ones(nv)])
    return loss, score_grad_batch(params, xs, dphi), nv


def ranking_accuracy(params, x_lo: np.ndarray, x_hi: np.ndarray) -> float:
    """Fraction of pairs scored in label order; score ties count as wrong."""
    if x_lo.shape[0] == 0:
        raise InvariantError("empty pair set")
    phi_lo = score_batch(params, x_lo)
    phi_hi = score_batch(params, x_hi)
    return float(np.mean(phi_hi > phi_lo))


def heldout_split(sequences, fraction: float):
    """Deterministic content-hash split; returns (train_ids, heldout_ids)."""
    held = []
    train = []
    for i, tokens in enumerate(sequences):
        digest = hashlib.sha256(np.ascontiguousarray(tokens, dtype="<i8").tobytes()).digest()
        bucket = int.from_bytes(digest[:8], "little") % 1000
        (held if bucket < fraction * 1000 else train).append(i)
    if not held and train:
        held.append(train.pop())
    if not train and held:
        train.append(held.pop())
    return train, held


def _lr_at(cfg: SftConfig, step: int) -> float:
    lr = cfg.lr
    if cfg.lr_schedule == "cosine":
        progress = (step - 1) / cfg.steps
        lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * progress))
    if cfg.warmup > 0 and step <= cfg.warmup:
        lr *= step / cfg.warmup
    return lr


def train_sft(bank_init: ScorerBank, data: SftData, cfg: SftConfig,
              heldout_seqs) -> tuple:
    """Plain SGD over sampled ranking pairs; returns (bank, log_rows).

    Each step draws `batch_size` (sequence, step) samples from the train
    split; every (layer, group) scorer consumes its own pairs for those
    samples, with the summed gradient normalized by its pair count.
    """
    heldout = set(heldout_seqs)
    train_keys = [k for k in data.sample_keys if k[0] not in heldout]
    held_keys = [k for k in data.sample_keys if k[0] in heldout]
    if not train_keys:
        raise InvariantError("empty SFT training set")

    bank = bank_init.copy()
    velocity = {gk: zero_grads(p) for gk, p in bank.items()} if cfg.momentum > 0 else None
    stream = RandomStream(cfg.seed).derive("sft-train")
    log_rows = []

    def heldout_accuracy() -> float:
        num, den = 0.0, 0
        for (li, j), params in bank.items():
            x_lo, x_hi = data.pair_features(held_keys, li, j)
            if x_lo is None:
                continue
            num += ranking_accuracy(params, x_lo, x_hi) * x_lo.shape[0]
            den += x_lo.shape[0]
        return num / den if den else float("nan")

    for step in range(1, cfg.steps + 1):
        lr = _lr_at(cfg, step)
        picks = stream.derive("batch", step).integers(cfg.batch_size, len(train_keys))
        keys = [train_keys[int(p)] for p in picks]
        total_loss, total_pairs = 0.0, 0
        for (li, j), params in bank.items():
            x_lo, x_hi = data.pair_features(keys, li, j)
            if x_lo is None:
                continue
            loss, grads, _ = pairwise_loss_and_grad(params, x_lo, x_hi, cfg.margin)
            total_loss += loss
            total_pairs += x_lo.shape[0]
            scale = 1.0 / x_lo.shape[0]
            if velocity is not None:
                vel = velocity[(li, j)]
                vel.w1 *= cfg.momentum
                vel.b1 *= cfg.momentum
                vel.w2 *= cfg.momentum
                vel.b2 *= cfg.momentum
                vel.add_(grads, scale)
                grads, scale = vel, 1.0
            params.w1 -= lr * scale * grads.w1
            params.b1 -= lr * scale * grads.b1
            params.w2 -= lr * scale * grads.w2
            params.b2 -= lr * scale * grads.b2
        mean_loss = total_loss / total_pairs if total_pairs else 0.0
        acc = ""
        if held_keys and (step % cfg.eval_every == 0 or step == cfg.steps):
            acc = heldout_accuracy()
        log_rows.append({"step": step, "lr": lr, "loss": mean_loss,
                         "heldout_accuracy": acc})
    return bank, log_rows
