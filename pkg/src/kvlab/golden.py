"""Hindsight eviction oracle and the renormalization error bound.

Given a full causal attention matrix, queries after the first eviction
point are partitioned into blocks of L rows. Average-pooling each block's
rows (final partial block over its valid rows only) and mean-pooling over
the group's heads gives block scores; the future score of a key at
eviction step t is its maximum block score over blocks t..M. The oracle
keep-set at each step is the top B-L future scores over the entries that
are still alive, ties resolved toward the more recent position.

Also implements the exact retained-and-renormalized attention output and
the |o - o_hat| <= 2*C*eps bound it provably satisfies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kvlab.cache import EvictionSchedule
from kvlab.errors import InvariantError

__all__ = [
    "BlockScores",
    "GoldenStep",
    "block_scores",
    "block_count",
    "future_scores",
    "golden_trace",
    "trace_from_block_scores",
    "golden_keep",
    "streaming_event_count",
    "renormalized_output",
    "check_bound",
    "BOUND_SLACK",
]

BOUND_SLACK = 1e-9


@dataclass
class BlockScores:
    """Pooled attention per future block: scores[t-1, j] for block t, key j."""

    scores: np.ndarray       # [M, T]
    valid_rows: np.ndarray   # queries pooled into each block; last may be short
    budget: int
    eviction_length: int

    def __post_init__(self):
        # suffix_max[t-1] = elementwise max of blocks t..M
        self.suffix_max = np.maximum.accumulate(self.scores[::-1], axis=0)[::-1]

    @property
    def steps(self) -> int:
        return self.scores.shape[0]


def block_count(seq_len: int, budget: int, eviction_length: int) -> int:
    """M = ceil((T - B) / L) - 1: eviction steps that still have future queries."""
    return -((seq_len - budget) // -eviction_length) - 1


def streaming_event_count(seq_len: int, budget: int, eviction_length: int) -> int:
    """Times a B..B+L cache actually triggers over a seq_len stream."""
    if seq_len < budget + eviction_length:
        return 0
    return (seq_len - budget) // eviction_length


def block_scores(attn: np.ndarray, budget: int, eviction_length: int) -> BlockScores:
    """Pool one group's attention [g, T, T] into per-block key scores.

    Block t (1-based) covers query rows B+tL .. B+(t+1)L-1; the final
    block averages over its valid rows only.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim == 2:
        attn = attn[None, :, :]
    t_len = attn.shape[1]
    b, l = budget, eviction_length
    m = block_count(t_len, b, l)
    if m < 1:
        raise InvariantError(
            f"no eviction steps: T={t_len} needs more than B+L={b + l} tokens"
        )
    head_mean = attn.mean(axis=0)  # pooling and head mean commute
    scores = np.empty((m, t_len))
    valid = np.empty(m, dtype=np.int64)
    for t in range(1, m + 1):
        lo = b + t * l
        hi = min(lo + l, t_len)
        scores[t - 1] = head_mean[lo:hi].mean(axis=0)
        valid[t - 1] = hi - lo
    return BlockScores(scores=scores, valid_rows=valid, budget=b, eviction_length=l)


def future_scores(bs: BlockScores, step: int) -> np.ndarray:
    """alpha at eviction step t: per-key max block score over blocks t..M."""
    if not 1 <= step <= bs.steps:
        raise InvariantError(f"step {step} outside 1..{bs.steps}")
    return bs.suffix_max[step - 1]


def golden_keep(alpha: np.ndarray, keep_count: int) -> np.ndarray:
    """Slot indices of the top `keep_count` scores; ties keep later slots."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if not 0 < keep_count <= alpha.size:
        raise InvariantError(f"keep_count {keep_count} out of range for {alpha.size}")
    # stable ascending sort, then evict the first L slots: equal scores are
    # evicted oldest-first, i.e. survivors are the more recent ones
    order = np.argsort(alpha, kind="stable")
    return np.sort(order[alpha.size - keep_count:])


@dataclass
class GoldenStep:
    step: int
    eligible_positions: np.ndarray
    alpha: np.ndarray            # over eligible entries; zeros past step M
    keep_positions: np.ndarray
    evicted_positions: np.ndarray


def golden_trace(attn: np.ndarray, schedule: EvictionSchedule) -> list:
    """Sequential oracle walk for one (layer, group) from raw attention."""
    attn = np.asarray(attn, dtype=np.float64)
    bs = block_scores(attn, schedule.budget, schedule.eviction_length)
    return trace_from_block_scores(bs, attn.shape[-1], schedule)


def trace_from_block_scores(bs: BlockScores, seq_len: int,
                            schedule: EvictionSchedule) -> list:
    """Sequential oracle walk for one (layer, group).

    Each step selects Top_{B-L} alpha over the currently alive eligible
    entries; earlier evictees are gone and can never return. Trailing
    triggers past step M (no future queries left) score zero and fall back
    to keeping the most recent eligible entries.
    """
    t_len = seq_len
    b, l = schedule.budget, schedule.eviction_length
    events = streaming_event_count(t_len, b, l)

    retained = np.arange(b + l)
    steps = []
    for t in range(1, events + 1):
        eligible = retained[:b]
        newest = retained[b:]
        if t <= bs.steps:
            alpha = future_scores(bs, t)[eligible]
        else:
            alpha = np.zeros(eligible.size)
        keep_slots = golden_keep(alpha, schedule.keep_count)
        keep = eligible[keep_slots]
        evicted = np.setdiff1d(eligible, keep)
        steps.append(GoldenStep(
            step=t,
            eligible_positions=eligible.copy(),
            alpha=alpha.copy(),
            keep_positions=keep,
            evicted_positions=evicted,
        ))
        nxt = np.arange(b + t * l, min(b + (t + 1) * l, t_len))
        retained = np.concatenate([keep, newest, nxt])
    return steps


# ---------------------------------------------------------------------------
# Renormalized retained output and its error bound.
# ---------------------------------------------------------------------------

def renormalized_output(attn_row: np.ndarray, values: np.ndarray, keep):
    """Retained-only attention output with the kept mass renormalized to 1.

    Returns (o_hat, eps) where eps is the total attention mass on evicted
    entries. Degenerate renormalization (eps -> 1 or empty keep) is an error.
    """
    a = np.asarray(attn_row, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    keep = np.asarray(keep, dtype=np.int64)
    if keep.size == 0:
        raise InvariantError("degenerate renormalization: empty keep set")
    kept_mass = float(a[keep].sum())
    eps = float(a.sum() - kept_mass)
    if eps >= 1.0 - 1e-12:
        raise InvariantError(f"degenerate renormalization: evicted mass {eps}")
    o_hat = (a[keep] / (1.0 - eps)) @ v[keep]
    return o_hat, eps


def check_bound(o: np.ndarray, o_hat: np.ndarray, eps: float, c: float) -> bool:
    """True iff |o - o_hat|_2 <= 2*C*eps plus absolute slack 1e-9."""
    err = float(np.linalg.norm(np.asarray(o) - np.asarray(o_hat)))
    return err <= 2.0 * c * eps + BOUND_SLACK
