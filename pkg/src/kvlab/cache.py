"""Budgeted per-(layer, KV-group) cache storage and the eviction schedule.

A cache oscillates between B and B+L entries: it grows by appends until it
holds B+L, at which point an eviction must remove L of the oldest B
entries (the newest L are protected). Alongside keys/values each entry
carries per-head attention accumulators and the cache keeps the recent
attention rows needed for scorer features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kvlab.errors import InvariantError

__all__ = [
    "EvictionSchedule",
    "GroupCache",
    "EvictionOutcome",
    "memory_bytes",
    "max_concurrent",
]


@dataclass(frozen=True)
class EvictionSchedule:
    """Budget/period contract: retain `budget` pairs, evict every `eviction_length`."""

    budget: int
    eviction_length: int

    def __post_init__(self):
        b, l = self.budget, self.eviction_length
        if l < 1:
            raise InvariantError(f"eviction_length must be >= 1, got {l}")
        if b <= 2 * l:
            raise InvariantError(f"budget must exceed 2*eviction_length, got B={b} L={l}")

    @property
    def trigger_size(self) -> int:
        return self.budget + self.eviction_length

    @property
    def keep_count(self) -> int:
        """Entries chosen from the eligible set at each eviction: B - L."""
        return self.budget - self.eviction_length

    def eviction_steps(self, seq_len: int) -> int:
        """Number of times the trigger fires over a seq_len-token stream."""
        if seq_len < self.trigger_size:
            return 0
        return (seq_len - self.budget) // self.eviction_length


@dataclass
class EvictionOutcome:
    """Record of one eviction: survivors, evictees, and per-head evicted mass."""

    keep_positions: np.ndarray
    evicted_positions: np.ndarray
    evicted_mass_per_head: np.ndarray | None  # None when no attention recorded yet


class GroupCache:
    """Retained KV entries of one (layer, group), in original-position order.

    Parallel per-entry state: keys/values [n, D], positions [n], cumulative
    and decayed per-head attention sums plus the per-chunk peak sum, each
    [g, n]. `window_rows` keeps the
    most recent chunks' attention rows (each tagged with the positions the
    cache held at that time) for window features.
    """

    __slots__ = ("head_count", "head_dim", "keys", "values", "positions",
                 "cum", "dec", "window_rows", "_window_span")

    def __init__(self, head_count: int, head_dim: int, window_span: int = 32):
        self.head_count = head_count
        self.head_dim = head_dim
        self.keys = np.empty((0, head_dim), dtype=np.float64)
        self.values = np.empty((0, head_dim), dtype=np.float64)
        self.positions = np.empty(0, dtype=np.int64)
        self.cum = np.zeros((head_count, 0), dtype=np.float64)
        self.dec = np.zeros((head_count, 0), dtype=np.float64)
        self.window_rows: list[tuple[np.ndarray, np.ndarray]] = []
        self._window_span = window_span  # min query rows to retain for features

    def __len__(self) -> int:
        return self.positions.size

    # -- entry bookkeeping ---------------------------------------------------

    def append(self, key: np.ndarray, value: np.ndarray, position: int) -> "GroupCache":
        """Append one entry; accumulators for it start at zero."""
        return self.append_block(
            np.asarray(key, dtype=np.float64)[None, :],
            np.asarray(value, dtype=np.float64)[None, :],
            np.array([position], dtype=np.int64),
        )

    def append_block(self, keys: np.ndarray, values: np.ndarray,
                     positions: np.ndarray) -> "GroupCache":
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size:
            if np.any(np.diff(positions) <= 0):
                raise InvariantError("appended positions must be strictly increasing")
            if self.positions.size and positions[0] <= self.positions[-1]:
                raise InvariantError(
                    f"position {positions[0]} not after cached position {self.positions[-1]}"
                )
        self.keys = np.concatenate([self.keys, np.asarray(keys, dtype=np.float64)])
        self.values = np.concatenate([self.values, np.asarray(values, dtype=np.float64)])
        self.positions = np.concatenate([self.positions, positions])
        pad = np.zeros((self.head_count, positions.size), dtype=np.float64)
        self.cum = np.concatenate([self.cum, pad], axis=1)
        self.dec = np.concatenate([self.dec, pad.copy()], axis=1)
        return self

    def eviction_due(self, schedule: EvictionSchedule) -> bool:
        n = len(self)
        if n > schedule.trigger_size:
            raise InvariantError(f"missed eviction: size {n} > {schedule.trigger_size}")
        return n == schedule.trigger_size

    def eligible_count(self, schedule: EvictionSchedule) -> int:
        """Oldest-B prefix eligible for eviction; the newest L are protected."""
        return len(self) - schedule.eviction_length

    def apply_eviction(self, keep: np.ndarray,
                       schedule: EvictionSchedule) -> EvictionOutcome:
        """Retain `keep` (slot indices into the eligible prefix) plus the newest L.

        Survivor accumulator columns are carried over bitwise unchanged.
        """
        n = len(self)
        if n != schedule.trigger_size:
            raise InvariantError(f"eviction applied at size {n}, expected {schedule.trigger_size}")
        eligible = self.eligible_count(schedule)
        keep = np.unique(np.asarray(keep, dtype=np.int64))
        if keep.size != schedule.keep_count:
            raise InvariantError(f"keep set size {keep.size}, expected {schedule.keep_count}")
        if keep.size and (keep[0] < 0 or keep[-1] >= eligible):
            raise InvariantError("keep set must index the eligible (oldest-B) prefix")

        all_idx = np.arange(n)
        survivors = np.concatenate([keep, all_idx[eligible:]])
        evicted = np.setdiff1d(all_idx[:eligible], keep)
        outcome = EvictionOutcome(
            keep_positions=self.positions[keep].copy(),
            evicted_positions=self.positions[evicted].copy(),
            evicted_mass_per_head=self._last_row_mass(evicted),
        )
        self.keys = self.keys[survivors]
        self.values = self.values[survivors]
        self.positions = self.positions[survivors]
        self.cum = self.cum[:, survivors]
        self.dec = self.dec[:, survivors]
        return outcome

    def _last_row_mass(self, evicted_slots: np.ndarray) -> np.ndarray | None:
        """Per-head attention mass of the most recent query on the evicted slots."""
        if not self.window_rows:
            return None
        positions, rows = self.window_rows[-1]
        target = self.positions[evicted_slots]
        cols = np.searchsorted(positions, target)
        ok = (cols < positions.size) & (positions[np.minimum(cols, positions.size - 1)] == target)
        last = rows[:, -1, :]  # [g, ncols]
        return last[:, cols[ok]].sum(axis=1)

    # -- attention accumulators ----------------------------------------------

    def update_accumulators(self, chunk_rows: np.ndarray, decay: float = 0.9) -> "GroupCache":
        """Fold one chunk of attention rows into the running sums.

        chunk_rows: [g, nq, n] attention of the chunk's queries over the
        current entries. Per entry and head, the chunk contribution is the
        sum over the chunk's query rows; cumulative sums add it, decayed
        sums are scaled by `decay` first.
        """
        rows = np.asarray(chunk_rows, dtype=np.float64)
        if rows.ndim != 3 or rows.shape[0] != self.head_count or rows.shape[2] != len(self):
            raise InvariantError(
                f"chunk rows shape {rows.shape} incompatible with g={self.head_count} n={len(self)}"
            )
        contrib = rows.sum(axis=1)  # [g, n]
        self.cum = self.cum + contrib
        self.dec = decay * self.dec + contrib
        self.window_rows.append((self.positions.copy(), rows))
        self._prune_window()
        return self

    def _prune_window(self):
        total = 0
        keep_from = len(self.window_rows)
        for i in range(len(self.window_rows) - 1, -1, -1):
            total += self.window_rows[i][1].shape[1]
            keep_from = i
            if total >= self._window_span:
                break
        if keep_from > 0:
            del self.window_rows[:keep_from]

    def cum_group_mean(self) -> np.ndarray:
        """Cumulative attention per entry, averaged over the group's heads."""
        return self.cum.mean(axis=0)

    def recent_rows(self, count: int):
        """Last `count` query rows as (per-row positions list, [g] rows list).

        Returns a list of (positions, row [g, ncols]) oldest-first, at most
        `count` entries; fewer when the stream is young.
        """
        out = []
        for positions, rows in reversed(self.window_rows):
            for i in range(rows.shape[1] - 1, -1, -1):
                out.append((positions, rows[:, i, :]))
                if len(out) == count:
                    out.reverse()
                    return out
        out.reverse()
        return out


# ---------------------------------------------------------------------------
# Analytic memory / capacity model.
# ---------------------------------------------------------------------------

def memory_bytes(config, seq_len: int, schedule: EvictionSchedule | None = None) -> int:
    """KV bytes for one sequence; `schedule=None` means the full cache.

    Per-entry cost is 2 * layers * kv_heads * head_dim * dtype_bytes; an
    evicted cache never holds more than B+L entries.
    """
    if seq_len < 0:
        raise InvariantError("seq_len must be >= 0")
    per_token = 2 * config.layers * config.kv_heads * config.head_dim * config.dtype_bytes
    held = seq_len if schedule is None else min(seq_len, schedule.trigger_size)
    return per_token * held


def max_concurrent(config, seq_len: int, mem_budget_bytes: int,
                   schedule: EvictionSchedule | None = None) -> int:
    """How many sequences' KV fit in a memory budget."""
    per_seq = memory_bytes(config, seq_len, schedule)
    if per_seq == 0:
        raise InvariantError("per-sequence memory is zero; seq_len must be positive")
    return mem_budget_bytes // per_seq
