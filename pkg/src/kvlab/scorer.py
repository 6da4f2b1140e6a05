"""Importance scoring: per-entry features and the trainable two-layer MLP.

Each retained cache entry n gets a feature vector
x_n = concat(k_n, v_n, a_n) where a_n packs, per query head of the group,
six attention statistics: window sums over the last 8, 16, 32, and L
queries, the cumulative sum, and the 0.9-decayed sum. The scorer
phi(x) = sigmoid(x W1 + b1) W2 + b2 is the only trainable component;
gradients are exact and hand-derived.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kvlab.artifacts import atomic_write_bytes, read_bytes
from kvlab.cache import GroupCache
from kvlab.errors import InvariantError
from kvlab.numerics import RandomStream

__all__ = [
    "ScorerParams",
    "ScorerGrads",
    "ScorerBank",
    "sigmoid",
    "extract_features",
    "window_sums",
    "score",
    "score_batch",
    "score_grad",
    "score_grad_batch",
    "apply_update",
    "init_scorer",
    "zero_grads",
    "DEFAULT_HIDDEN",
]

DEFAULT_HIDDEN = 16
_W1_INIT_STD = 1e-3  # features are raw attention mass; cumulative sums grow
                     # with stream length, so first-layer init must be small


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ScorerParams:
    w1: np.ndarray  # [d_in, H]
    b1: np.ndarray  # [H]
    w2: np.ndarray  # [H]
    b2: float

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "ScorerParams":
        return ScorerParams(self.w1.copy(), self.b1.copy(), self.w2.copy(),
                            float(self.b2))


@dataclass
class ScorerGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def add_(self, other: "ScorerGrads", scale: float = 1.0):
        self.w1 += scale * other.w1
        self.b1 += scale * other.b1
        self.w2 += scale * other.w2
        self.b2 += scale * other.b2
        return self


def zero_grads(params: ScorerParams) -> ScorerGrads:
    return ScorerGrads(np.zeros_like(params.w1), np.zeros_like(params.b1),
                       np.zeros_like(params.w2), 0.0)


def init_scorer(d_in: int, stream: RandomStream,
                hidden: int = DEFAULT_HIDDEN) -> ScorerParams:
    w1 = _W1_INIT_STD * stream.derive("w1").normals(d_in * hidden).reshape(d_in, hidden)
    w2 = stream.derive("w2").normals(hidden) / np.sqrt(hidden)
    return ScorerParams(w1=w1, b1=np.zeros(hidden), w2=w2, b2=0.0)


# ---------------------------------------------------------------------------
# Features.
# ---------------------------------------------------------------------------

def window_sums(cache: GroupCache, cutoffs) -> dict:
    """Per-head attention mass to each current entry over the last w queries.

    Returns {w: [g, n]} for each cutoff w. Rows older than an entry's
    append contribute zero; when fewer than w rows exist, the sum runs
    over what is available.
    """
    g, n = cache.head_count, len(cache)
    cutoffs = sorted(set(int(c) for c in cutoffs))
    acc = np.zeros((g, n))
    out = {}
    seen = 0
    ci = 0
    for positions, rows in reversed(cache.window_rows):
        # map current entry positions onto this chunk's column layout
        cols = np.searchsorted(positions, cache.positions)
        inside = np.minimum(cols, max(positions.size - 1, 0))
        present = (cols < positions.size) & (positions[inside] == cache.positions)
        idx = np.flatnonzero(present)
        src = cols[idx]
        for i in range(rows.shape[1] - 1, -1, -1):
            acc[:, idx] += rows[:, i, src]
            seen += 1
            while ci < len(cutoffs) and seen == cutoffs[ci]:
                out[cutoffs[ci]] = acc.copy()
                ci += 1
        if ci == len(cutoffs):
            break
    while ci < len(cutoffs):
        out[cutoffs[ci]] = acc.copy()
        ci += 1
    return out


def extract_features(cache: GroupCache, eviction_length: int,
                     eligible_count: int | None = None) -> np.ndarray:
    """Feature matrix [eligible, 2D + 6g] for the oldest `eligible_count`
    entries.

    Per-head slot order: win8, win16, win32, winL, cumulative, decayed;
    heads concatenated in group order after the raw key and value vectors.
    """
    n = len(cache)
    if eligible_count is None:
        eligible_count = n - eviction_length
    if not 0 < eligible_count <= n:
        raise InvariantError(f"eligible_count {eligible_count} out of range for size {n}")
    g = cache.head_count
    wins = window_sums(cache, (8, 16, 32, eviction_length))
    per_head = np.stack([wins[8], wins[16], wins[32], wins[eviction_length],
                         cache.cum, cache.dec], axis=2)  # [g, n, 6]
    a = per_head.transpose(1, 0, 2).reshape(n, 6 * g)
    x = np.concatenate([cache.keys, cache.values, a], axis=1)
    return x[:eligible_count]


# ---------------------------------------------------------------------------
# MLP forward and exact gradients.
# ---------------------------------------------------------------------------

def _check_dim(params: ScorerParams, x: np.ndarray):
    if x.shape[-1] != params.input_dim:
        raise InvariantError(
            f"feature dim {x.shape[-1]} does not match scorer input {params.input_dim}"
        )


def score(params: ScorerParams, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    _check_dim(params, x)
    hidden = sigmoid(x @ params.w1 + params.b1)
    return float(hidden @ params.w2 + params.b2)


def score_batch(params: ScorerParams, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    _check_dim(params, xs)
    hidden = sigmoid(xs @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2


def score_grad(params: ScorerParams, x: np.ndarray, dphi: float) -> ScorerGrads:
    """d(dphi * phi)/d(params) for a single input."""
    return score_grad_batch(params, np.asarray(x)[None, :], np.array([dphi]))


def score_grad_batch(params: ScorerParams, xs: np.ndarray,
                     dphi: np.ndarray) -> ScorerGrads:
    """Gradient of sum_i dphi_i * phi(x_i) with respect to the parameters."""
    xs = np.asarray(xs, dtype=np.float64)
    dphi = np.asarray(dphi, dtype=np.float64)
    _check_dim(params, xs)
    hidden = sigmoid(xs @ params.w1 + params.b1)          # [n, H]
    dhidden = (dphi[:, None] * params.w2[None, :]) * hidden * (1.0 - hidden)
    return ScorerGrads(
        w1=xs.T @ dhidden,
        b1=dhidden.sum(axis=0),
        w2=hidden.T @ dphi,
        b2=float(dphi.sum()),
    )


def apply_update(params: ScorerParams, grads: ScorerGrads, lr: float) -> ScorerParams:
    """Gradient-descent step: params - lr * grads, returned as a new value."""
    return ScorerParams(
        w1=params.w1 - lr * grads.w1,
        b1=params.b1 - lr * grads.b1,
        w2=params.w2 - lr * grads.w2,
        b2=params.b2 - lr * grads.b2,
    )


# ---------------------------------------------------------------------------
# One scorer per (layer, KV group), persisted together.
# ---------------------------------------------------------------------------

_BANK_MAGIC = b"KVSC"
_BANK_VERSION = 1


class ScorerBank:
    """The full set of scoring models, indexed [layer][kv_head]."""

    def __init__(self, scorers):
        self.scorers = [list(row) for row in scorers]

    @classmethod
    def init(cls, layers: int, kv_heads: int, d_in: int, seed: int,
             hidden: int = DEFAULT_HIDDEN) -> "ScorerBank":
        root = RandomStream(seed).derive("scorer-init")
        return cls([
            [init_scorer(d_in, root.derive(li, j), hidden) for j in range(kv_heads)]
            for li in range(layers)
        ])

    @property
    def layers(self) -> int:
        return len(self.scorers)

    @property
    def kv_heads(self) -> int:
        return len(self.scorers[0])

    def get(self, layer: int, kv_head: int) -> ScorerParams:
        return self.scorers[layer][kv_head]

    def items(self):
        for li, row in enumerate(self.scorers):
            for j, params in enumerate(row):
                yield (li, j), params

    def copy(self) -> "ScorerBank":
        return ScorerBank([[p.copy() for p in row] for row in self.scorers])

    def save(self, path: str):
        first = self.scorers[0][0]
        header = _BANK_MAGIC + np.array(
            [_BANK_VERSION, self.layers, self.kv_heads, first.input_dim,
             first.hidden], dtype="<u4").tobytes()
        chunks = [header]
        for _, p in self.items():
            for t in (p.w1, p.b1, p.w2, np.array([p.b2])):
                chunks.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
        atomic_write_bytes(path, b"".join(chunks))

    @classmethod
    def load(cls, path: str) -> "ScorerBank":
        raw = read_bytes(path)
        if raw[:4] != _BANK_MAGIC:
            raise InvariantError(f"{path}: not a scorer checkpoint")
        version, layers, kv_heads, d_in, hidden = (
            int(w) for w in np.frombuffer(raw[4:24], dtype="<u4"))
        if version != _BANK_VERSION:
            raise InvariantError(f"{path}: unsupported checkpoint version {version}")
        flat = np.frombuffer(raw[24:], dtype="<f8")
        per = d_in * hidden + hidden + hidden + 1
        if flat.size != layers * kv_heads * per:
            raise InvariantError(f"{path}: wrong payload size")
        scorers = []
        offset = 0
        for _ in range(layers):
            row = []
            for _ in range(kv_heads):
                w1 = flat[offset:offset + d_in * hidden].reshape(d_in, hidden).copy()
                offset += d_in * hidden
                b1 = flat[offset:offset + hidden].copy()
                offset += hidden
                w2 = flat[offset:offset + hidden].copy()
                offset += hidden
                b2 = float(flat[offset])
                offset += 1
                row.append(ScorerParams(w1, b1, w2, b2))
            scorers.append(row)
        return cls(scorers)
