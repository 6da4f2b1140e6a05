"""Deterministic scalar/vector primitives shared by every other module.

All math runs in 64-bit floats. Randomness comes from a counter-based
(Philox-style) stream so that any unit of work can derive its own
independent substream from integers alone and replay it exactly on any
platform, with no hidden generator state to thread around.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "stable_softmax",
    "softmax_rows",
    "entropy_nats",
    "entropy_rows",
    "cosine_similarity",
    "avg_pool_rows",
    "inverse_cdf_pick",
    "RandomStream",
]

_NORM_EPS = 1e-12


def stable_softmax(logits) -> np.ndarray:
    """Max-subtracted softmax of a 1-D logit vector; output sums to 1."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected 1-D logits, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("empty distribution")
    e = np.exp(x - np.max(x))
    return e / np.sum(e)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax over the last axis; -inf entries get mass 0."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def entropy_nats(p) -> float:
    """Shannon entropy -sum(p ln p) in nats, with 0*ln(0) = 0."""
    q = np.asarray(p, dtype=np.float64)
    nz = q[q > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def entropy_rows(p: np.ndarray) -> np.ndarray:
    """Row-wise entropy in nats over the last axis."""
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -np.sum(term, axis=-1)


def cosine_similarity(u, v) -> float:
    """u.v / (|u||v|); 0 if either norm is below 1e-12."""
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < _NORM_EPS or nb < _NORM_EPS:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def avg_pool_rows(matrix, valid_row_count: int) -> np.ndarray:
    """Column-wise mean over the first `valid_row_count` rows.

    Padding rows beyond the valid count never enter the mean.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if valid_row_count == 0:
        raise ValueError("valid_row_count must be >= 1")
    if not (1 <= valid_row_count <= m.shape[0]):
        raise ValueError(
            f"valid_row_count {valid_row_count} out of range for {m.shape[0]} rows"
        )
    return m[:valid_row_count].mean(axis=0)


# ---------------------------------------------------------------------------
# Counter-based random stream (Philox 2x64-10).
#
# One draw consumes exactly one counter block, so draw k of stream
# (seed, stream_id) is a pure function of (seed, stream_id, k). Substreams
# are derived by mixing tags into stream_id, never by consuming draws.
# ---------------------------------------------------------------------------

_PHILOX_M = np.uint64(0xD2B74407B1CE6E93)
_LO32 = np.uint64(0xFFFFFFFF)
_INV53 = float(2.0**-53)


def _mulhilo(a: np.ndarray, m: np.uint64):
    """Exact 64x64 -> 128-bit product as (hi, lo), vectorized over a."""
    lo = a * m
    ahi, alo = a >> np.uint64(32), a & _LO32
    mhi, mlo = m >> np.uint64(32), m & _LO32
    t = ahi * mlo + ((alo * mlo) >> np.uint64(32))
    w1 = (t & _LO32) + alo * mhi
    hi = ahi * mhi + (t >> np.uint64(32)) + (w1 >> np.uint64(32))
    return hi, lo


def philox2x64(counter: np.ndarray, stream_id: int, seed: int):
    """10-round Philox 2x64 block function.

    counter: uint64 array of counter values. Returns two uint64 arrays
    (128 output bits per counter value).
    """
    x0 = np.asarray(counter, dtype=np.uint64)
    x1 = np.full_like(x0, np.uint64(stream_id & 0xFFFFFFFFFFFFFFFF))
    key = seed & 0xFFFFFFFFFFFFFFFF  # python int: avoids scalar-overflow warnings
    for _ in range(10):
        hi, lo = _mulhilo(x0, _PHILOX_M)
        x0, x1 = hi ^ np.uint64(key) ^ x1, lo
        key = (key + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    return x0, x1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    if isinstance(tag, str):
        # stable across processes, unlike builtin hash()
        return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")
    raise TypeError(f"stream tag must be int or str, got {type(tag)!r}")


class RandomStream:
    """Splittable counter-based random stream.

    Identical (seed, stream_id, counter) produce identical draws on every
    platform. `derive` mixes tags into the stream_id to obtain a fresh
    independent substream with counter 0; parallel work units each derive
    their own substream and never share one.
    """

    __slots__ = ("seed", "stream_id", "counter")

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def derive(self, *tags) -> "RandomStream":
        """New independent stream keyed by this stream's id plus the tags."""
        sid = self.stream_id
        for tag in tags:
            t = _tag_to_int(tag)
            sid = _splitmix64(sid ^ ((t + 0x9E3779B97F4A7C15 + (sid << 6) + (sid >> 2)) & 0xFFFFFFFFFFFFFFFF))
        return RandomStream(self.seed, sid, 0)

    def _blocks(self, n: int):
        c = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return philox2x64(c, self.stream_id, self.seed)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform in [0, 1), one counter block each."""
        x0, _ = self._blocks(n)
        return (x0 >> np.uint64(11)).astype(np.float64) * _INV53

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normals(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller, one counter block each."""
        x0, x1 = self._blocks(n)
        # u1 in (0, 1] so log() is finite
        u1 = ((x0 >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53
        u2 = (x1 >> np.uint64(11)).astype(np.float64) * _INV53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers uniform in [0, bound)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return np.minimum((self.uniforms(n) * bound).astype(np.int64), bound - 1)

    def integer(self, bound: int) -> int:
        return int(self.integers(1, bound)[0])

    def multinomial(self, probs) -> int:
        """One categorical draw by inverse CDF with a single uniform.

        A uniform landing exactly on a CDF boundary resolves to the lower
        index.
        """
        p = np.asarray(probs, dtype=np.float64)
        if p.size == 0:
            raise ValueError("empty distribution")
        return inverse_cdf_pick(p, self.uniform())

    def state(self):
        return (self.seed, self.stream_id, self.counter)

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"


def inverse_cdf_pick(p: np.ndarray, u: float) -> int:
    """Index of the CDF cell containing u; boundary hits take the lower index."""
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, u, side="left"))
    return min(idx, p.size - 1)
