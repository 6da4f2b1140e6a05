"""Pure-numpy fallback for the cached-decode attention kernel."""

from __future__ import annotations

import numpy as np


def attend_group_chunk(q: np.ndarray, keys: np.ndarray, values: np.ndarray, n_prior: int):
    """Causal attention of a chunk of queries against one KV group's cache.

    q:      [nq, g, D] rotated queries of the g heads sharing this group.
    keys:   [nk, D] rotated keys, prior cache entries first, then the chunk's
            own keys in order (nk = n_prior + nq).
    values: [nk, D].
    Key n_prior + j is visible to query i iff j <= i; prior keys are visible
    to every query.

    Returns (probs [g, nq, nk], out [nq, g, D]); masked probs are exactly 0.
    """
    nq, g, d = q.shape
    nk = keys.shape[0]
    scale = 1.0 / np.sqrt(d)
    scores = np.einsum("qgd,kd->gqk", q, keys, optimize=True) * scale
    if nk > n_prior:
        col = np.arange(nk) - n_prior
        masked = col[None, :] > np.arange(nq)[:, None]
        scores[:, masked] = -np.inf
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - m)
    probs = e / np.sum(e, axis=-1, keepdims=True)
    out = np.einsum("gqk,kd->qgd", probs, values, optimize=True)
    return probs, np.ascontiguousarray(out)
