"""Eviction policies behind one interface: score, select, evict.

Every policy produces a score vector Phi over the eligible (oldest-B)
entries, higher meaning more worth keeping. Selection takes the 2L
lowest-scored entries as candidates and draws L of them without
replacement from softmax(-Phi), or just takes the L lowest in greedy
mode. Rule-based baselines default to greedy (their defining methods are
deterministic); the learned policy defaults to sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kvlab.cache import GroupCache
from kvlab.errors import InvariantError
from kvlab.numerics import RandomStream, inverse_cdf_pick, stable_softmax
from kvlab.scorer import ScorerBank, extract_features, score_batch, window_sums

__all__ = [
    "EvictionAction",
    "h2o_scores",
    "snapkv_scores",
    "rkv_scores",
    "learned_scores",
    "sample_eviction",
    "log_prob_of_action",
    "keep_from_drawn",
    "H2OPolicy",
    "SnapKVPolicy",
    "RKVPolicy",
    "GoldenPolicy",
    "LearnedPolicy",
    "FullCachePolicy",
    "make_policy",
]


@dataclass
class EvictionAction:
    """One eviction decision over an eligible set.

    candidates and drawn hold slot indices into the eligible prefix;
    drawn is ordered as sampled, and logprob is the sequential
    without-replacement log-probability of that order.
    """

    candidates: np.ndarray
    drawn: np.ndarray
    logprob: float


# ---------------------------------------------------------------------------
# Score functions.
# ---------------------------------------------------------------------------

def _rows_available(cache: GroupCache) -> int:
    return sum(rows.shape[1] for _, rows in cache.window_rows)


def h2o_scores(cache: GroupCache, eligible_count: int) -> np.ndarray:
    """Cumulative attention mass, head-mean, per eligible entry."""
    return cache.cum_group_mean()[:eligible_count]


def snapkv_scores(cache: GroupCache, eligible_count: int, window: int = 8) -> np.ndarray:
    """Mean attention over the last `window` queries (head-mean)."""
    avail = _rows_available(cache)
    if avail < 1:
        raise InvariantError("snapkv needs at least one recent attention row")
    sums = window_sums(cache, (window,))[window]
    return sums.mean(axis=0)[:eligible_count] / min(window, avail)


def _norm01(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def rkv_scores(cache: GroupCache, eligible_count: int, window: int = 8,
               attention_weight: float = 0.1) -> np.ndarray:
    """Blend of recent-window attention and key diversity, each min-max
    normalized over the eligible set before weighting."""
    if eligible_count < 2:
        raise InvariantError("rkv needs at least 2 eligible entries")
    win = snapkv_scores(cache, eligible_count, window)
    keys = cache.keys[:eligible_count]
    norms = np.linalg.norm(keys, axis=1)
    safe = np.where(norms < 1e-12, 1.0, norms)
    unit = keys / safe[:, None]
    cos = unit @ unit.T
    cos[norms < 1e-12, :] = 0.0
    cos[:, norms < 1e-12] = 0.0
    np.fill_diagonal(cos, -np.inf)
    diversity = 1.0 - cos.max(axis=1)
    return attention_weight * _norm01(win) + (1.0 - attention_weight) * _norm01(diversity)


def learned_scores(bank_params, features: np.ndarray) -> np.ndarray:
    return score_batch(bank_params, features)


# ---------------------------------------------------------------------------
# Selection.
# ---------------------------------------------------------------------------

def _candidate_set(phi: np.ndarray, eviction_length: int,
                   candidate_multiplier: int = 2) -> np.ndarray:
    n = phi.size
    want = candidate_multiplier * eviction_length
    if n < eviction_length:
        raise InvariantError(f"{n} eligible entries cannot cover {eviction_length} evictions")
    if n <= want:
        return np.arange(n)
    # stable sort: equal scores favor the older slot as a candidate
    return np.sort(np.argsort(phi, kind="stable")[:want])


def sample_eviction(phi: np.ndarray, eviction_length: int, rng: RandomStream | None,
                    mode: str = "sample",
                    candidate_multiplier: int = 2) -> EvictionAction:
    """Pick L entries to evict from the 2L lowest-scored candidates.

    Sampling draws sequentially without replacement from softmax(-Phi)
    restricted to the candidates, renormalizing after each draw. Greedy
    takes the L lowest scores (ties evict the older slot) and records the
    logprob that order would have had under sampling.
    """
    phi = np.asarray(phi, dtype=np.float64)
    cand = _candidate_set(phi, eviction_length, candidate_multiplier)
    probs = stable_softmax(-phi[cand])

    if mode == "greedy":
        order = np.argsort(phi[cand], kind="stable")[:eviction_length]
    elif mode == "sample":
        if rng is None:
            raise InvariantError("sampling mode needs a random stream")
        order = np.empty(eviction_length, dtype=np.int64)
        remaining = np.ones(cand.size, dtype=bool)
        for k in range(eviction_length):
            live = np.flatnonzero(remaining)
            p = probs[live]
            p = p / p.sum()
            pick = live[inverse_cdf_pick(p, rng.uniform())]
            order[k] = pick
            remaining[pick] = False
    else:
        raise InvariantError(f"unknown sampling mode {mode!r}")

    drawn = cand[order]
    action = EvictionAction(candidates=cand, drawn=drawn, logprob=0.0)
    action.logprob = log_prob_of_action(phi, action)
    return action


def log_prob_of_action(phi: np.ndarray, action: EvictionAction) -> float:
    """Sequential without-replacement log-probability of the stored order.

    The candidate set is the action's (fixed at rollout); only the
    probabilities are recomputed from phi.
    """
    phi = np.asarray(phi, dtype=np.float64)
    cand = np.asarray(action.candidates, dtype=np.int64)
    if cand.size and cand.max() >= phi.size:
        raise InvariantError("action candidate set inconsistent with eligible count")
    pos = {int(c): i for i, c in enumerate(cand)}
    probs = stable_softmax(-phi[cand])
    remaining = np.ones(cand.size, dtype=bool)
    total = 0.0
    for idx in np.asarray(action.drawn, dtype=np.int64):
        if int(idx) not in pos:
            raise InvariantError(f"drawn index {idx} outside the candidate set")
        j = pos[int(idx)]
        if not remaining[j]:
            raise InvariantError(f"index {idx} drawn twice")
        mass = probs[remaining].sum()
        total += float(np.log(probs[j] / mass))
        remaining[j] = False
    return total


def keep_from_drawn(eligible_count: int, drawn: np.ndarray) -> np.ndarray:
    """Keep-set slots: the eligible prefix minus the evicted slots."""
    return np.setdiff1d(np.arange(eligible_count), np.asarray(drawn, dtype=np.int64))


# ---------------------------------------------------------------------------
# Policy objects used by the streaming runner.
# ---------------------------------------------------------------------------

@dataclass
class Decision:
    keep_slots: np.ndarray
    phi: np.ndarray
    action: EvictionAction
    features: np.ndarray | None = None


class _ScoredPolicy:
    """Common selection path: subclasses provide scores (and features)."""

    name = "scored"
    mode = "greedy"

    def begin_sequence(self, seq_len: int, schedule):
        pass

    def _phi(self, cache, eligible_count, layer, kv_head, step):
        raise NotImplementedError

    def decide(self, cache: GroupCache, eligible_count: int, layer: int,
               kv_head: int, step: int, schedule, rng) -> Decision:
        phi, features = self._phi(cache, eligible_count, layer, kv_head, step)
        action = sample_eviction(phi, schedule.eviction_length, rng, mode=self.mode)
        keep = keep_from_drawn(eligible_count, action.drawn)
        return Decision(keep_slots=keep, phi=phi, action=action, features=features)


class H2OPolicy(_ScoredPolicy):
    name = "h2o"

    def __init__(self, mode: str = "greedy"):
        self.mode = mode

    def _phi(self, cache, eligible_count, layer, kv_head, step):
        return h2o_scores(cache, eligible_count), None


class SnapKVPolicy(_ScoredPolicy):
    name = "snapkv"

    def __init__(self, window: int = 8, mode: str = "greedy"):
        self.window = window
        self.mode = mode

    def _phi(self, cache, eligible_count, layer, kv_head, step):
        return snapkv_scores(cache, eligible_count, self.window), None


class RKVPolicy(_ScoredPolicy):
    name = "rkv"

    def __init__(self, window: int = 8, attention_weight: float = 0.1,
                 mode: str = "greedy"):
        self.window = window
        self.attention_weight = attention_weight
        self.mode = mode

    def _phi(self, cache, eligible_count, layer, kv_head, step):
        return rkv_scores(cache, eligible_count, self.window,
                          self.attention_weight), None


class GoldenPolicy(_ScoredPolicy):
    """Oracle policy: Phi = future scores from a precomputed full forward.

    alpha_provider(layer, kv_head, step) returns per-position future
    scores (or None past the last future block, where every choice is
    loss-equivalent and scores fall back to zero).
    """

    name = "golden"

    def __init__(self, alpha_provider, mode: str = "greedy"):
        self.alpha_provider = alpha_provider
        self.mode = mode

    def _phi(self, cache, eligible_count, layer, kv_head, step):
        by_position = self.alpha_provider(layer, kv_head, step)
        positions = cache.positions[:eligible_count]
        if by_position is None:
            return np.zeros(eligible_count), None
        return by_position[positions], None


class LearnedPolicy(_ScoredPolicy):
    name = "learned"

    def __init__(self, bank: ScorerBank, mode: str = "sample",
                 keep_features: bool = False):
        self.bank = bank
        self.mode = mode
        self.keep_features = keep_features

    def _phi(self, cache, eligible_count, layer, kv_head, step):
        features = extract_features(cache, eligible_count=eligible_count,
                                    eviction_length=len(cache) - eligible_count)
        phi = score_batch(self.bank.get(layer, kv_head), features)
        return phi, (features if self.keep_features else None)


class FullCachePolicy:
    """No eviction ever; the identity reference for ratios."""

    name = "full"

    def begin_sequence(self, seq_len: int, schedule):
        pass


def make_policy(name: str, *, bank: ScorerBank | None = None, alpha_provider=None,
                snapkv_window: int = 8, rkv_attention_weight: float = 0.1,
                mode: str | None = None) -> object:
    """Construct a policy from run-config style knobs."""
    if name == "h2o":
        return H2OPolicy(mode or "greedy")
    if name == "snapkv":
        return SnapKVPolicy(snapkv_window, mode or "greedy")
    if name == "rkv":
        return RKVPolicy(snapkv_window, rkv_attention_weight, mode or "greedy")
    if name == "golden":
        if alpha_provider is None:
            raise InvariantError("golden policy needs an alpha provider")
        return GoldenPolicy(alpha_provider, mode or "greedy")
    if name == "learned":
        if bank is None:
            raise InvariantError("learned policy needs scorer parameters")
        return LearnedPolicy(bank, mode or "sample")
    if name == "full":
        return FullCachePolicy()
    raise InvariantError(f"unknown policy {name!r}")
