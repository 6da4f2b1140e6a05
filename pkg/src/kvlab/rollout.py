"""Teacher-forced streaming runs under an eviction policy.

The retained set only changes at eviction triggers, so a run decodes in
chunks split at trigger boundaries: one prefix chunk of B+L tokens, then
L-token chunks, each causally masked in-chunk. That is arithmetically the
per-token computation with far fewer passes. After any chunk that fills
the cache to B+L, the policy picks a keep-set per (layer, group) and the
eviction is applied before the next chunk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kvlab import golden
from kvlab.artifacts import write_jsonl
from kvlab.cache import EvictionSchedule
from kvlab.errors import InvariantError
from kvlab.model import (CacheState, ModelParams, forward_chunk_with_cache,
                         forward_full)
from kvlab.numerics import RandomStream
from kvlab.policies import FullCachePolicy

__all__ = [
    "EventRecord",
    "RunResult",
    "FullRunInfo",
    "run_evicted_stream",
    "full_run_info",
    "chunk_bounds",
    "write_eviction_trace",
]


@dataclass
class EventRecord:
    """One (trigger step, layer, group) eviction decision."""

    step: int
    layer: int
    kv_head: int
    eligible_positions: np.ndarray
    keep_positions: np.ndarray
    evicted_positions: np.ndarray
    phi: np.ndarray
    candidates: np.ndarray       # slot indices into the eligible prefix
    drawn: np.ndarray            # evicted slots in sampled order
    logprob: float
    features: np.ndarray | None  # feature rows for the candidate slots


@dataclass
class RunResult:
    policy_name: str
    schedule: EvictionSchedule | None
    loss: np.ndarray             # length T-1 next-token losses under eviction
    events: list
    steps: int                   # eviction triggers fired


def chunk_bounds(seq_len: int, schedule: EvictionSchedule):
    """(start, end) pairs: a B+L prefix then L-token chunks."""
    end = min(schedule.trigger_size, seq_len)
    yield 0, end
    while end < seq_len:
        start = end
        end = min(start + schedule.eviction_length, seq_len)
        yield start, end


def _chunk_losses(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if targets.size == 0:
        return np.empty(0)
    rows = logits[: targets.size]
    m = rows.max(axis=1)
    logz = m + np.log(np.exp(rows - m[:, None]).sum(axis=1))
    return logz - rows[np.arange(targets.size), targets]


def run_evicted_stream(params: ModelParams, policy, schedule: EvictionSchedule | None,
                       tokens, rng: RandomStream | None = None,
                       record_events: bool = True) -> RunResult:
    """Replay `tokens` through cached decoding under `policy`.

    The token sequence is never altered; only the retained KV set evolves.
    Sampling policies draw from substreams derived per (step, layer,
    group), so group processing order cannot perturb the draws.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if isinstance(policy, FullCachePolicy) or schedule is None:
        out = forward_full(params, tokens)
        return RunResult(policy_name=policy.name, schedule=None,
                         loss=out.loss, events=[], steps=0)

    t_len = tokens.size
    if t_len <= schedule.trigger_size:
        raise InvariantError(
            f"sequence length {t_len} never reaches an eviction (B+L={schedule.trigger_size})"
        )
    policy.begin_sequence(t_len, schedule)
    state = CacheState(params.config,
                       window_span=max(32, schedule.eviction_length))
    loss_parts = []
    events = []
    step_no = 0
    for start, end in chunk_bounds(t_len, schedule):
        logits, _ = forward_chunk_with_cache(
            params, state, tokens[start:end], np.arange(start, end))
        loss_parts.append(_chunk_losses(logits, tokens[start + 1:end + 1]))

        if state.size() == schedule.trigger_size:
            step_no += 1
            for li in range(params.config.layers):
                for j in range(params.config.kv_heads):
                    cache = state.group(li, j)
                    eligible = cache.eligible_count(schedule)
                    sub = rng.derive(step_no, li, j) if rng is not None else None
                    decision = policy.decide(cache, eligible, li, j, step_no,
                                             schedule, sub)
                    eligible_positions = cache.positions[:eligible].copy()
                    outcome = cache.apply_eviction(decision.keep_slots, schedule)
                    if record_events:
                        feats = decision.features
                        if feats is not None:
                            feats = feats[decision.action.candidates]
                        events.append(EventRecord(
                            step=step_no, layer=li, kv_head=j,
                            eligible_positions=eligible_positions,
                            keep_positions=outcome.keep_positions,
                            evicted_positions=outcome.evicted_positions,
                            phi=decision.phi,
                            candidates=decision.action.candidates,
                            drawn=decision.action.drawn,
                            logprob=decision.action.logprob,
                            features=feats,
                        ))
    return RunResult(policy_name=policy.name, schedule=schedule,
                     loss=np.concatenate(loss_parts), events=events,
                     steps=step_no)


# ---------------------------------------------------------------------------
# Full forward with per-group oracle scores, computed layer by layer.
# ---------------------------------------------------------------------------

class FullRunInfo:
    """Everything downstream consumers need from one full-cache forward:
    per-position loss and entropy, plus per-(layer, group) block scores."""

    def __init__(self, loss, entropy, blocks, schedule):
        self.loss = loss
        self.entropy = entropy
        self.blocks = blocks    # [layer][kv_head] -> BlockScores
        self.schedule = schedule

    def alpha_provider(self, layer: int, kv_head: int, step: int):
        bs = self.blocks[layer][kv_head]
        if step > bs.steps:
            return None
        return golden.future_scores(bs, step)

    def golden_policy(self, mode: str = "greedy"):
        from kvlab.policies import GoldenPolicy
        return GoldenPolicy(self.alpha_provider, mode=mode)


def full_run_info(params: ModelParams, tokens,
                  schedule: EvictionSchedule) -> FullRunInfo:
    """One full forward; attention is pooled into block scores per layer as
    it streams by, so no layer's full matrix outlives the pass."""
    config = params.config
    g = config.group_size
    blocks = [[None] * config.kv_heads for _ in range(config.layers)]

    def consume(layer, attn, keys, values):
        for j in range(config.kv_heads):
            blocks[layer][j] = golden.block_scores(
                attn[j * g:(j + 1) * g], schedule.budget, schedule.eviction_length)

    out = forward_full(params, tokens, attn_consumer=consume)
    return FullRunInfo(loss=out.loss, entropy=out.entropy, blocks=blocks,
                       schedule=schedule)


# ---------------------------------------------------------------------------
# Trace files.
# ---------------------------------------------------------------------------

def write_eviction_trace(path: str, meta: dict, result: RunResult) -> int:
    """JSON-lines eviction trace: one record per (step, layer, group)."""

    def records():
        for ev in result.events:
            yield {
                "step": ev.step,
                "layer": ev.layer,
                "group": ev.kv_head,
                "eligible": [int(p) for p in ev.eligible_positions],
                "kept": [int(p) for p in ev.keep_positions],
                "evicted": [int(p) for p in ev.evicted_positions],
                "scores": [float(s) for s in ev.phi],
            }

    full_meta = {"policy": result.policy_name, "steps": result.steps}
    if result.schedule is not None:
        full_meta["budget"] = result.schedule.budget
        full_meta["eviction_length"] = result.schedule.eviction_length
    full_meta.update(meta)
    return write_jsonl(path, "eviction-trace", full_meta, records())
