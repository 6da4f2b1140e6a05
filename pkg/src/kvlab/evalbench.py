"""Measurement suite over the policy zoo.

Per policy: teacher-forced loss ratios against the full-cache run,
entropy-bucket breakdowns, attention-output cosine similarity with the
renormalization error bound checked on every sampled row, and the cache
capacity model. Everything is seeded; rerunning a report with its stamped
seed reproduces each number bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kvlab.cache import EvictionSchedule, max_concurrent, memory_bytes
from kvlab.errors import InvariantError
from kvlab.golden import check_bound, renormalized_output
from kvlab.model import ModelConfig, ModelParams, forward_full
from kvlab.numerics import RandomStream, cosine_similarity
from kvlab.policies import (
    FullCachePolicy,
    H2OPolicy,
    LearnedPolicy,
    RKVPolicy,
    SnapKVPolicy,
)
from kvlab.rollout import FullRunInfo, full_run_info, run_evicted_stream

__all__ = [
    "PolicyRow",
    "EvalReport",
    "SimilarityResult",
    "eval_loss_slice",
    "sequence_loss_ratio",
    "entropy_buckets",
    "default_policy_suite",
    "evaluate_policies",
    "attention_similarity",
    "capacity_table",
    "report_rows",
    "per_sequence_rows",
    "report_text",
    "compare_report_rows",
]


def eval_loss_slice(seq_len: int, schedule: EvictionSchedule) -> slice:
    """Loss indices whose predictions ran on an evicted cache.

    Loss index i scores the prediction of token i+1; the first eviction
    fires once B + L tokens are cached, so index B + L is the first one
    that can differ from the full run.
    """
    return slice(schedule.trigger_size, seq_len - 1)


def sequence_loss_ratio(loss_full, loss_evict, schedule: EvictionSchedule):
    """Mean evicted / mean full loss over post-eviction positions, or
    None when no such positions exist."""
    lf = np.asarray(loss_full, dtype=np.float64)
    le = np.asarray(loss_evict, dtype=np.float64)
    if lf.shape != le.shape:
        raise InvariantError(f"loss shape mismatch: {lf.shape} vs {le.shape}")
    sl = eval_loss_slice(lf.size + 1, schedule)
    if sl.start >= sl.stop:
        return None
    return float(le[sl].mean() / lf[sl].mean())


def entropy_buckets(entropy, top_fraction: float = 0.2):
    """(high_idx, low_idx): top floor(fraction * n) positions by entropy
    form the high bucket; ties break toward the lower position."""
    en = np.asarray(entropy, dtype=np.float64)
    n = en.size
    k = int(np.floor(top_fraction * n))
    order = np.argsort(-en, kind="stable")
    high = np.sort(order[:k])
    low = np.sort(order[k:])
    return high, low


def _bucket_ratio(loss_full, loss_evict, idx):
    if idx.size == 0:
        return None
    return float(loss_evict[idx].mean() / loss_full[idx].mean())


# ---------------------------------------------------------------------------
# Attention-output similarity with the renormalization bound wired in.
# ---------------------------------------------------------------------------

@dataclass
class SimilarityResult:
    rows: int = 0
    cosine_sum: float = 0.0
    min_cosine: float = 1.0
    per_head_sum: np.ndarray | None = None
    per_head_count: np.ndarray | None = None
    bound_checks: int = 0
    bound_violations: int = 0

    @property
    def mean_cosine(self) -> float:
        return self.cosine_sum / self.rows if self.rows else 1.0

    def per_head_mean(self):
        if self.per_head_sum is None:
            return None
        counts = np.maximum(self.per_head_count, 1)
        return self.per_head_sum / counts

    def _ensure(self, layers: int, q_heads: int):
        if self.per_head_sum is None:
            self.per_head_sum = np.zeros((layers, q_heads))
            self.per_head_count = np.zeros((layers, q_heads), dtype=np.int64)

    def add(self, layer: int, head: int, value: float, ok: bool):
        self.rows += 1
        self.cosine_sum += value
        self.min_cosine = min(self.min_cosine, value)
        self.per_head_sum[layer, head] += value
        self.per_head_count[layer, head] += 1
        self.bound_checks += 1
        self.bound_violations += not ok

    def merge(self, other: "SimilarityResult"):
        self.rows += other.rows
        self.cosine_sum += other.cosine_sum
        self.min_cosine = min(self.min_cosine, other.min_cosine)
        if other.per_head_sum is not None:
            self._ensure(*other.per_head_sum.shape)
            self.per_head_sum += other.per_head_sum
            self.per_head_count += other.per_head_count
        self.bound_checks += other.bound_checks
        self.bound_violations += other.bound_violations


def _events_by_group(events):
    table = {}
    for ev in events:
        table.setdefault((ev.layer, ev.kv_head), []).append(ev)
    for group in table.values():
        group.sort(key=lambda ev: ev.step)
    return table


def sequence_similarity(params: ModelParams, tokens, events,
                        schedule: EvictionSchedule,
                        row_stride: int = 1) -> SimilarityResult:
    """Compare full-cache attention outputs against surgically
    renormalized ones on the retained sets an evicted run actually used.

    The retained set per (layer, group) is replayed from the event
    records; each sampled query row yields one cosine per head plus one
    error-bound check |o - o_hat| <= 2 C eps.
    """
    cfg = params.config
    table = _events_by_group(events)
    result = SimilarityResult()
    result._ensure(cfg.layers, cfg.q_heads)
    seq_len = len(tokens)
    budget, length = schedule.budget, schedule.eviction_length

    def consume(li, attn, keys, values):
        for j in range(cfg.kv_heads):
            group_events = table.get((li, j))
            if not group_events:
                raise InvariantError(f"no events recorded for layer {li} group {j}")
            vals = values[:, j, :]
            prefix_vmax = np.maximum.accumulate(np.linalg.norm(vals, axis=1))
            retained = np.arange(schedule.trigger_size)
            for t, ev in enumerate(group_events, start=1):
                if ev.step != t:
                    raise InvariantError("event steps are not dense")
                if not np.array_equal(retained[:budget], ev.eligible_positions):
                    raise InvariantError("event eligible set does not replay")
                survivors = np.concatenate([ev.keep_positions, retained[budget:]])
                start = budget + t * length
                end = min(start + length, seq_len)
                for q in range(start, end, row_stride):
                    kept = np.concatenate([survivors, np.arange(start, q + 1)])
                    c = float(prefix_vmax[q])
                    for h in range(cfg.group_size):
                        head = j * cfg.group_size + h
                        row = attn[head, q, : q + 1]
                        o = row @ vals[: q + 1]
                        o_hat, eps = renormalized_output(row, vals[: q + 1], kept)
                        ok = check_bound(o, o_hat, eps, c)
                        result.add(li, head, cosine_similarity(o, o_hat), ok)
                retained = np.concatenate([survivors, np.arange(start, end)])

    forward_full(params, tokens, attn_consumer=consume)
    return result


def attention_similarity(params: ModelParams, policy, schedule: EvictionSchedule,
                         sequences, *, eval_seed: int = 0,
                         row_stride: int = 1) -> SimilarityResult:
    """Corpus-level similarity for one policy.

    `policy` is either a policy instance or a factory called with the
    sequence's FullRunInfo (the golden policy needs per-sequence future
    scores). Full-cache policies are identically 1.0 and short sequences
    are skipped, mirroring the loss-ratio rules.
    """
    root = RandomStream(eval_seed)
    total = SimilarityResult()
    for idx, tokens in enumerate(sequences):
        if len(tokens) <= schedule.trigger_size:
            continue
        info = full_run_info(params, tokens, schedule)
        inst = policy(info) if callable(policy) else policy
        if isinstance(inst, FullCachePolicy):
            total.rows += 1
            total.cosine_sum += 1.0
            continue
        rng = root.derive("eval-similarity", idx)
        run = run_evicted_stream(params, inst, schedule, tokens, rng=rng)
        total.merge(sequence_similarity(params, tokens, run.events, schedule,
                                        row_stride=row_stride))
    return total


# ---------------------------------------------------------------------------
# Policy suite evaluation.
# ---------------------------------------------------------------------------

def default_policy_suite(*, sft_bank=None, rl_bank=None, snapkv_window: int = 8,
                         rkv_attention_weight: float = 0.1,
                         learned_mode: str = "greedy"):
    """Ordered name -> factory map; factories take the sequence's
    FullRunInfo so the golden policy can read its future scores."""
    suite = {
        "full": lambda info: FullCachePolicy(),
        "golden": lambda info: info.golden_policy(),
        "h2o": lambda info: H2OPolicy(),
        "snapkv": lambda info: SnapKVPolicy(window=snapkv_window),
        "rkv": lambda info: RKVPolicy(window=snapkv_window,
                                      attention_weight=rkv_attention_weight),
    }
    if sft_bank is not None:
        suite["learned-sft"] = lambda info: LearnedPolicy(sft_bank, mode=learned_mode)
    if rl_bank is not None:
        suite["learned-rl"] = lambda info: LearnedPolicy(rl_bank, mode=learned_mode)
    return suite


@dataclass
class PolicyRow:
    policy: str
    sequences: int
    skipped: int
    loss_ratio: float
    low_ratio: float | None
    high_ratio: float | None
    mean_cosine: float | None
    min_cosine: float | None
    bound_checks: int
    bound_violations: int
    per_seq_ratio: list = field(default_factory=list)
    per_seq_low: list = field(default_factory=list)
    per_seq_high: list = field(default_factory=list)


@dataclass
class EvalReport:
    seed: int
    schedule: EvictionSchedule
    top_fraction: float
    similarity_stride: int
    rows: list
    capacity: list = field(default_factory=list)

    def row(self, policy: str) -> PolicyRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise InvariantError(f"no eval row for policy {policy!r}")


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_policies(params: ModelParams, factories, schedule: EvictionSchedule,
                      sequences, *, eval_seed: int = 0, top_fraction: float = 0.2,
                      similarity_stride: int = 0, capacity=None,
                      progress=None) -> EvalReport:
    """Run every policy over the corpus and assemble the report.

    One attention-streaming full forward per sequence feeds all policies
    (loss baseline, entropy buckets, golden future scores). Sampling-mode
    policies draw from streams derived off eval_seed, so reruns match
    bitwise. similarity_stride = 0 skips the cosine columns.
    """
    names = list(factories)
    acc = {
        name: {"ratio": [], "low": [], "high": [], "sim": SimilarityResult(),
               "skipped": 0}
        for name in names
    }
    root = RandomStream(eval_seed)
    for idx, tokens in enumerate(sequences):
        seq_len = len(tokens)
        short = seq_len <= schedule.trigger_size or \
            eval_loss_slice(seq_len, schedule).stop <= schedule.trigger_size
        if short:
            for name in names:
                acc[name]["skipped"] += 1
            continue
        info = full_run_info(params, tokens, schedule)
        sl = eval_loss_slice(seq_len, schedule)
        high, low = entropy_buckets(info.entropy[sl], top_fraction)
        lf = info.loss[sl]
        for name in names:
            inst = factories[name](info)
            if isinstance(inst, FullCachePolicy):
                loss_evict, events = info.loss, []
            else:
                rng = root.derive("eval", name, idx)
                run = run_evicted_stream(params, inst, schedule, tokens, rng=rng,
                                         record_events=similarity_stride > 0)
                loss_evict, events = run.loss, run.events
            le = loss_evict[sl]
            acc[name]["ratio"].append(float(le.mean() / lf.mean()))
            acc[name]["low"].append(_bucket_ratio(lf, le, low))
            acc[name]["high"].append(_bucket_ratio(lf, le, high))
            if similarity_stride > 0:
                if isinstance(inst, FullCachePolicy):
                    acc[name]["sim"].rows += 1
                    acc[name]["sim"].cosine_sum += 1.0
                else:
                    acc[name]["sim"].merge(sequence_similarity(
                        params, tokens, events, schedule,
                        row_stride=similarity_stride))
        if progress is not None:
            progress(idx + 1, len(sequences))

    rows = []
    for name in names:
        a = acc[name]
        if not a["ratio"]:
            raise InvariantError(f"policy {name!r} evaluated zero sequences")
        sim = a["sim"]
        with_sim = similarity_stride > 0
        rows.append(PolicyRow(
            policy=name,
            sequences=len(a["ratio"]),
            skipped=a["skipped"],
            loss_ratio=float(np.mean(a["ratio"])),
            low_ratio=_mean_or_none(a["low"]),
            high_ratio=_mean_or_none(a["high"]),
            mean_cosine=sim.mean_cosine if with_sim else None,
            min_cosine=sim.min_cosine if with_sim and sim.bound_checks else None,
            bound_checks=sim.bound_checks,
            bound_violations=sim.bound_violations,
            per_seq_ratio=a["ratio"],
            per_seq_low=a["low"],
            per_seq_high=a["high"],
        ))
    return EvalReport(seed=eval_seed, schedule=schedule,
                      top_fraction=top_fraction,
                      similarity_stride=similarity_stride, rows=rows,
                      capacity=capacity or [])


def strict_win_fraction(ratios_a, ratios_b) -> float:
    """Fraction of sequences where policy a is strictly better (lower)."""
    a = np.asarray(ratios_a, dtype=np.float64)
    b = np.asarray(ratios_b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise InvariantError("win fraction needs aligned nonempty ratio lists")
    return float(np.mean(a < b))


# ---------------------------------------------------------------------------
# Capacity model.
# ---------------------------------------------------------------------------

def capacity_table(config: ModelConfig, schedules, seq_lens,
                   mem_budget: int) -> list:
    """Bytes + max concurrent streams per (cache kind, seq_len), with a
    ratio column against the full cache at the same length."""
    rows = []
    for seq_len in seq_lens:
        full_bytes = memory_bytes(config, seq_len)
        rows.append({
            "cache": "full", "seq_len": seq_len, "bytes": full_bytes,
            "ratio": 1.0,
            "max_concurrent": max_concurrent(config, seq_len, mem_budget),
        })
        for sched in schedules:
            b = memory_bytes(config, seq_len, sched)
            rows.append({
                "cache": f"B={sched.budget},L={sched.eviction_length}",
                "seq_len": seq_len, "bytes": b,
                "ratio": b / full_bytes,
                "max_concurrent": max_concurrent(config, seq_len, mem_budget,
                                                 sched),
            })
    return rows


# ---------------------------------------------------------------------------
# Serialization.
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


REPORT_FIELDS = ["policy", "sequences", "skipped", "loss_ratio", "low_ratio",
                 "high_ratio", "mean_cosine", "min_cosine", "bound_checks",
                 "bound_violations"]


def report_rows(report: EvalReport) -> list:
    return [{name: _fmt(getattr(row, name)) for name in REPORT_FIELDS}
            for row in report.rows]


def per_sequence_rows(report: EvalReport) -> list:
    out = []
    for row in report.rows:
        for i, ratio in enumerate(row.per_seq_ratio):
            out.append({
                "policy": row.policy, "seq": str(i),
                "loss_ratio": _fmt(ratio),
                "low_ratio": _fmt(row.per_seq_low[i]),
                "high_ratio": _fmt(row.per_seq_high[i]),
            })
    return out


def report_text(report: EvalReport) -> str:
    lines = []
    sched = report.schedule
    lines.append(f"eviction schedule: B={sched.budget} L={sched.eviction_length}"
                 f"  eval seed: {report.seed}"
                 f"  high bucket: top {report.top_fraction:.0%} entropy")
    header = (f"{'policy':<12} {'seqs':>5} {'skip':>4} {'loss_ratio':>11} "
              f"{'low':>9} {'high':>9} {'cosine':>9} {'bound':>11}")
    lines.append(header)
    lines.append("-" * len(header))
    for row in report.rows:
        def cell(v, width=9):
            return f"{v:>{width}.4f}" if v is not None else " " * (width - 4) + "n/a "
        bound = (f"{row.bound_violations}/{row.bound_checks}"
                 if row.bound_checks else "n/a")
        lines.append(
            f"{row.policy:<12} {row.sequences:>5} {row.skipped:>4} "
            f"{cell(row.loss_ratio, 11)} {cell(row.low_ratio)} "
            f"{cell(row.high_ratio)} {cell(row.mean_cosine)} {bound:>11}")
    if report.capacity:
        lines.append("")
        lines.append(f"{'cache':<16} {'seq_len':>8} {'bytes':>14} "
                     f"{'ratio':>8} {'streams':>8}")
        for row in report.capacity:
            lines.append(f"{row['cache']:<16} {row['seq_len']:>8} "
                         f"{row['bytes']:>14} {row['ratio']:>8.4f} "
                         f"{row['max_concurrent']:>8}")
    return "\n".join(lines) + "\n"


def compare_report_rows(rows_a, rows_b) -> str:
    """Per-cell deltas between two report CSVs plus flags for any change
    in the loss-ratio ordering of the shared policies."""
    by_a = {r["policy"]: r for r in rows_a}
    by_b = {r["policy"]: r for r in rows_b}
    shared = [p for p in by_a if p in by_b]
    if not shared:
        raise InvariantError("reports share no policies")
    lines = [f"{'policy':<12} {'column':<12} {'a':>12} {'b':>12} {'delta':>12}"]
    numeric = ["loss_ratio", "low_ratio", "high_ratio", "mean_cosine"]
    for p in shared:
        for col in numeric:
            va, vb = by_a[p].get(col, ""), by_b[p].get(col, "")
            if va == "" or vb == "":
                continue
            fa, fb = float(va), float(vb)
            lines.append(f"{p:<12} {col:<12} {fa:>12.6f} {fb:>12.6f} "
                         f"{fb - fa:>+12.6f}")

    def ranking(table):
        return sorted(shared, key=lambda p: float(table[p]["loss_ratio"]))

    order_a, order_b = ranking(by_a), ranking(by_b)
    if order_a != order_b:
        lines.append("ordering change: " + " < ".join(order_a) +
                     "  ->  " + " < ".join(order_b))
    else:
        lines.append("ordering unchanged: " + " < ".join(order_a))
    return "\n".join(lines) + "\n"
