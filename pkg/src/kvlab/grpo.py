"""Policy-gradient stage over eviction trajectories.

For each training sequence, G trajectories are rolled out with the
sampling policy; a trajectory's scalar reward penalizes squared loss
increases at confidently-predicted positions (low entropy under the full
model) where the increase clears a margin. Group-relative advantages are
broadcast to every eviction event of the trajectory, and the update is
the clipped importance-ratio surrogate with an exact per-draw categorical
KL toward the supervised reference policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kvlab.cache import EvictionSchedule
from kvlab.errors import InvariantError
from kvlab.model import ModelParams, forward_full
from kvlab.numerics import RandomStream, stable_softmax
from kvlab.policies import LearnedPolicy
from kvlab.rollout import RunResult, run_evicted_stream
from kvlab.scorer import ScorerBank, score_batch, score_grad_batch, zero_grads

__all__ = [
    "RlConfig",
    "Trajectory",
    "reward",
    "advantages",
    "rollout_trajectory",
    "grpo_objective_and_grad",
    "train_rl",
    "trajectory_records",
]

REWARD_VARIANTS = ("all", "low", "high", "low_large")


@dataclass(frozen=True)
class RlConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    eta: float = 1.5
    low_fraction: float = 0.8
    lr: float = 3e-4
    warmup_steps: int = 10
    steps: int = 200
    batch_sequences: int = 1
    reward_variant: str = "low_large"
    reward_aggregate: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise InvariantError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise InvariantError("clip_eps must be in (0, 1)")
        if self.eta <= 0:
            raise InvariantError("eta must be positive")
        if self.reward_variant not in REWARD_VARIANTS:
            raise InvariantError(f"unknown reward variant {self.reward_variant!r}")
        if self.reward_aggregate not in ("mean", "sum"):
            raise InvariantError(f"unknown reward aggregate {self.reward_aggregate!r}")


@dataclass
class Trajectory:
    seq: int
    run: RunResult
    reward: float
    advantage: float = 0.0


# ---------------------------------------------------------------------------
# Reward and advantages.
# ---------------------------------------------------------------------------

def reward(loss_ori: np.ndarray, loss_evict: np.ndarray, entropy: np.ndarray,
           *, eta: float = 1.5, low_fraction: float = 0.8,
           variant: str = "low_large", aggregate: str = "mean") -> float:
    """Scalar sequence reward: minus the (mean) squared loss increase over
    the qualifying position set E; zero when E is empty.

    The default gate takes positions whose full-model entropy ranks in the
    bottom `low_fraction` of the sequence and whose loss increase exceeds
    eta. Variants widen or flip the entropy gate for ablations.
    """
    lo = np.asarray(loss_ori, dtype=np.float64)
    le = np.asarray(loss_evict, dtype=np.float64)
    en = np.asarray(entropy, dtype=np.float64)
    if not lo.shape == le.shape == en.shape:
        raise InvariantError(
            f"reward inputs must align: {lo.shape} {le.shape} {en.shape}"
        )
    n = lo.size
    if n == 0:
        return 0.0
    delta = le - lo

    # rank-based entropy gate; ties resolve to the lower position
    order = np.argsort(en, kind="stable")
    k = int(np.floor(low_fraction * n))
    low_mask = np.zeros(n, dtype=bool)
    low_mask[order[:k]] = True

    if variant == "all":
        chosen = np.ones(n, dtype=bool)
    elif variant == "low":
        chosen = low_mask
    elif variant == "high":
        chosen = ~low_mask
    elif variant == "low_large":
        chosen = low_mask & (delta > eta)
    else:
        raise InvariantError(f"unknown reward variant {variant!r}")

    if not chosen.any():
        return 0.0
    sq = delta[chosen] ** 2
    return float(-sq.mean() if aggregate == "mean" else -sq.sum())


def advantages(rewards) -> np.ndarray:
    """Group-relative normalization with population std; equal rewards
    yield exact zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise InvariantError("advantage groups need at least 2 trajectories")
    if float(r.max()) == float(r.min()):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + 1e-8)


# ---------------------------------------------------------------------------
# Rollouts.
# ---------------------------------------------------------------------------

def rollout_trajectory(params: ModelParams, bank: ScorerBank, tokens,
                       schedule: EvictionSchedule, rng: RandomStream,
                       mode: str = "sample") -> RunResult:
    """One sampled eviction run storing everything the update needs:
    candidate sets, drawn orders, candidate features, and logprobs."""
    policy = LearnedPolicy(bank, mode=mode, keep_features=True)
    return run_evicted_stream(params, policy, schedule, tokens, rng=rng)


# ---------------------------------------------------------------------------
# Objective and exact gradient.
# ---------------------------------------------------------------------------

def _event_terms(phi_new: np.ndarray, phi_ref: np.ndarray, rows_drawn,
                 logprob_old: float, advantage: float, clip_eps: float):
    """Per-event surrogate pieces as functions of candidate scores.

    Returns (term, kl, dterm_dphi, dkl_dphi, clipped, ratio): `term` is
    min(r*A, clip(r)*A) with r the sequential-action probability ratio;
    KL is the exact per-draw categorical KL against the reference,
    averaged over draws. Gradients are with respect to phi_new.
    """
    n = phi_new.size
    p = stable_softmax(-phi_new)
    pr = stable_softmax(-phi_ref)
    live = np.ones(n, dtype=bool)
    lp = 0.0
    dlp = np.zeros(n)
    kl_sum = 0.0
    dkl = np.zeros(n)
    for row in rows_drawn:
        q = p[live] / p[live].sum()
        qr = pr[live] / pr[live].sum()
        idx = np.flatnonzero(live)
        where = int(np.searchsorted(idx, row))
        lp += float(np.log(q[where]))
        dlp[idx] += q
        dlp[row] -= 1.0
        log_ratio = np.log(q) - np.log(qr)
        kl_k = float(np.sum(q * log_ratio))
        kl_sum += kl_k
        dkl[idx] += q * (kl_k - log_ratio)
        live[row] = False
    draws = len(rows_drawn)
    kl = kl_sum / draws
    dkl /= draws

    ratio = float(np.exp(lp - logprob_old))
    u1 = ratio * advantage
    u2 = float(np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)) * advantage
    if u1 <= u2:
        term, coeff, clipped = u1, advantage * ratio, False
    else:
        term, coeff, clipped = u2, 0.0, True
    return term, kl, coeff * dlp, dkl, clipped, ratio


def grpo_objective_and_grad(bank: ScorerBank, ref_bank: ScorerBank,
                            trajectories, clip_eps: float, kl_beta: float):
    """Mean-over-events clipped surrogate minus beta * KL, with exact
    gradients per (layer, group) chained through the scorer.

    Returns (objective, grads dict keyed (layer, group), stats dict).
    """
    grads = {gk: zero_grads(p) for gk, p in bank.items()}
    total = 0.0
    n_events = 0
    kl_total = 0.0
    clip_count = 0
    ratio_total = 0.0
    for traj in trajectories:
        for ev in traj.run.events:
            if ev.features is None:
                raise InvariantError("trajectory event carries no features")
            params = bank.get(ev.layer, ev.kv_head)
            ref = ref_bank.get(ev.layer, ev.kv_head)
            x = ev.features.astype(np.float64)
            if x.shape[0] != ev.candidates.size:
                raise InvariantError("stored candidate set size mismatch")
            phi_new = score_batch(params, x)
            phi_ref = score_batch(ref, x)
            rows_drawn = np.searchsorted(ev.candidates, ev.drawn)
            term, kl, dterm, dkl, clipped, ratio = _event_terms(
                phi_new, phi_ref, rows_drawn, ev.logprob, traj.advantage,
                clip_eps)
            total += term - kl_beta * kl
            dphi = dterm - kl_beta * dkl
            grads[(ev.layer, ev.kv_head)].add_(
                score_grad_batch(params, x, dphi))
            n_events += 1
            kl_total += kl
            clip_count += clipped
            ratio_total += ratio
    if n_events == 0:
        raise InvariantError("no eviction events in trajectory batch")
    for g in grads.values():
        g.w1 /= n_events
        g.b1 /= n_events
        g.w2 /= n_events
        g.b2 /= n_events
    stats = {
        "events": n_events,
        "mean_kl": kl_total / n_events,
        "clip_fraction": clip_count / n_events,
        "mean_ratio": ratio_total / n_events,
    }
    return total / n_events, grads, stats


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------

def _rl_lr(cfg: RlConfig, step: int) -> float:
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr


def train_rl(params: ModelParams, bank_init: ScorerBank, sequences,
             schedule: EvictionSchedule, cfg: RlConfig,
             trajectory_sink=None):
    """GRPO loop from the supervised checkpoint.

    The reference bank stays fixed at `bank_init` for the whole run; the
    behavior policy is refreshed every batch (one update epoch per batch,
    so stored logprobs are exactly on-policy at update time). Full-model
    losses and entropies per sequence are computed once and reused.

    `trajectory_sink(step, trajectories)` receives each batch for
    persistence when provided. Returns (bank, log_rows).
    """
    if not sequences:
        raise InvariantError("empty RL dataset")
    bank = bank_init.copy()
    ref_bank = bank_init
    root = RandomStream(cfg.seed)
    full_cache: dict = {}

    def full_info(seq_idx):
        if seq_idx not in full_cache:
            out = forward_full(params, sequences[seq_idx])
            full_cache[seq_idx] = (out.loss, out.entropy[: out.loss.size])
        return full_cache[seq_idx]

    log_rows = []
    for step in range(1, cfg.steps + 1):
        pick_stream = root.derive("batch", step)
        seq_ids = [int(i) for i in
                   pick_stream.integers(cfg.batch_sequences, len(sequences))]
        trajectories = []
        for bi, seq_idx in enumerate(seq_ids):
            loss_ori, entropy = full_info(seq_idx)
            group = []
            for gi in range(cfg.group_size):
                rng = root.derive("rollout", step, bi, gi)
                run = rollout_trajectory(params, bank, sequences[seq_idx],
                                         schedule, rng)
                r = reward(loss_ori, run.loss, entropy, eta=cfg.eta,
                           low_fraction=cfg.low_fraction,
                           variant=cfg.reward_variant,
                           aggregate=cfg.reward_aggregate)
                group.append(Trajectory(seq=seq_idx, run=run, reward=r))
            advs = advantages([t.reward for t in group])
            for t, a in zip(group, advs):
                t.advantage = float(a)
            trajectories.extend(group)

        objective, grads, stats = grpo_objective_and_grad(
            bank, ref_bank, trajectories, cfg.clip_eps, cfg.kl_beta)
        lr = _rl_lr(cfg, step)
        for gk, p in bank.items():
            g = grads[gk]
            # ascent on the objective
            p.w1 += lr * g.w1
            p.b1 += lr * g.b1
            p.w2 += lr * g.w2
            p.b2 += lr * g.b2

        rewards = [t.reward for t in trajectories]
        log_rows.append({
            "step": step,
            "lr": lr,
            "mean_reward": float(np.mean(rewards)),
            "mean_abs_advantage": float(np.mean([abs(t.advantage) for t in trajectories])),
            "objective": objective,
            "mean_kl": stats["mean_kl"],
            "clip_fraction": stats["clip_fraction"],
        })
        if trajectory_sink is not None:
            trajectory_sink(step, trajectories)
    return bank, log_rows


def trajectory_records(trajectories):
    """JSON-lines records: per-event lines then a footer per trajectory."""
    for ti, traj in enumerate(trajectories):
        for ev in traj.run.events:
            yield {
                "traj": ti, "seq": traj.seq, "step": ev.step,
                "layer": ev.layer, "group": ev.kv_head,
                "candidates": [int(c) for c in ev.candidates],
                "drawn": [int(d) for d in ev.drawn],
                "evicted": [int(p) for p in ev.evicted_positions],
                "logprob": float(ev.logprob),
            }
        yield {"traj": ti, "seq": traj.seq, "reward": float(traj.reward),
               "advantage": float(traj.advantage), "footer": True}
