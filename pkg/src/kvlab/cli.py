"""Command-line pipeline: gen-data -> golden-labels -> train-sft ->
train-rl -> eval, plus compare and dump-attn utilities.

Each stage reads and writes only the run directory, stamps the resolved
config there, and writes artifacts atomically. Exit codes: 0 success,
1 usage, 2 invariant violation, 3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import io
import os
import sys

from kvlab.errors import InvariantError, MissingArtifactError, UsageError

COMMANDS = ("gen-data", "golden-labels", "train-sft", "train-rl", "eval",
            "compare", "dump-attn")

TRAIN_CORPUS = "corpus-train.jsonl"
RL_CORPUS = "corpus-rl.jsonl"
MODEL_CKPT = "model.ckpt"
LABELS = "golden-labels.jsonl"
SFT_CKPT = "scorer-sft.ckpt"
SFT_LOG = "sft-log.csv"
RL_CKPT = "scorer-rl.ckpt"
RL_LOG = "rl-log.csv"
TRAJ_DIR = "trajectories"
REPORT_CSV = "eval-report.csv"
REPORT_TXT = "eval-report.txt"
PER_SEQ_CSV = "eval-per-seq.csv"
CONFIG_STAMP = "config-resolved.json"


class _Parser(argparse.ArgumentParser):
    # argparse would sys.exit(2); route through the exit-code contract instead
    def error(self, message):
        raise UsageError(message)


def _add_common(sub):
    sub.add_argument("--config", metavar="PATH", help="JSON run config")
    sub.add_argument("--seed", type=int, metavar="N",
                     help="override the config's top-level seed")
    sub.add_argument("--threads", type=int, metavar="N",
                     help="BLAS/OpenMP thread cap (default $KVLAB_THREADS or 1)")
    sub.add_argument("--out", metavar="DIR",
                     help="run directory (overrides config out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kvlab",
                     description="KV-cache eviction testbed pipeline")
    sub = parser.add_subparsers(dest="command", metavar="command")
    descriptions = {
        "gen-data": "generate corpora and the frozen model checkpoint",
        "golden-labels": "trace the future-attention oracle over the corpus",
        "train-sft": "fit scorers to golden labels with ranking pairs",
        "train-rl": "GRPO refinement from the SFT checkpoint",
        "eval": "loss ratios, buckets, similarity, capacity over all policies",
        "compare": "per-cell deltas between two eval report CSVs",
        "dump-attn": "write per-head attention matrices as CSV",
    }
    for name in COMMANDS:
        s = sub.add_parser(name, help=descriptions[name],
                           description=descriptions[name])
        _add_common(s)
        if name == "compare":
            s.add_argument("reports", nargs=2, metavar="REPORT_CSV",
                           help="two eval-report.csv files")
        if name == "dump-attn":
            s.add_argument("--sequence", type=int, default=0, metavar="N",
                           help="corpus sequence index (default 0)")
            s.add_argument("--layer", type=int, default=None, metavar="N",
                           help="restrict to one layer")
            s.add_argument("--head", type=int, default=None, metavar="N",
                           help="restrict to one query head")
    return parser


def _apply_threads(count: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(count)


def _resolve_threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.threads
    env = os.environ.get("KVLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"bad KVLAB_THREADS value {env!r}") from exc
    return 1


def _load(args):
    from kvlab.config import load_run_config

    return load_run_config(args.config, seed=args.seed, out_dir=args.out)


def _path(cfg, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def _require(cfg, name: str, producer: str) -> str:
    path = _path(cfg, name)
    if not os.path.exists(path):
        raise MissingArtifactError(
            f"{path} is missing; run `kvlab {producer}` first")
    return path


def _stamp(cfg):
    import json

    from kvlab.artifacts import atomic_write_text
    from kvlab.config import resolved_config_dict

    os.makedirs(cfg.out_dir, exist_ok=True)
    stamp = json.dumps(resolved_config_dict(cfg), indent=2, sort_keys=True)
    atomic_write_text(_path(cfg, CONFIG_STAMP), stamp + "\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _csv_rows(rows):
    return [{k: _fmt(v) for k, v in row.items()} for row in rows]


# ---------------------------------------------------------------------------
# Stage handlers.
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from kvlab.corpus import write_corpus
    from kvlab.model import init_params, save_model_checkpoint

    cfg = _load(args)
    _stamp(cfg)
    n_train = write_corpus(_path(cfg, TRAIN_CORPUS), cfg.corpus)
    n_rl = write_corpus(_path(cfg, RL_CORPUS), cfg.rl_corpus)
    params = init_params(cfg.model, cfg.seed)
    save_model_checkpoint(_path(cfg, MODEL_CKPT), params)
    print(f"wrote {n_train} train + {n_rl} rl sequences and model "
          f"checkpoint to {cfg.out_dir}")
    return 0


def cmd_golden_labels(args) -> int:
    from kvlab.corpus import read_corpus
    from kvlab.model import load_model_checkpoint
    from kvlab.sft import build_golden_labels, write_golden_labels

    cfg = _load(args)
    _stamp(cfg)
    params = load_model_checkpoint(_require(cfg, MODEL_CKPT, "gen-data"))
    _, seqs = read_corpus(_require(cfg, TRAIN_CORPUS, "gen-data"))
    labels = build_golden_labels(params, seqs, cfg.schedule)
    meta = {"budget": cfg.schedule.budget,
            "eviction_length": cfg.schedule.eviction_length,
            "sequences": len(seqs), "backend": _backend_name()}
    count = write_golden_labels(_path(cfg, LABELS), meta, labels)
    print(f"wrote {count} golden eviction records to {_path(cfg, LABELS)}")
    return 0


def cmd_train_sft(args) -> int:
    from kvlab.artifacts import write_csv
    from kvlab.corpus import read_corpus
    from kvlab.model import load_model_checkpoint
    from kvlab.scorer import ScorerBank
    from kvlab.sft import (build_sft_data, heldout_split, read_golden_labels,
                           train_sft)

    cfg = _load(args)
    _stamp(cfg)
    params = load_model_checkpoint(_require(cfg, MODEL_CKPT, "gen-data"))
    _, seqs = read_corpus(_require(cfg, TRAIN_CORPUS, "gen-data"))
    _, labels = read_golden_labels(_require(cfg, LABELS, "golden-labels"))
    data = build_sft_data(params, seqs, labels, cfg.schedule, cfg.sft)
    _, heldout = heldout_split(seqs, cfg.sft.heldout_fraction)
    bank_init = ScorerBank.init(cfg.model.layers, cfg.model.kv_heads,
                                cfg.model.scorer_input_dim, cfg.sft.seed,
                                cfg.sft.hidden)
    bank, log_rows = train_sft(bank_init, data, cfg.sft, heldout)
    bank.save(_path(cfg, SFT_CKPT))
    write_csv(_path(cfg, SFT_LOG), ["step", "lr", "loss", "heldout_accuracy"],
              _csv_rows(log_rows))
    final_acc = log_rows[-1]["heldout_accuracy"]
    print(f"SFT done: {len(log_rows)} steps, final held-out ranking "
          f"accuracy {final_acc}")
    return 0


def cmd_train_rl(args) -> int:
    from kvlab.artifacts import write_csv, write_jsonl
    from kvlab.corpus import read_corpus
    from kvlab.grpo import train_rl, trajectory_records
    from kvlab.model import load_model_checkpoint
    from kvlab.scorer import ScorerBank

    cfg = _load(args)
    _stamp(cfg)
    params = load_model_checkpoint(_require(cfg, MODEL_CKPT, "gen-data"))
    _, seqs = read_corpus(_require(cfg, RL_CORPUS, "gen-data"))
    bank_init = ScorerBank.load(_require(cfg, SFT_CKPT, "train-sft"))
    traj_dir = _path(cfg, TRAJ_DIR)
    os.makedirs(traj_dir, exist_ok=True)

    def sink(step, trajectories):
        path = os.path.join(traj_dir, f"step-{step:04d}.jsonl")
        write_jsonl(path, "trajectories", {"step": step},
                    trajectory_records(trajectories))

    bank, log_rows = train_rl(params, bank_init, seqs, cfg.schedule, cfg.rl,
                              trajectory_sink=sink)
    bank.save(_path(cfg, RL_CKPT))
    write_csv(_path(cfg, RL_LOG),
              ["step", "lr", "mean_reward", "mean_abs_advantage", "objective",
               "mean_kl", "clip_fraction"], _csv_rows(log_rows))
    first = sum(r["mean_reward"] for r in log_rows[:20]) / min(20, len(log_rows))
    last = sum(r["mean_reward"] for r in log_rows[-20:]) / min(20, len(log_rows))
    print(f"RL done: {len(log_rows)} steps, mean reward first-20 {first:.4f} "
          f"-> final-20 {last:.4f}")
    return 0


def _backend_name() -> str:
    from kvlab.backend import backend_name

    return backend_name()


def cmd_eval(args) -> int:
    from kvlab.artifacts import atomic_write_text, write_csv
    from kvlab.corpus import read_corpus
    from kvlab.evalbench import (REPORT_FIELDS, capacity_table,
                                 default_policy_suite, evaluate_policies,
                                 per_sequence_rows, report_rows, report_text)
    from kvlab.model import load_model_checkpoint
    from kvlab.scorer import ScorerBank

    cfg = _load(args)
    _stamp(cfg)
    params = load_model_checkpoint(_require(cfg, MODEL_CKPT, "gen-data"))
    spec, seqs = read_corpus(_require(cfg, TRAIN_CORPUS, "gen-data"))

    banks = {}
    for label, name in (("sft_bank", SFT_CKPT), ("rl_bank", RL_CKPT)):
        path = _path(cfg, name)
        if os.path.exists(path):
            banks[label] = ScorerBank.load(path)
    suite = default_policy_suite(
        snapkv_window=cfg.policies.snapkv_window,
        rkv_attention_weight=cfg.policies.rkv_attention_weight,
        learned_mode=cfg.policies.learned_mode, **banks)

    seq_lens = list(cfg.eval.capacity_seq_lens) or sorted(
        {cfg.schedule.trigger_size, spec.length, 2 * spec.length})
    capacity = capacity_table(cfg.model, [cfg.schedule], seq_lens,
                              cfg.eval.mem_budget_bytes)
    report = evaluate_policies(
        params, suite, cfg.schedule, seqs, eval_seed=cfg.eval.seed,
        top_fraction=cfg.eval.top_fraction,
        similarity_stride=cfg.eval.similarity_stride, capacity=capacity)

    full = report.row("full")
    if abs(full.loss_ratio - 1.0) > 1e-9:
        raise InvariantError(
            f"full-cache loss ratio {full.loss_ratio!r} deviates from 1.0")
    violations = sum(r.bound_violations for r in report.rows)
    if violations:
        raise InvariantError(
            f"{violations} attention-output error-bound violations")

    write_csv(_path(cfg, REPORT_CSV), REPORT_FIELDS, report_rows(report))
    write_csv(_path(cfg, PER_SEQ_CSV),
              ["policy", "seq", "loss_ratio", "low_ratio", "high_ratio"],
              per_sequence_rows(report))
    text = report_text(report)
    atomic_write_text(_path(cfg, REPORT_TXT), text)
    print(text, end="")
    return 0


def cmd_compare(args) -> int:
    from kvlab.artifacts import read_csv
    from kvlab.evalbench import compare_report_rows

    rows_a = read_csv(args.reports[0])
    rows_b = read_csv(args.reports[1])
    print(compare_report_rows(rows_a, rows_b), end="")
    return 0


def cmd_dump_attn(args) -> int:
    import numpy as np

    from kvlab.artifacts import atomic_write_text
    from kvlab.corpus import read_corpus
    from kvlab.model import forward_full, load_model_checkpoint

    cfg = _load(args)
    params = load_model_checkpoint(_require(cfg, MODEL_CKPT, "gen-data"))
    _, seqs = read_corpus(_require(cfg, TRAIN_CORPUS, "gen-data"))
    if not 0 <= args.sequence < len(seqs):
        raise UsageError(f"--sequence must be in [0, {len(seqs)})")
    mc = params.config
    if args.layer is not None and not 0 <= args.layer < mc.layers:
        raise UsageError(f"--layer must be in [0, {mc.layers})")
    if args.head is not None and not 0 <= args.head < mc.q_heads:
        raise UsageError(f"--head must be in [0, {mc.q_heads})")
    dump_dir = os.path.join(cfg.out_dir, "attn-dump", f"seq-{args.sequence}")
    os.makedirs(dump_dir, exist_ok=True)
    written = []

    def consume(li, attn, keys, values):
        if args.layer is not None and li != args.layer:
            return
        heads = range(mc.q_heads) if args.head is None else [args.head]
        for h in heads:
            buf = io.StringIO()
            np.savetxt(buf, attn[h], fmt="%.8e", delimiter=",")
            path = os.path.join(dump_dir, f"layer-{li}-head-{h}.csv")
            atomic_write_text(path, buf.getvalue())
            written.append(path)

    forward_full(params, seqs[args.sequence], attn_consumer=consume)
    print(f"wrote {len(written)} attention matrices under {dump_dir}")
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "golden-labels": cmd_golden_labels,
    "train-sft": cmd_train_sft,
    "train-rl": cmd_train_rl,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "dump-attn": cmd_dump_attn,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (see kvlab --help)")
        _apply_threads(_resolve_threads(args))
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except InvariantError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
