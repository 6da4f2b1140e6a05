"""Run configuration: JSON in, validated dataclasses out.

A config file is a JSON object whose sections mirror the stage configs
(model, schedule, corpus, rl_corpus, sft, rl, eval, policies). Omitted
sections and keys fall back to package defaults, so `{}` is a complete
config. Every stage stamps the fully resolved config into its run
directory; the stamp plus the seeds regenerates any artifact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from kvlab.cache import EvictionSchedule
from kvlab.corpus import CorpusSpec
from kvlab.errors import InvariantError, MissingArtifactError, UsageError
from kvlab.grpo import RlConfig
from kvlab.model import ModelConfig
from kvlab.sft import SftConfig

__all__ = [
    "EvalSettings",
    "PolicySettings",
    "RunConfig",
    "load_run_config",
    "resolved_config_dict",
]


@dataclass(frozen=True)
class EvalSettings:
    seed: int = 0
    top_fraction: float = 0.2
    similarity_stride: int = 4
    capacity_seq_lens: tuple = ()
    mem_budget_bytes: int = 1 << 30

    def __post_init__(self):
        if not 0 < self.top_fraction < 1:
            raise InvariantError("top_fraction must be in (0, 1)")
        if self.similarity_stride < 0:
            raise InvariantError("similarity_stride must be >= 0")


@dataclass(frozen=True)
class PolicySettings:
    snapkv_window: int = 8
    rkv_attention_weight: float = 0.1
    learned_mode: str = "greedy"

    def __post_init__(self):
        if self.snapkv_window < 1:
            raise InvariantError("snapkv_window must be >= 1")
        if not 0 <= self.rkv_attention_weight <= 1:
            raise InvariantError("rkv_attention_weight must be in [0, 1]")
        if self.learned_mode not in ("greedy", "sample"):
            raise InvariantError(f"unknown learned_mode {self.learned_mode!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: EvictionSchedule = field(
        default_factory=lambda: EvictionSchedule(128, 32))
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    rl_corpus: CorpusSpec = field(
        default_factory=lambda: CorpusSpec(count=16, length=512, seed=1))
    sft: SftConfig = field(default_factory=SftConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    policies: PolicySettings = field(default_factory=PolicySettings)

    def __post_init__(self):
        for name, spec in (("corpus", self.corpus), ("rl_corpus", self.rl_corpus)):
            if spec.length <= self.schedule.trigger_size:
                raise InvariantError(
                    f"{name} length {spec.length} must exceed "
                    f"B + L = {self.schedule.trigger_size}")
        if self.corpus.vocab != self.model.vocab_size or \
                self.rl_corpus.vocab != self.model.vocab_size:
            raise InvariantError("corpus vocab must match the model vocab")


_SECTIONS = {
    "model": ModelConfig,
    "schedule": EvictionSchedule,
    "corpus": CorpusSpec,
    "rl_corpus": CorpusSpec,
    "sft": SftConfig,
    "rl": RlConfig,
    "eval": EvalSettings,
    "policies": PolicySettings,
}


def _build_section(cls, raw: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise UsageError(f"unknown keys in {where}: {sorted(unknown)}")
    if cls is EvalSettings and "capacity_seq_lens" in raw:
        raw = dict(raw, capacity_seq_lens=tuple(raw["capacity_seq_lens"]))
    try:
        return cls(**raw)
    except TypeError as exc:
        raise UsageError(f"bad {where} section: {exc}") from exc


def load_run_config(path=None, *, seed=None, out_dir=None) -> RunConfig:
    """Parse a config file with CLI overrides; None path means defaults."""
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise MissingArtifactError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config root must be a JSON object")
    unknown = set(raw) - set(_SECTIONS) - {"seed", "out_dir"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")

    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise UsageError(f"config section {name!r} must be an object")
        kwargs[name] = _build_section(cls, section, name)
    kwargs["seed"] = int(raw.get("seed", 0))
    kwargs["out_dir"] = str(raw.get("out_dir", "run"))
    if seed is not None:
        kwargs["seed"] = int(seed)
    if out_dir is not None:
        kwargs["out_dir"] = str(out_dir)
    return RunConfig(**kwargs)


def resolved_config_dict(cfg: RunConfig) -> dict:
    """JSON-serializable stamp of every resolved value."""
    out = {"seed": cfg.seed, "out_dir": cfg.out_dir}
    for name in _SECTIONS:
        section = asdict(getattr(cfg, name))
        if "capacity_seq_lens" in section:
            section["capacity_seq_lens"] = list(section["capacity_seq_lens"])
        out[name] = section
    return out
