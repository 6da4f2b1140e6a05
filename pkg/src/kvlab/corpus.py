"""Synthetic token corpora with long-range structure.

Sequences are concatenations of short random motifs; with probability
`recall_rate` a segment verbatim-replays a motif already used earlier in
the same sequence. Replays are Zipf-weighted by first-use order, so each
sequence develops a few persistently hot motifs and a long cold tail.
Each motif's tokens come from one aligned id block, so related tokens
cluster in id space the way topical vocabulary clusters in real text.
Replayed content gives attention something nonlocal to lock onto, so
eviction choices matter downstream, and hot-versus-cold usage history is
informative about which keys will be needed again.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from kvlab.artifacts import read_jsonl, write_jsonl
from kvlab.errors import InvariantError
from kvlab.numerics import RandomStream

__all__ = [
    "CorpusSpec",
    "gen_sequence",
    "gen_corpus",
    "write_corpus",
    "read_corpus",
]


@dataclass(frozen=True)
class CorpusSpec:
    count: int = 32
    length: int = 1024
    vocab: int = 256
    motif_count: int = 64
    motif_min: int = 4
    motif_max: int = 16
    recall_rate: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.count < 1 or self.length < 2:
            raise InvariantError("corpus needs count >= 1 and length >= 2")
        if not 0 <= self.recall_rate <= 1:
            raise InvariantError("recall_rate must be in [0, 1]")
        if not 1 <= self.motif_min <= self.motif_max:
            raise InvariantError("bad motif length range")
        if self.vocab < 2:
            raise InvariantError("vocab must be >= 2")


# Skew of the replay distribution over first-use rank. 0 would be uniform;
# larger values concentrate replays on the earliest-introduced motifs.
_REPLAY_SKEW = 1.2


def _replay_draw(rs, n: int) -> int:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    cdf = np.cumsum(ranks ** -_REPLAY_SKEW)
    return int(np.searchsorted(cdf, rs.uniform() * cdf[-1], side="right"))


# Ids per motif alphabet block. Each motif draws its tokens from one
# aligned block, so co-occurring tokens have nearby ids (topical
# clumping), and cycles its block permutation so every in-motif token
# keeps a single consistent successor.
_BLOCK = 8


def _motif_library(spec: CorpusSpec) -> list:
    root = RandomStream(spec.seed).derive("motifs")
    span = spec.motif_max - spec.motif_min + 1
    block = min(_BLOCK, spec.vocab)
    blocks = max(1, spec.vocab // block)
    library = []
    for m in range(spec.motif_count):
        rs = root.derive(m)
        length = spec.motif_min + rs.integer(span)
        base = (m % blocks) * block
        order = np.argsort(rs.uniforms(block))
        library.append(np.resize(base + order, length))
    return library


def gen_sequence(spec: CorpusSpec, index: int, return_mask: bool = False):
    """Sequence `index` of the corpus; optionally also a boolean mask
    marking tokens that belong to recalled (replayed) segments."""
    library = _motif_library(spec)
    rs = RandomStream(spec.seed).derive("sequence", index)
    parts = []
    mask_parts = []
    used = []
    total = 0
    while total < spec.length:
        recall = bool(used) and rs.uniform() < spec.recall_rate
        if recall:
            motif = used[_replay_draw(rs, len(used))]
        else:
            motif = library[rs.integer(spec.motif_count)]
            used.append(motif)
        parts.append(motif)
        mask_parts.append(np.full(motif.size, recall))
        total += motif.size
    tokens = np.concatenate(parts)[: spec.length]
    if return_mask:
        return tokens, np.concatenate(mask_parts)[: spec.length]
    return tokens


def gen_corpus(spec: CorpusSpec) -> list:
    """All sequences of the corpus, deterministic in the spec."""
    return [gen_sequence(spec, i) for i in range(spec.count)]


def write_corpus(path: str, spec: CorpusSpec, sequences=None) -> int:
    if sequences is None:
        sequences = gen_corpus(spec)
    records = ({"seq": i, "tokens": [int(t) for t in tokens]}
               for i, tokens in enumerate(sequences))
    return write_jsonl(path, "corpus", {"spec": asdict(spec)}, records)


def read_corpus(path: str):
    """Returns (CorpusSpec, list of token arrays)."""
    header, records = read_jsonl(path, "corpus")
    spec = CorpusSpec(**header["spec"])
    by_seq = {rec["seq"]: np.asarray(rec["tokens"], dtype=np.int64) for rec in records}
    if sorted(by_seq) != list(range(len(by_seq))):
        raise InvariantError(f"{path}: non-contiguous sequence ids")
    return spec, [by_seq[i] for i in range(len(by_seq))]
