"""Frozen decoder-only transformer with grouped-query attention.

Small enough for seconds-scale tests, structured enough for nontrivial
attention: RMSNorm pre-norm blocks, rotary positions, SiLU MLP, separate
unembedding. Parameters are random-initialized once and never updated;
the package treats them as a fixed environment.

Two forward paths share one attention kernel: `forward_full` over a whole
sequence (optionally exporting attention matrices), and chunked decoding
against per-(layer, group) caches, which is the eviction-aware path.
Rotary phases always use original token positions, and keys are cached
post-rotation, so attention stays position-consistent after evictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kvlab import backend
from kvlab.artifacts import atomic_write_bytes, read_bytes
from kvlab.cache import GroupCache
from kvlab.errors import InvariantError
from kvlab.numerics import RandomStream, entropy_rows, softmax_rows

__all__ = [
    "ModelConfig",
    "ModelParams",
    "ForwardOutput",
    "CacheState",
    "init_params",
    "forward_full",
    "forward_chunk_with_cache",
    "forward_step_with_cache",
    "save_model_checkpoint",
    "load_model_checkpoint",
]

# Large rotary base keeps the low-frequency half of each head phase-stable
# across the distances evictions span, which the matching heads rely on.
_ROPE_BASE = 1e6
_NORM_EPS = 1e-6

# Plain-init gains (used for degenerate shapes that cannot host the recall
# pathway below).
_QK_GAIN = 1.5
_OUT_GAIN = 2.5

# Recall-pathway amplitudes. The initialization draws every tensor from
# seeded Gaussians but correlates a few of them so the frozen network can
# actually use its cache: one head copies the previous token's code into a
# message subspace, later heads attend to positions whose message matches
# the current token and retrieve what followed, and the unembedding reads
# the retrieved code. Predictions at recalled spans then depend on distant
# cache entries, so evicting the wrong keys measurably hurts the loss.
_EMB_CONTENT = 1.0   # per-token embedding component
_EMB_SHARED = 2.0    # shared embedding direction (positional-carrier SNR)
_LOUD_SIGMA = 0.12   # lognormal spread of per-token content loudness
_CLUSTER_SIZE = 8    # token ids per content cluster
_CLUSTER_W = 0.5     # content weight on the shared cluster direction
_PREV_GAIN = 50.0    # logit amplitude of the previous-token head
_MATCH_GAIN = 50.0   # logit amplitude of the token-match heads
_MSG_SCALE = 3.0     # residual amplitude of the previous-token message
_MIX_Q = 12.0        # query sharpness of the context-mix heads
_MIX_OUT = 0.0       # per-head write amplitude of the context mix
_MIX_VALUE_NORM = 0.115  # typical mix-head attention row norm at _MIX_Q
_K0_CODE = 1.0       # token-code component of the first layer's keys
_AGE_K = 1.2         # key amplitude on the seniority band of match heads
_AGE_BONUS = 8.0     # match-logit preference for old entries across max_positions
_AGE_PHASE = 1.0     # query phase lead; keeps the preference steep for young entries
_PRED_SCALE = 1.2    # residual amplitude of the retrieved prediction
_NOISE_OUT = 0.1     # output amplitude of undesigned attention heads
_Q_JITTER = 0.05     # per-head perturbation of the match-head queries
_MLP_SCALE = 0.15    # residual amplitude of each MLP block
_SKILL_SCALE = 0.20  # unembedding read-out of the prediction subspace
_BASE_LOGITS = 1.2   # logit spread of the unstructured direct path
_SILU_RMS = 0.55     # RMS of silu(z), z ~ N(0, 1); used for MLP scaling


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    layers: int = 4
    q_heads: int = 8
    kv_heads: int = 2
    head_dim: int = 16
    hidden_dim: int = 128
    max_positions: int = 2048
    dtype_bytes: int = 2  # deployment dtype, used by the capacity model only

    def __post_init__(self):
        dims = (self.vocab_size, self.layers, self.q_heads, self.kv_heads,
                self.head_dim, self.hidden_dim, self.max_positions, self.dtype_bytes)
        if any(d < 1 for d in dims):
            raise InvariantError(f"all config dims must be >= 1, got {dims}")
        if self.q_heads % self.kv_heads != 0:
            raise InvariantError(
                f"q_heads {self.q_heads} not divisible by kv_heads {self.kv_heads}"
            )

    @property
    def group_size(self) -> int:
        return self.q_heads // self.kv_heads

    @property
    def scorer_input_dim(self) -> int:
        """Feature width consumed by the scoring model: 6g + 2D."""
        return 6 * self.group_size + 2 * self.head_dim


@dataclass(frozen=True)
class LayerParams:
    attn_gain: np.ndarray
    wq: np.ndarray  # [hidden, q_heads*D]
    wk: np.ndarray  # [hidden, kv_heads*D]
    wv: np.ndarray  # [hidden, kv_heads*D]
    wo: np.ndarray  # [q_heads*D, hidden]
    mlp_gain: np.ndarray
    w_up: np.ndarray    # [hidden, 4*hidden]
    w_down: np.ndarray  # [4*hidden, hidden]


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    embedding: np.ndarray  # [vocab, hidden]
    layer_params: tuple
    final_gain: np.ndarray
    unembed: np.ndarray  # [hidden, vocab]


@dataclass
class ForwardOutput:
    """Full-sequence forward results.

    loss has length T-1: loss[t] is the next-token cross-entropy in nats
    for predicting tokens[t+1]. entropy has length T. attention, when
    requested, is one [q_heads, T, T] row-stochastic causal array per
    layer; keys/values are per-layer [T, kv_heads, D] (keys post-rotary).
    """

    logits: np.ndarray
    loss: np.ndarray
    entropy: np.ndarray
    attention: list | None = None
    keys: list | None = None
    values: list | None = None


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic Gaussian init, a pure function of (config, seed).

    Shapes that can host it get the correlated draw from `_recall_init`,
    which wires a cache-dependent token-recall pathway; degenerate shapes
    fall back to the plain iid draw.
    """
    root = RandomStream(seed).derive("model-init")
    if (config.layers >= 2 and config.head_dim >= 8 and config.head_dim % 2 == 0
            and config.hidden_dim > 2 * config.head_dim + 1):
        return _recall_init(config, root)
    return _plain_init(config, root)


def _plain_init(config: ModelConfig, root: RandomStream) -> ModelParams:
    hd = config.hidden_dim
    qd = config.q_heads * config.head_dim
    kd = config.kv_heads * config.head_dim

    def gauss(tag, shape, std):
        n = int(np.prod(shape))
        return (std * root.derive(*tag).normals(n)).reshape(shape)

    layer_list = []
    for i in range(config.layers):
        layer_list.append(LayerParams(
            attn_gain=np.ones(hd),
            wq=gauss(("wq", i), (hd, qd), _QK_GAIN / np.sqrt(hd)),
            wk=gauss(("wk", i), (hd, kd), _QK_GAIN / np.sqrt(hd)),
            wv=gauss(("wv", i), (hd, kd), 1.0 / np.sqrt(hd)),
            wo=gauss(("wo", i), (qd, hd), 1.0 / np.sqrt(qd)),
            mlp_gain=np.ones(hd),
            w_up=gauss(("w_up", i), (hd, 4 * hd), 1.0 / np.sqrt(hd)),
            w_down=gauss(("w_down", i), (4 * hd, hd), 1.0 / np.sqrt(4 * hd)),
        ))
    return ModelParams(
        config=config,
        embedding=gauss(("embed",), (config.vocab_size, hd), 1.0),
        layer_params=tuple(layer_list),
        final_gain=np.ones(hd),
        unembed=gauss(("unembed",), (hd, config.vocab_size), _OUT_GAIN / np.sqrt(hd)),
    )


def _band_vector(stream: RandomStream, head_dim: int, bands) -> np.ndarray:
    """Random-phase unit vector spread evenly over the given rotary bands."""
    half = head_dim // 2
    bands = list(bands)
    z = stream.normals(2 * len(bands)).reshape(-1, 2)
    w = np.zeros(head_dim)
    amp = 1.0 / np.sqrt(len(bands))
    for (a, b), band in zip(z, bands):
        r = float(np.hypot(a, b)) or 1.0
        w[band] = amp * a / r
        w[band + half] = amp * b / r
    return w


def _rotate_by_offset(w: np.ndarray, offset: int) -> np.ndarray:
    cos, sin = _rope_tables(np.array([offset]), w.size)
    return _apply_rope(w[None, None, :], cos, sin)[0, 0]


def _recall_init(config: ModelConfig, root: RandomStream) -> ModelParams:
    """Correlated-Gaussian draw of a cache-dependent recall pathway.

    Layer 0 head 0 attends one position back (rotary phase kernel on a
    shared embedding direction) and writes the previous token's code into
    a message subspace. Every head of every later layer compares the
    current token's code against those messages, so positions whose
    predecessor equals the current token win the softmax, and retrieves a
    second code identifying the token that followed there. The unembedding
    reads the retrieved code. Next-token loss at repeated spans therefore
    depends on distant cache entries, which is what gives eviction quality
    something to protect. Every tensor is still a seeded Gaussian draw;
    only the correlations between draws are chosen.
    """
    hd = config.hidden_dim
    d = config.head_dim
    half = d // 2
    g = config.group_size
    qd = config.q_heads * d
    kd = config.kv_heads * d
    vs = config.vocab_size
    n_match = config.kv_heads * (config.layers - 1)

    def normals(shape, *tag):
        n = int(np.prod(shape))
        return root.derive(*tag).normals(n).reshape(shape)

    # Shared carrier direction plus per-token content, kept orthogonal so
    # the position head's key magnitudes do not wobble with token identity.
    u0 = normals((hd,), "shared-dir")
    u0 *= np.sqrt(hd) / np.linalg.norm(u0)

    # Message subspaces: previous-token codes ride msg_map, retrieved
    # prediction codes ride pred_map. Rows are orthonormalized so writing
    # then reading a code through a map is exact. Embedding content and
    # the token code maps are projected off both subspaces (and off u0)
    # so code reads do not pick up messages, nor messages token content.
    def sub_map(tag):
        q, _ = np.linalg.qr(normals((hd, d), tag))
        return q.T * np.sqrt(hd / d)

    msg_map = sub_map("msg-map")
    pred_map = sub_map("pred-map")
    protect = np.concatenate([u0[None, :], msg_map, pred_map], axis=0)
    q_basis, _ = np.linalg.qr(protect.T)

    def clean(m):
        return m - (m @ q_basis) @ q_basis.T

    # Per-token loudness: every signal derived from a token's content
    # (match logits, leak levels, key norms) scales with its lambda, so
    # tokens occupy a wide, stable continuum of attention propensity.
    loud = np.exp(_LOUD_SIGMA * normals((vs,), "loudness"))
    # Content codes share a direction within blocks of _CLUSTER_SIZE ids,
    # so same-block tokens partially match each other's messages. Replays
    # then spray graded attention over every related key, not just exact
    # predecessors, which fills in the middle of the score distribution.
    n_clusters = max(1, vs // _CLUSTER_SIZE)
    cluster_dirs = clean(normals((n_clusters, hd), "cluster"))
    mates = cluster_dirs[np.arange(vs) // _CLUSTER_SIZE % n_clusters]
    indiv = clean(normals((vs, hd), "embed"))
    eps_flat = np.sqrt(1.0 - _CLUSTER_W ** 2) * indiv + _CLUSTER_W * mates
    eps = eps_flat * loud[:, None]
    # Loudness scales the content component only, so a token's code is
    # written and matched at amplitude lambda: key norms expose lambda
    # statically, and the attention a key attracts grows with it. Sigma
    # is kept small enough that the quietest token's exact match still
    # beats the loudest cluster-mate.
    embedding = _EMB_CONTENT * eps + _EMB_SHARED * u0[None, :]
    # How strongly the shared direction reads out of a normed residual row;
    # deeper layers dilute it by their larger residual RMS.
    emb_rms = np.sqrt(np.mean(embedding ** 2, axis=1))
    u_read0 = float(np.mean(embedding @ u0 / emb_rms))
    code_key = clean(normals((hd, d), "code-key").T).T / np.sqrt(hd)
    code_val = clean(normals((hd, d), "code-val").T).T / np.sqrt(hd)
    code_var = (hd - 2 * d - 1) / hd  # per-dim code variance after cleaning

    # Band split: the fast half of the rotary spectrum gives the
    # previous-token head a sharp kernel in relative position; the slow
    # half stays phase-stable across the whole context and carries the
    # match codes.
    carrier_bands = range(half // 2)
    live_dims = np.r_[half // 2:half, half + half // 2:d]
    m_live = live_dims.size
    # Matcher projections skip the fastest slow band: what remains drifts
    # only a few degrees across the longest context, so match strength is
    # position-blind and repeated contexts split attention evenly over
    # their copies instead of favoring the newest one. Received-attention
    # history then stays on every copy a future query could reach.
    match_dims = np.r_[half // 2 + 1:half, half + half // 2 + 1:d]
    m_match = match_dims.size
    # The slow band left out of matching turns monotonically (under pi
    # across max_positions), so a fixed query bias against it grades match
    # logits by entry age. The oldest copy of a context then wins every
    # match outright, no matter when the query happens, and the age that
    # decided the win is itself readable from the stored key's phase.
    anti_dim = half // 2
    anti_freq = float(_ROPE_BASE) ** (-anti_dim / half)
    anti_span = np.cos(_AGE_PHASE) - np.cos(
        config.max_positions * anti_freq + _AGE_PHASE)
    w_pos = _band_vector(root.derive("carrier-phase"), d, carrier_bands)

    rho = float(np.hypot(_EMB_CONTENT, _EMB_SHARED))  # residual RMS estimate
    layer_list = []
    for li in range(config.layers):
        wq = normals((hd, qd), "wq", li) / np.sqrt(hd)
        wk = normals((hd, kd), "wk", li) / np.sqrt(hd)
        wv = normals((hd, kd), "wv", li) / np.sqrt(hd)
        wo = normals((qd, hd), "wo", li) * (_NOISE_OUT / np.sqrt(d))
        if li == 0:
            # Head 0 of kv-head 0: attend to t-1, publish that token's code.
            # Keys also carry the resident token's code on the slow bands,
            # so how much mix-head traffic a key attracts is a stable
            # property of its token rather than of the query draw.
            carrier_gain = rho / (_EMB_SHARED * hd)
            live_mask = np.zeros(d)
            live_mask[live_dims] = 1.0
            wk[:, :d] = (np.outer(u0, w_pos) * carrier_gain
                         + code_key * live_mask * _K0_CODE)
            wq[:, :d] = np.outer(u0, _rotate_by_offset(w_pos, -1)) * (
                carrier_gain * _PREV_GAIN * np.sqrt(d))
            wv[:, :d] = code_key
            wo[:d, :] = msg_map * (_MSG_SCALE * rho / _EMB_CONTENT)
            # The other heads of kv-head 0 blend codes from a few random
            # context positions into the same message. The blend is fixed
            # once written, and it varies between repeats of the same
            # content, so each cache entry carries a persistent identity
            # that both the match logits and the key vector reflect.
            for qh in range(1, g):
                wq[:, qh * d:(qh + 1) * d] = normals(
                    (hd, d), "mix-q", qh) * (_MIX_Q / np.sqrt(hd))
                wo[qh * d:(qh + 1) * d, :] = msg_map * (
                    _MSG_SCALE * _MIX_OUT * rho / (_EMB_CONTENT * max(g - 1, 1)))
            grow = _MSG_SCALE ** 2 * (
                1.0 + (_MIX_OUT * _MIX_VALUE_NORM) ** 2 / max(g - 1, 1)) + (
                config.q_heads - g) * _NOISE_OUT ** 2
        else:
            # Match heads: compare the current token's code against the
            # published messages, retrieve the follower's code.
            q_gain = _MATCH_GAIN * np.sqrt(d) * rho / (
                _EMB_CONTENT * m_match * code_var)
            k_gain = rho * d / (hd * _MSG_SCALE)
            v_gain = rho / (_EMB_CONTENT * np.sqrt(code_var))
            o_gain = _PRED_SCALE / (g * n_match)
            rho0 = float(np.hypot(_EMB_CONTENT, _EMB_SHARED))
            shared_read = 1.0 / (u_read0 * rho0 / rho)
            anti_q = -_AGE_BONUS * np.sqrt(d) / (anti_span * _AGE_K)
            for j in range(config.kv_heads):
                band = np.zeros((d, d))
                band[:, match_dims] = normals(
                    (d, m_match), "band", li, j) / np.sqrt(d)
                wk[:, j * d:(j + 1) * d] = (msg_map.T @ band) * k_gain
                wk[:, j * d + anti_dim] = u0 * (_AGE_K * shared_read)
                wv[:, j * d:(j + 1) * d] = code_val * v_gain
                q_pattern = (code_key @ band) * q_gain
                q_pattern[:, anti_dim] += u0 * (
                    anti_q * np.cos(_AGE_PHASE) * shared_read)
                q_pattern[:, anti_dim + half] += u0 * (
                    anti_q * np.sin(_AGE_PHASE) * shared_read)
                for qh in range(j * g, (j + 1) * g):
                    wq[:, qh * d:(qh + 1) * d] = q_pattern + normals(
                        (hd, d), "q-jitter", li, qh) * (_Q_JITTER / np.sqrt(hd))
                    wo[qh * d:(qh + 1) * d, :] = pred_map * o_gain
            grow = (_PRED_SCALE / (config.layers - 1)) ** 2
        layer_list.append(LayerParams(
            attn_gain=np.ones(hd),
            wq=wq, wk=wk, wv=wv, wo=wo,
            mlp_gain=np.ones(hd),
            w_up=normals((hd, 4 * hd), "w_up", li) / np.sqrt(hd),
            w_down=normals((4 * hd, hd), "w_down", li) * (
                _MLP_SCALE / (_SILU_RMS * np.sqrt(4 * hd))),
        ))
        rho = float(np.sqrt(rho ** 2 + grow + _MLP_SCALE ** 2))

    # Unembedding: broad Gaussian logits plus a read-out of the retrieved
    # prediction code. The read-out uses the flat content table so output
    # calibration does not inherit the loudness spread; cluster-mates of
    # the retrieved token share part of the boost, softening near misses.
    skill_cols = (eps_flat @ code_val) @ pred_map * (_SKILL_SCALE / code_var)
    unembed = normals((hd, vs), "unembed") * (_BASE_LOGITS / np.sqrt(hd))
    unembed += skill_cols.T
    return ModelParams(
        config=config,
        embedding=embedding,
        layer_params=tuple(layer_list),
        final_gain=np.ones(hd),
        unembed=unembed,
    )


# ---------------------------------------------------------------------------
# Shared building blocks.
# ---------------------------------------------------------------------------

def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)
    return (x / rms) * gain


def _silu(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def _rope_tables(positions: np.ndarray, head_dim: int):
    half = head_dim // 2
    inv_freq = _ROPE_BASE ** (-np.arange(half) / half)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Split-half rotation of [n, heads, D] by per-row phase tables [n, D/2]."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = cos[:, None, :], sin[:, None, :]
    return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


def _check_tokens(config: ModelConfig, tokens: np.ndarray):
    if tokens.size < 1:
        raise InvariantError("empty token sequence")
    if tokens.size > config.max_positions:
        raise InvariantError(
            f"sequence length {tokens.size} exceeds max_positions {config.max_positions}"
        )
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise InvariantError("token id outside the vocabulary")


def _qkv(layer: LayerParams, config: ModelConfig, h: np.ndarray,
         cos: np.ndarray, sin: np.ndarray):
    n = h.shape[0]
    a_in = _rmsnorm(h, layer.attn_gain)
    q = (a_in @ layer.wq).reshape(n, config.q_heads, config.head_dim)
    k = (a_in @ layer.wk).reshape(n, config.kv_heads, config.head_dim)
    v = (a_in @ layer.wv).reshape(n, config.kv_heads, config.head_dim)
    return _apply_rope(q, cos, sin), _apply_rope(k, cos, sin), v


def _finish_layer(layer: LayerParams, h: np.ndarray, attn_out: np.ndarray) -> np.ndarray:
    h = h + attn_out
    m_in = _rmsnorm(h, layer.mlp_gain)
    return h + _silu(m_in @ layer.w_up) @ layer.w_down


def _losses_from_logits(logits: np.ndarray, tokens: np.ndarray):
    """Next-token losses (length T-1) and per-position entropies (length T)."""
    probs = softmax_rows(logits)
    entropy = entropy_rows(probs)
    m = logits.max(axis=1)
    logz = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    t = tokens.size
    loss = (logz[: t - 1]
            - logits[np.arange(t - 1), tokens[1:]])
    return loss, entropy


# ---------------------------------------------------------------------------
# Full-sequence forward.
# ---------------------------------------------------------------------------

def forward_full(params: ModelParams, tokens, *, want_attention: bool = False,
                 attn_consumer=None, want_kv: bool = False) -> ForwardOutput:
    """Causal forward over the whole sequence with no eviction.

    `attn_consumer(layer_index, attn, keys, values)` receives each layer's
    [q_heads, T, T] attention (plus that layer's cached-format keys and
    values) as soon as it is computed, letting callers reduce layer by
    layer without ever holding all layers' matrices.
    """
    config = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(config, tokens)
    t = tokens.size
    g = config.group_size
    cos, sin = _rope_tables(np.arange(t), config.head_dim)

    h = params.embedding[tokens]
    attention = [] if want_attention else None
    all_keys = [] if want_kv else None
    all_values = [] if want_kv else None
    for li, layer in enumerate(params.layer_params):
        q, k, v = _qkv(layer, config, h, cos, sin)
        outs = np.empty((t, config.q_heads, config.head_dim))
        layer_attn = (np.empty((config.q_heads, t, t))
                      if (want_attention or attn_consumer is not None) else None)
        for j in range(config.kv_heads):
            probs, out = backend.attend_group_chunk(
                q[:, j * g:(j + 1) * g, :], k[:, j, :], v[:, j, :], 0)
            outs[:, j * g:(j + 1) * g, :] = out
            if layer_attn is not None:
                layer_attn[j * g:(j + 1) * g] = probs
        if attn_consumer is not None:
            attn_consumer(li, layer_attn, k, v)
        if want_attention:
            attention.append(layer_attn)
        if want_kv:
            all_keys.append(k)
            all_values.append(v)
        h = _finish_layer(layer, h, outs.reshape(t, -1) @ layer.wo)

    logits = _rmsnorm(h, params.final_gain) @ params.unembed
    loss, entropy = _losses_from_logits(logits, tokens)
    return ForwardOutput(logits=logits, loss=loss, entropy=entropy,
                         attention=attention, keys=all_keys, values=all_values)


# ---------------------------------------------------------------------------
# Chunked decoding against eviction-managed caches.
# ---------------------------------------------------------------------------

class CacheState:
    """One sequence's KV state: a GroupCache per (layer, kv_head)."""

    __slots__ = ("config", "caches")

    def __init__(self, config: ModelConfig, window_span: int = 32):
        self.config = config
        self.caches = [
            [GroupCache(config.group_size, config.head_dim, window_span)
             for _ in range(config.kv_heads)]
            for _ in range(config.layers)
        ]

    def group(self, layer: int, kv_head: int) -> GroupCache:
        return self.caches[layer][kv_head]

    def all_groups(self):
        for layer_caches in self.caches:
            yield from layer_caches

    def size(self) -> int:
        """Common entry count; caches advance in lockstep by construction."""
        sizes = {len(c) for c in self.all_groups()}
        if len(sizes) != 1:
            raise InvariantError(f"group caches out of lockstep: sizes {sorted(sizes)}")
        return sizes.pop()


def forward_chunk_with_cache(params: ModelParams, state: CacheState, tokens,
                             positions, *, update_accumulators: bool = True):
    """Decode a chunk of tokens against the retained caches.

    Appends the chunk's K/V to every group cache, attends over retained +
    in-chunk-causal entries, and (by default) folds the chunk's attention
    into the accumulators: one call = one accumulator chunk.

    Returns (logits [n, vocab], per-layer attention rows [q_heads, n, ncols]).
    """
    config = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    _check_tokens(config, tokens)
    if positions.shape != tokens.shape:
        raise InvariantError("tokens and positions must align")
    if positions.max() >= config.max_positions:
        raise InvariantError("position beyond max_positions")
    n = tokens.size
    g = config.group_size
    cos, sin = _rope_tables(positions, config.head_dim)

    h = params.embedding[tokens]
    attn_rows = []
    for li, layer in enumerate(params.layer_params):
        q, k, v = _qkv(layer, config, h, cos, sin)
        outs = np.empty((n, config.q_heads, config.head_dim))
        layer_rows = None
        for j in range(config.kv_heads):
            cache = state.group(li, j)
            n_prior = len(cache)
            cache.append_block(k[:, j, :], v[:, j, :], positions)
            probs, out = backend.attend_group_chunk(
                q[:, j * g:(j + 1) * g, :], cache.keys, cache.values, n_prior)
            outs[:, j * g:(j + 1) * g, :] = out
            if update_accumulators:
                cache.update_accumulators(probs)
            if layer_rows is None:
                layer_rows = np.empty((config.q_heads, n, probs.shape[2]))
            layer_rows[j * g:(j + 1) * g] = probs
        attn_rows.append(layer_rows)
        h = _finish_layer(layer, h, outs.reshape(n, -1) @ layer.wo)

    logits = _rmsnorm(h, params.final_gain) @ params.unembed
    return logits, attn_rows


def forward_step_with_cache(params: ModelParams, state: CacheState, token: int,
                            position: int):
    """Single-token decode: a chunk of one.

    Returns (logits vector [vocab], per-layer attention row [q_heads, ncols]).
    """
    logits, attn_rows = forward_chunk_with_cache(
        params, state, np.array([token]), np.array([position]))
    return logits[0], [rows[:, 0, :] for rows in attn_rows]


# ---------------------------------------------------------------------------
# Checkpoint container.
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"KVLM"
_MODEL_VERSION = 1


def _config_words(config: ModelConfig):
    return (config.vocab_size, config.layers, config.q_heads, config.kv_heads,
            config.head_dim, config.hidden_dim, config.max_positions,
            config.dtype_bytes)


def _param_tensors(params: ModelParams):
    yield params.embedding
    for layer in params.layer_params:
        yield layer.attn_gain
        yield layer.wq
        yield layer.wk
        yield layer.wv
        yield layer.wo
        yield layer.mlp_gain
        yield layer.w_up
        yield layer.w_down
    yield params.final_gain
    yield params.unembed


def _tensor_shapes(config: ModelConfig):
    hd = config.hidden_dim
    qd = config.q_heads * config.head_dim
    kd = config.kv_heads * config.head_dim
    yield (config.vocab_size, hd)
    for _ in range(config.layers):
        yield (hd,)
        yield (hd, qd)
        yield (hd, kd)
        yield (hd, kd)
        yield (qd, hd)
        yield (hd,)
        yield (hd, 4 * hd)
        yield (4 * hd, hd)
    yield (hd,)
    yield (hd, config.vocab_size)


def save_model_checkpoint(path: str, params: ModelParams):
    """Binary container: magic, u32 version, 8 u32 config words, then all
    tensors as row-major little-endian float64 in declared order."""
    header = _MODEL_MAGIC + np.array(
        [_MODEL_VERSION, *_config_words(params.config)], dtype="<u4").tobytes()
    body = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes()
                    for t in _param_tensors(params))
    atomic_write_bytes(path, header + body)


def load_model_checkpoint(path: str) -> ModelParams:
    raw = read_bytes(path)
    if raw[:4] != _MODEL_MAGIC:
        raise InvariantError(f"{path}: not a model checkpoint")
    words = np.frombuffer(raw[4:40], dtype="<u4")
    if words[0] != _MODEL_VERSION:
        raise InvariantError(f"{path}: unsupported checkpoint version {words[0]}")
    config = ModelConfig(*(int(w) for w in words[1:9]))
    flat = np.frombuffer(raw[40:], dtype="<f8")

    offset = 0
    loaded = []
    for shape in _tensor_shapes(config):
        n = int(np.prod(shape))
        if offset + n > flat.size:
            raise InvariantError(f"{path}: truncated checkpoint")
        loaded.append(flat[offset:offset + n].reshape(shape).copy())
        offset += n
    if offset != flat.size:
        raise InvariantError(f"{path}: trailing bytes in checkpoint")

    it = iter(loaded)
    embedding = next(it)
    layer_list = []
    for _ in range(config.layers):
        layer_list.append(LayerParams(*(next(it) for _ in range(8))))
    return ModelParams(config=config, embedding=embedding,
                       layer_params=tuple(layer_list),
                       final_gain=next(it), unembed=next(it))
