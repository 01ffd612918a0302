"""M-FALCON: score many candidates against one user history.

Candidates are appended after the user's ``n`` tokens and processed in
microbatches of ``b_m``. Within a microbatch a modified causal mask stops
candidates from attending to each other, so ``b_m`` candidates cost one
forward pass of ``n + b_m`` tokens. Every candidate sits at position ``n``
with the request timestamp, so all candidates see identical bias rows.
Pointwise attention divides every candidate row by ``n + 1``, which keeps
outputs independent of ``b_m``.

After the first microbatch the per-layer keys and values of the ``n`` prefix
tokens are cached; later microbatches project only their own tokens and
attend to the cached prefix plus themselves. Caches can also be kept per
user across requests and extended when the history grows.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import grad_tape as gt
from . import numeric_core as nc
from .hstu_encoder import (
    FlopCounter,
    HstuConfig,
    HstuLayerParams,
    LayerKV,
    candidate_n_norm,
    causal_mask,
    compute_rab,
    encode_sequence,
    gated_output,
    merge_heads,
    pointwise_attention,
    pointwise_projection,
    resolve_n_norm,
    softmax_attention,
    split_heads,
)
from .recommender_model import GenerativeRecommender
from .sequence_pipeline import TokenKind, TokenSequence
from .session_cache import CacheOutcome, SessionCacheStore
from .utils.exceptions import ConfigurationError, ServingError

logger = logging.getLogger(__name__)

CACHE_MODES = ("off", "request", "session")


@dataclass
class ServingConfig:
    microbatch_size: int = 16
    cache_mode: str = "request"
    session_ttl_seconds: float = 1800.0
    max_sessions: int = 1024

    def __post_init__(self) -> None:
        if self.microbatch_size < 1:
            raise ConfigurationError(f"serving.microbatch_size must be >= 1, got {self.microbatch_size}")
        if self.cache_mode not in CACHE_MODES:
            raise ConfigurationError(f"Invalid cache mode '{self.cache_mode}'. Valid: {CACHE_MODES}")

    @classmethod
    def from_dict(cls, data: Dict) -> "ServingConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown serving config keys: {sorted(unknown)}")
        return cls(**data)


def build_mfalcon_mask(n: int, microbatch_size: int) -> np.ndarray:
    """Causal allow-mask of size ``n + b_m`` where candidates see only the prefix and themselves."""
    if n < 0 or microbatch_size < 1:
        raise ServingError(f"Invalid M-FALCON mask shape: n={n}, b_m={microbatch_size}")
    allow = causal_mask(n + microbatch_size)
    allow[n:, n:] = np.eye(microbatch_size, dtype=bool)
    return allow


def _prefix_digest(seq: TokenSequence, length: int) -> str:
    digest = hashlib.sha256()
    for i in range(length):
        digest.update(
            f"{seq.token_ids[i]}:{seq.kinds[i].value}:{seq.timestamps[i]}:{seq.actions[i]};".encode()
        )
    return digest.hexdigest()


@dataclass
class KVCache:
    """Per-layer keys and values of the first ``prefix_len`` tokens of a sequence."""

    layers: List[LayerKV]
    positions: np.ndarray
    timestamps: np.ndarray
    prefix_hash: str

    @property
    def prefix_len(self) -> int:
        return int(self.positions.size)

    def matches(self, seq: TokenSequence) -> bool:
        return len(seq) >= self.prefix_len and _prefix_digest(seq, self.prefix_len) == self.prefix_hash


@dataclass
class ScoreRequest:
    """A user history and the candidates to score against it."""

    sequence: TokenSequence
    candidates: Sequence[int]
    microbatch_size: int = 16
    cache_mode: str = "request"
    request_timestamp: Optional[int] = None
    user_id: Optional[int] = None

    def __post_init__(self) -> None:
        if len(self.candidates) == 0:
            raise ServingError("Scoring request has no candidates")
        if self.microbatch_size < 1:
            raise ServingError(f"microbatch_size must be >= 1, got {self.microbatch_size}")
        if self.cache_mode not in CACHE_MODES:
            raise ServingError(f"Invalid cache mode '{self.cache_mode}'. Valid: {CACHE_MODES}")
        if self.cache_mode == "session" and self.resolved_user_id is None:
            raise ServingError("Session caching needs a user id")

    @property
    def resolved_user_id(self) -> Optional[int]:
        return self.user_id if self.user_id is not None else self.sequence.user_id

    @property
    def candidate_timestamp(self) -> int:
        if self.request_timestamp is not None:
            return int(self.request_timestamp)
        return int(self.sequence.timestamps[-1]) if len(self.sequence) else 0


@dataclass
class ScoreResult:
    """Per-candidate encoder outputs and predictions, in request order."""

    candidates: List[int]
    hidden: np.ndarray
    predictions: np.ndarray
    microbatches: int = 0
    cache_outcome: Optional[CacheOutcome] = None
    flops: Dict[str, int] = field(default_factory=dict)

    @property
    def recomputed(self) -> bool:
        return self.cache_outcome is CacheOutcome.RECOMPUTED

    def to_rows(self) -> List[Dict]:
        return [
            {"candidate": int(c), "probabilities": [float(p) for p in np.atleast_1d(row)]}
            for c, row in zip(self.candidates, self.predictions)
        ]


def _candidate_sequence(candidates: Sequence[int], timestamp: int) -> TokenSequence:
    seq = TokenSequence(task="ranking")
    for item in candidates:
        seq.append(item, TokenKind.CONTENT, timestamp, None)
    return seq


def _cacheable(config: HstuConfig) -> bool:
    return config.architecture == "hstu"


def _attend_with_cache(
    x_new: gt.Tensor,
    layer: LayerKV,
    params: HstuLayerParams,
    config: HstuConfig,
    cache_positions: np.ndarray,
    cache_timestamps: np.ndarray,
    new_positions: np.ndarray,
    new_timestamps: np.ndarray,
    candidates: bool,
    counter: Optional[FlopCounter],
) -> Tuple[gt.Tensor, LayerKV]:
    """One HSTU layer for new tokens that see the cached prefix.

    With ``candidates`` each new token also sees only itself; otherwise the
    new tokens are causal among themselves (history extension).
    """
    h = config.num_heads
    n = cache_positions.size
    b = x_new.shape[0]
    proj = pointwise_projection(x_new, params, config, counter)
    q = split_heads(proj.q, h)
    k = split_heads(proj.k, h)
    v = split_heads(proj.v, h)
    new_kv = LayerKV(k=k.value.copy(), v=v.value.copy())

    if candidates:
        # prefix block plus a diagonal self term, so cost is b * (n + 1)
        qk_scale = 1.0 / np.sqrt(config.d_qk) if config.attention == "softmax" else 1.0
        scores_prefix = np.matmul(q.value, np.swapaxes(layer.k, 1, 2)) * qk_scale
        scores_self = np.sum(q.value * k.value, axis=-1, keepdims=True) * qk_scale
        rab_prefix = compute_rab(new_positions, new_timestamps, params, config, cache_positions, cache_timestamps)
        if rab_prefix is not None:
            rab_self = compute_rab(new_positions[:1], new_timestamps[:1], params, config)
            scores_prefix = scores_prefix + rab_prefix.value
            scores_self = scores_self + rab_self.value.reshape(1, 1, 1)
        if counter is not None:
            counter.attention += 2 * h * b * (n + 1) * (config.d_qk + config.d_v)
        if config.attention == "softmax":
            weights = nc.softmax_rows(np.concatenate([scores_prefix, scores_self], axis=-1))
            w_prefix, w_self = weights[..., :n], weights[..., n:]
        else:
            # each candidate sees the prefix plus itself
            w_prefix = nc.silu(scores_prefix) / (n + 1)
            w_self = nc.silu(scores_self) / (n + 1)
        pooled_heads = np.matmul(w_prefix, layer.v) + w_self * v.value
        pooled = merge_heads(gt.Tensor(pooled_heads))
    else:
        keys = gt.concat([gt.Tensor(layer.k), k], axis=1)
        values = gt.concat([gt.Tensor(layer.v), v], axis=1)
        allow = np.concatenate([np.ones((b, n), dtype=bool), causal_mask(b)], axis=1)
        rab = compute_rab(
            new_positions,
            new_timestamps,
            params,
            config,
            np.concatenate([cache_positions, new_positions]),
            np.concatenate([cache_timestamps, new_timestamps]),
        )
        if config.attention == "softmax":
            pooled = softmax_attention(q, keys, values, rab, allow, counter)
        else:
            pooled = pointwise_attention(q, keys, values, rab, allow, resolve_n_norm(config, allow), counter)
    return gated_output(x_new, pooled, proj.u, params, config, counter), new_kv


def build_kv_cache(
    model: GenerativeRecommender, seq: TokenSequence, counter: Optional[FlopCounter] = None
) -> KVCache:
    """Run the history causally and keep every layer's keys and values."""
    n = len(seq)
    kv: List[LayerKV] = []
    positions = np.arange(n, dtype=np.int64)
    timestamps = np.asarray(seq.timestamps, dtype=np.int64)
    if n:
        encode_sequence(model.embed(seq), model.layers, model.config.encoder, causal_mask(n), timestamps, positions, counter, kv)
    else:
        cfg = model.config.encoder
        kv = [
            LayerKV(np.zeros((cfg.num_heads, 0, cfg.d_qk)), np.zeros((cfg.num_heads, 0, cfg.d_v)))
            for _ in model.layers
        ]
    return KVCache(layers=kv, positions=positions, timestamps=timestamps, prefix_hash=_prefix_digest(seq, n))


def extend_kv_cache(
    model: GenerativeRecommender, cache: KVCache, seq: TokenSequence, counter: Optional[FlopCounter] = None
) -> KVCache:
    """Append the tokens of ``seq`` beyond ``cache.prefix_len`` to the cache."""
    n = cache.prefix_len
    k = len(seq) - n
    if k <= 0:
        return cache
    config = model.config.encoder
    new_positions = np.arange(n, n + k, dtype=np.int64)
    new_timestamps = np.asarray(seq.timestamps[n:], dtype=np.int64)
    x = gt.index_rows(model.embed(seq), new_positions)
    layers = []
    for params, layer in zip(model.layers, cache.layers):
        x, new_kv = _attend_with_cache(
            x, layer, params, config, cache.positions, cache.timestamps, new_positions, new_timestamps, False, counter
        )
        layers.append(LayerKV(k=np.concatenate([layer.k, new_kv.k], axis=1), v=np.concatenate([layer.v, new_kv.v], axis=1)))
    return KVCache(
        layers=layers,
        positions=np.concatenate([cache.positions, new_positions]),
        timestamps=np.concatenate([cache.timestamps, new_timestamps]),
        prefix_hash=_prefix_digest(seq, len(seq)),
    )


def invalidate_or_reuse_cache(
    model: GenerativeRecommender,
    cache: Optional[KVCache],
    seq: TokenSequence,
    counter: Optional[FlopCounter] = None,
) -> Tuple[KVCache, CacheOutcome]:
    """Bring a session cache up to date with ``seq``.

    Same history: reuse untouched. Grown history: extend with the new tokens.
    Edited or shorter history: recompute from scratch.
    """
    if cache is None:
        return build_kv_cache(model, seq, counter), CacheOutcome.CREATED
    if cache.matches(seq):
        if len(seq) == cache.prefix_len:
            return cache, CacheOutcome.REUSED
        return extend_kv_cache(model, cache, seq, counter), CacheOutcome.EXTENDED
    logger.info(f"History changed under a cached prefix of {cache.prefix_len} tokens; recomputing")
    return build_kv_cache(model, seq, counter), CacheOutcome.RECOMPUTED


def _cached_candidates(
    model: GenerativeRecommender,
    cache: KVCache,
    block: gt.Tensor,
    timestamp: int,
    counter: Optional[FlopCounter],
) -> gt.Tensor:
    config = model.config.encoder
    b = block.shape[0]
    positions = np.full(b, cache.prefix_len, dtype=np.int64)
    timestamps = np.full(b, timestamp, dtype=np.int64)
    x = block
    for params, layer in zip(model.layers, cache.layers):
        x, _ = _attend_with_cache(
            x, layer, params, config, cache.positions, cache.timestamps, positions, timestamps, True, counter
        )
    return x


def _full_microbatch(
    model: GenerativeRecommender,
    prefix: gt.Tensor,
    block: gt.Tensor,
    seq: TokenSequence,
    timestamp: int,
    counter: Optional[FlopCounter],
    kv_out: Optional[List[LayerKV]],
) -> gt.Tensor:
    n = prefix.shape[0]
    b = block.shape[0]
    x = gt.concat([prefix, block], axis=0)
    positions = np.concatenate([np.arange(n), np.full(b, n)]).astype(np.int64)
    timestamps = np.concatenate([np.asarray(seq.timestamps, dtype=np.int64), np.full(b, timestamp)]).astype(np.int64)
    mask = build_mfalcon_mask(n, b)
    config = model.config.encoder
    n_norm = candidate_n_norm(config, mask, n)
    y = encode_sequence(x, model.layers, config, mask, timestamps, positions, counter, kv_out, n_norm)
    return gt.index_rows(y, np.arange(n, n + b))


def _predictions(model: GenerativeRecommender, hidden: np.ndarray, candidates: Sequence[int]) -> np.ndarray:
    if model.config.task == "ranking":
        return model.ranking_probabilities(hidden)
    # retrieval-style models: target-aware affinity of each candidate with its own output
    rows = model.item_table.row_indices(candidates)
    affinity = np.sum(hidden * model.item_table.weights.value[rows], axis=1, keepdims=True)
    return nc.sigmoid(affinity)


def mfalcon_score(
    request: ScoreRequest,
    model: GenerativeRecommender,
    session_store: Optional[SessionCacheStore] = None,
    counter: Optional[FlopCounter] = None,
) -> ScoreResult:
    """Score every candidate of ``request`` with microbatched, cached attention."""
    seq = request.sequence
    n = len(seq)
    m = len(request.candidates)
    b_m = request.microbatch_size
    config = model.config.encoder
    if n + 1 > config.max_seq_len and config.norm_mode == "max_seq_len":
        logger.warning(f"History of {n} tokens exceeds max_seq_len {config.max_seq_len}")
    timestamp = request.candidate_timestamp
    use_cache = request.cache_mode != "off" and _cacheable(config)
    if request.cache_mode != "off" and not use_cache:
        logger.debug(f"{config.architecture} layers have no cached path; every microbatch runs in full")

    prefix = model.embed(seq)
    cand_emb = model.embed(_candidate_sequence(request.candidates, timestamp), positions=[n] * m)

    cache: Optional[KVCache] = None
    outcome: Optional[CacheOutcome] = None
    if use_cache and request.cache_mode == "session":
        store = session_store if session_store is not None else SessionCacheStore()
        with store.checkout(int(request.resolved_user_id)) as entry:
            cache, outcome = invalidate_or_reuse_cache(model, entry.cache, seq, counter)
            entry.cache = cache
            entry.last_outcome = outcome

    outputs = []
    microbatches = 0
    for start in range(0, m, b_m):
        block = gt.index_rows(cand_emb, np.arange(start, min(start + b_m, m)))
        if cache is not None:
            outputs.append(_cached_candidates(model, cache, block, timestamp, counter))
        else:
            kv: Optional[List[LayerKV]] = [] if use_cache else None
            outputs.append(_full_microbatch(model, prefix, block, seq, timestamp, counter, kv))
            if use_cache:
                cache = KVCache(
                    layers=[LayerKV(k=layer.k[:, :n].copy(), v=layer.v[:, :n].copy()) for layer in kv],
                    positions=np.arange(n, dtype=np.int64),
                    timestamps=np.asarray(seq.timestamps, dtype=np.int64),
                    prefix_hash=_prefix_digest(seq, n),
                )
        microbatches += 1

    hidden = gt.concat(outputs, axis=0).value
    result = ScoreResult(
        candidates=[int(c) for c in request.candidates],
        hidden=hidden,
        predictions=_predictions(model, hidden, request.candidates),
        microbatches=microbatches,
        cache_outcome=outcome,
        flops=counter.as_dict() if counter is not None else {},
    )
    logger.debug(f"Scored {m} candidates in {microbatches} microbatches (n={n}, b_m={b_m})")
    return result


def naive_score(
    request: ScoreRequest, model: GenerativeRecommender, counter: Optional[FlopCounter] = None
) -> ScoreResult:
    """Reference scoring: one causal pass of ``n + 1`` tokens per candidate."""
    seq = request.sequence
    n = len(seq)
    config = model.config.encoder
    timestamp = request.candidate_timestamp
    prefix = model.embed(seq)
    rows = []
    for item in request.candidates:
        candidate = model.embed(_candidate_sequence([item], timestamp), positions=[n])
        x = gt.concat([prefix, candidate], axis=0)
        timestamps = np.concatenate([np.asarray(seq.timestamps, dtype=np.int64), [timestamp]]).astype(np.int64)
        allow = causal_mask(n + 1)
        n_norm = candidate_n_norm(config, allow, n)
        y = encode_sequence(x, model.layers, config, allow, timestamps, np.arange(n + 1), counter, n_norm=n_norm)
        rows.append(y.value[n])
    hidden = np.vstack(rows)
    return ScoreResult(
        candidates=[int(c) for c in request.candidates],
        hidden=hidden,
        predictions=_predictions(model, hidden, request.candidates),
        microbatches=len(rows),
        flops=counter.as_dict() if counter is not None else {},
    )
