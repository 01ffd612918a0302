"""HSTU layer stack over ragged batches, plus softmax and Transformer baselines.

One HSTU layer computes, per sequence ``X`` (n x d)::

    U, V, Q, K = Split(SiLU(X W1 + b1))
    A V        = SiLU(Q K^T + rab) V / n_norm      (per head, masked)
    Y          = X + (LayerNorm(A V) * U) W2 + b2

The column order of ``X W1`` is ``U | V | Q | K`` with every head contiguous.
The relative attention bias is shared by all heads.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import grad_tape as gt
from . import numeric_core as nc
from .utils.exceptions import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

ARCHITECTURES = ("hstu", "transformer")
ATTENTION_KINDS = ("pointwise", "softmax")
NORM_MODES = ("max_seq_len", "valid_count", "none")
MASK_KINDS = ("causal", "mfalcon", "explicit")


@dataclass
class HstuConfig:
    """Hyperparameters of an encoder stack."""

    d_model: int = 64
    num_heads: int = 2
    d_qk: int = 32
    d_v: int = 32
    num_layers: int = 2
    max_seq_len: int = 128
    eps: float = 1e-6
    architecture: str = "hstu"
    attention: str = "pointwise"
    norm_mode: str = "max_seq_len"
    num_position_buckets: int = 128
    num_time_buckets: int = 32
    rab_positional: bool = True
    rab_temporal: bool = True
    d_ff: Optional[int] = None
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        counts = {
            "d_model": self.d_model,
            "num_heads": self.num_heads,
            "d_qk": self.d_qk,
            "d_v": self.d_v,
            "max_seq_len": self.max_seq_len,
            "num_position_buckets": self.num_position_buckets,
            "num_time_buckets": self.num_time_buckets,
            "d_ff": self.d_ff,
        }
        for name, value in counts.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"HstuConfig.{name} must be an integer >= 1, got {value}")
        if self.num_layers < 0:
            raise ConfigurationError(f"HstuConfig.num_layers must be >= 0, got {self.num_layers}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(
                f"Invalid architecture '{self.architecture}'. Valid: {ARCHITECTURES}"
            )
        if self.attention not in ATTENTION_KINDS:
            raise ConfigurationError(
                f"Invalid attention '{self.attention}'. Valid: {ATTENTION_KINDS}"
            )
        if self.norm_mode not in NORM_MODES:
            raise ConfigurationError(f"Invalid norm_mode '{self.norm_mode}'. Valid: {NORM_MODES}")
        if self.eps < 0:
            raise ConfigurationError("HstuConfig.eps cannot be negative")

    @property
    def projection_width(self) -> int:
        """Columns of ``X W1``: 2h*d_v + 2h*d_qk."""
        return 2 * self.num_heads * self.d_v + 2 * self.num_heads * self.d_qk

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HstuConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown encoder config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class JaggedBatch:
    """Variable-length sequences flattened along the token axis.

    Sequence ``i`` owns tokens ``offsets[i]:offsets[i+1]``. ``positions``
    overrides the per-token position used by the positional bias; by default
    positions count from 0 inside each sequence.
    """

    offsets: np.ndarray
    tokens: gt.Tensor
    timestamps: np.ndarray
    positions: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.offsets.ndim != 1 or self.offsets.size < 1 or self.offsets[0] != 0:
            raise ShapeError("JaggedBatch offsets must be a 1-D array starting at 0")
        if np.any(np.diff(self.offsets) < 0):
            raise ShapeError("JaggedBatch offsets must be nondecreasing")
        total = self.tokens.shape[0]
        if self.offsets[-1] != total:
            raise ShapeError(f"offsets[-1]={self.offsets[-1]} but batch holds {total} tokens")
        if self.timestamps.shape[0] != total:
            raise ShapeError(f"{self.timestamps.shape[0]} timestamps for {total} tokens")
        if self.positions is None:
            self.positions = np.concatenate(
                [np.arange(n, dtype=np.int64) for n in self.lengths] or [np.zeros(0, np.int64)]
            )
        else:
            self.positions = np.asarray(self.positions, dtype=np.int64)

    @property
    def num_sequences(self) -> int:
        return int(self.offsets.size - 1)

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def max_length(self) -> int:
        return int(self.lengths.max()) if self.num_sequences else 0

    def bounds(self, index: int) -> Tuple[int, int]:
        return int(self.offsets[index]), int(self.offsets[index + 1])

    @classmethod
    def from_sequences(
        cls,
        tokens: Sequence[gt.Tensor],
        timestamps: Sequence[Sequence[int]],
        positions: Optional[Sequence[Sequence[int]]] = None,
    ) -> "JaggedBatch":
        if len(tokens) != len(timestamps):
            raise ShapeError(f"{len(tokens)} token blocks but {len(timestamps)} timestamp lists")
        lengths = [t.shape[0] for t in tokens]
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        flat = gt.concat(list(tokens), axis=0) if tokens else gt.Tensor(np.zeros((0, 0)))
        ts = np.concatenate([np.asarray(t, dtype=np.int64) for t in timestamps]) if tokens else np.zeros(0)
        pos = None
        if positions is not None:
            pos = np.concatenate([np.asarray(p, dtype=np.int64) for p in positions])
        return cls(offsets=offsets, tokens=flat, timestamps=ts, positions=pos)


@dataclass
class AttentionMask:
    """Which (query, key) pairs may attend; realized lazily per sequence."""

    kind: str = "causal"
    prefix_len: int = 0
    microbatch_size: int = 1
    matrix: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.kind not in MASK_KINDS:
            raise ConfigurationError(f"Invalid mask kind '{self.kind}'. Valid: {MASK_KINDS}")
        if self.kind == "explicit" and self.matrix is None:
            raise ConfigurationError("Explicit attention mask needs a matrix")

    def realize(self, length: int) -> np.ndarray:
        if self.kind == "causal":
            return causal_mask(length)
        if self.kind == "mfalcon":
            from .mfalcon_serving import build_mfalcon_mask

            allow = build_mfalcon_mask(self.prefix_len, self.microbatch_size)
            if allow.shape[0] != length:
                raise ShapeError(
                    f"M-FALCON mask covers {allow.shape[0]} tokens, sequence has {length}"
                )
            return allow
        matrix = np.asarray(self.matrix, dtype=bool)
        if matrix.shape != (length, length):
            raise ShapeError(f"Explicit mask shape {matrix.shape} for sequence length {length}")
        return matrix


def causal_mask(length: int) -> np.ndarray:
    """Lower-triangular allow-mask including the diagonal."""
    return np.tril(np.ones((length, length), dtype=bool))


class FlopCounter:
    """Counts multiply-add flops (2 per MAC) split into attention and projection."""

    def __init__(self) -> None:
        self.attention = 0
        self.projection = 0

    @property
    def total(self) -> int:
        return self.attention + self.projection

    def add_matmul(self, rows: int, inner: int, cols: int, kind: str = "projection") -> None:
        flops = 2 * rows * inner * cols
        if kind == "attention":
            self.attention += flops
        else:
            self.projection += flops

    def add_attention(self, heads: int, n_q: int, n_k: int, d_qk: int, d_v: int) -> None:
        """Dense score and pooling flops for ``heads`` heads of ``n_q x n_k``."""
        self.attention += 2 * heads * n_q * n_k * (d_qk + d_v)

    def as_dict(self) -> Dict[str, int]:
        return {"attention": self.attention, "projection": self.projection, "total": self.total}


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out)).astype(nc.get_dtype())


def _param(value: np.ndarray, name: str) -> gt.Tensor:
    return gt.Tensor(np.asarray(value, dtype=nc.get_dtype()), requires_grad=True, name=name)


@dataclass
class HstuLayerParams:
    """Learnable weights of one HSTU layer."""

    w1: gt.Tensor
    b1: gt.Tensor
    w2: gt.Tensor
    b2: gt.Tensor
    rab_pos: gt.Tensor
    rab_time: gt.Tensor

    @classmethod
    def initialize(cls, config: HstuConfig, rng: np.random.Generator, prefix: str = "hstu") -> "HstuLayerParams":
        d, width, hv = config.d_model, config.projection_width, config.num_heads * config.d_v
        return cls(
            w1=_param(_xavier(rng, d, width), f"{prefix}.w1"),
            b1=_param(np.zeros(width), f"{prefix}.b1"),
            w2=_param(_xavier(rng, hv, d), f"{prefix}.w2"),
            b2=_param(np.zeros(d), f"{prefix}.b2"),
            rab_pos=_param(np.zeros(2 * config.num_position_buckets - 1), f"{prefix}.rab_pos"),
            rab_time=_param(np.zeros(config.num_time_buckets), f"{prefix}.rab_time"),
        )

    def named_tensors(self) -> List[Tuple[str, gt.Tensor]]:
        return [
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
            ("rab_pos", self.rab_pos),
            ("rab_time", self.rab_time),
        ]


@dataclass
class TransformerLayerParams:
    """Pre-norm Transformer block weights: fused qkv, output projection, FFN."""

    w_qkv: gt.Tensor
    b_qkv: gt.Tensor
    w_o: gt.Tensor
    b_o: gt.Tensor
    w_ff1: gt.Tensor
    b_ff1: gt.Tensor
    w_ff2: gt.Tensor
    b_ff2: gt.Tensor

    @classmethod
    def initialize(
        cls, config: HstuConfig, rng: np.random.Generator, prefix: str = "transformer"
    ) -> "TransformerLayerParams":
        d, h = config.d_model, config.num_heads
        qkv = 2 * h * config.d_qk + h * config.d_v
        return cls(
            w_qkv=_param(_xavier(rng, d, qkv), f"{prefix}.w_qkv"),
            b_qkv=_param(np.zeros(qkv), f"{prefix}.b_qkv"),
            w_o=_param(_xavier(rng, h * config.d_v, d), f"{prefix}.w_o"),
            b_o=_param(np.zeros(d), f"{prefix}.b_o"),
            w_ff1=_param(_xavier(rng, d, config.d_ff), f"{prefix}.w_ff1"),
            b_ff1=_param(np.zeros(config.d_ff), f"{prefix}.b_ff1"),
            w_ff2=_param(_xavier(rng, config.d_ff, d), f"{prefix}.w_ff2"),
            b_ff2=_param(np.zeros(d), f"{prefix}.b_ff2"),
        )

    def named_tensors(self) -> List[Tuple[str, gt.Tensor]]:
        return [
            ("w_qkv", self.w_qkv),
            ("b_qkv", self.b_qkv),
            ("w_o", self.w_o),
            ("b_o", self.b_o),
            ("w_ff1", self.w_ff1),
            ("b_ff1", self.b_ff1),
            ("w_ff2", self.w_ff2),
            ("b_ff2", self.b_ff2),
        ]


LayerParams = Union[HstuLayerParams, TransformerLayerParams]


def initialize_layers(config: HstuConfig, rng: Optional[np.random.Generator] = None) -> List[LayerParams]:
    """Fresh parameters for every layer of ``config``."""
    rng = rng or np.random.default_rng(config.init_seed)
    if config.architecture == "transformer":
        return [
            TransformerLayerParams.initialize(config, rng, prefix=f"layer{i}")
            for i in range(config.num_layers)
        ]
    return [HstuLayerParams.initialize(config, rng, prefix=f"layer{i}") for i in range(config.num_layers)]


# ------------------------------------------------------------------ blocks


@dataclass
class Projections:
    """Outputs of the pointwise projection, flat over heads."""

    u: gt.Tensor
    v: gt.Tensor
    q: gt.Tensor
    k: gt.Tensor


def pointwise_projection(
    x: gt.Tensor, params: HstuLayerParams, config: HstuConfig, counter: Optional[FlopCounter] = None
) -> Projections:
    """One matmul ``X W1 + b1``, SiLU on every column, split into U | V | Q | K."""
    if x.ndim != 2 or x.shape[1] != config.d_model:
        raise ShapeError(f"Projection input must be n x {config.d_model}, got {x.shape}")
    hv = config.num_heads * config.d_v
    hqk = config.num_heads * config.d_qk
    if counter is not None:
        counter.add_matmul(x.shape[0], config.d_model, config.projection_width)
    projected = gt.silu(gt.add(gt.matmul(x, params.w1), params.b1))
    return Projections(
        u=gt.slice_last(projected, 0, hv),
        v=gt.slice_last(projected, hv, 2 * hv),
        q=gt.slice_last(projected, 2 * hv, 2 * hv + hqk),
        k=gt.slice_last(projected, 2 * hv + hqk, 2 * hv + 2 * hqk),
    )


def split_heads(t: gt.Tensor, num_heads: int) -> gt.Tensor:
    """``n x (h*dh)`` -> ``h x n x dh``."""
    n, width = t.shape
    return gt.transpose(gt.reshape(t, (n, num_heads, width // num_heads)), (1, 0, 2))


def merge_heads(t: gt.Tensor) -> gt.Tensor:
    """``h x n x dh`` -> ``n x (h*dh)``."""
    h, n, dh = t.shape
    return gt.reshape(gt.transpose(t, (1, 0, 2)), (n, h * dh))


def temporal_bucket(delta: np.ndarray, num_buckets: int) -> np.ndarray:
    """floor(log2(delta)) clamped to the table, bucket 0 for delta <= 0."""
    delta = np.asarray(delta, dtype=np.int64)
    buckets = np.floor(np.log2(np.maximum(delta, 1).astype(np.float64))).astype(np.int64)
    buckets = np.where(delta <= 0, 0, buckets)
    return np.clip(buckets, 0, num_buckets - 1)


def position_bucket(offset: np.ndarray, num_buckets: int) -> np.ndarray:
    """Table index of relative offset ``i - j`` clamped to +-(B - 1); center is 0."""
    return np.clip(offset, -(num_buckets - 1), num_buckets - 1) + (num_buckets - 1)


def compute_rab(
    positions: np.ndarray,
    timestamps: np.ndarray,
    params: HstuLayerParams,
    config: HstuConfig,
    key_positions: Optional[np.ndarray] = None,
    key_timestamps: Optional[np.ndarray] = None,
) -> Optional[gt.Tensor]:
    """Relative attention bias ``pos[i - j] + time[bucket(t_i - t_j)]``.

    Queries use ``positions``/``timestamps``; keys default to the same arrays.
    Returns None when both components are disabled.
    """
    if not (config.rab_positional or config.rab_temporal):
        return None
    positions = np.asarray(positions, dtype=np.int64)
    timestamps = np.asarray(timestamps, dtype=np.int64)
    key_positions = positions if key_positions is None else np.asarray(key_positions, dtype=np.int64)
    key_timestamps = timestamps if key_timestamps is None else np.asarray(key_timestamps, dtype=np.int64)

    bias: Optional[gt.Tensor] = None
    if config.rab_positional:
        offsets = positions[:, None] - key_positions[None, :]
        bias = gt.take(params.rab_pos, position_bucket(offsets, config.num_position_buckets))
    if config.rab_temporal:
        deltas = timestamps[:, None] - key_timestamps[None, :]
        temporal = gt.take(params.rab_time, temporal_bucket(deltas, config.num_time_buckets))
        bias = temporal if bias is None else gt.add(bias, temporal)
    return bias


def resolve_n_norm(config: HstuConfig, mask: np.ndarray) -> Union[float, np.ndarray]:
    """Divisor for pointwise attention weights, scalar or per query row."""
    if config.norm_mode == "max_seq_len":
        return float(config.max_seq_len)
    if config.norm_mode == "valid_count":
        return np.maximum(mask.sum(axis=-1, keepdims=True), 1).astype(nc.get_dtype())
    return 1.0


def candidate_n_norm(config: HstuConfig, mask: np.ndarray, prefix_len: int) -> np.ndarray:
    """Per-row divisor for a scoring pass: rows from ``prefix_len`` on use ``prefix_len + 1``.

    Every candidate is normalized as if it were the only token after the
    prefix, whatever the microbatch size. Prefix rows keep the configured mode.
    """
    rows = np.empty((mask.shape[0], 1), dtype=nc.get_dtype())
    rows[...] = resolve_n_norm(config, mask)
    rows[prefix_len:] = prefix_len + 1
    return rows


def pointwise_attention(
    q: gt.Tensor,
    k: gt.Tensor,
    v: gt.Tensor,
    rab: Optional[gt.Tensor],
    mask: np.ndarray,
    n_norm: Union[float, np.ndarray],
    counter: Optional[FlopCounter] = None,
) -> gt.Tensor:
    """``SiLU(Q K^T + rab) / n_norm`` at allowed positions, pooled over V.

    ``q`` is ``h x n_q x d_qk``; ``k`` and ``v`` are ``h x n_k x d``. No
    softmax and no 1/sqrt(d_qk) scaling. Returns ``n_q x (h*d_v)``.
    """
    h, n_q, d_qk = q.shape
    n_k = k.shape[1]
    if mask.shape != (n_q, n_k):
        raise ShapeError(f"Mask shape {mask.shape} does not match scores {n_q}x{n_k}")
    if counter is not None:
        counter.add_attention(h, n_q, n_k, d_qk, v.shape[2])
    scores = gt.matmul(q, gt.transpose(k, (0, 2, 1)))
    if rab is not None:
        scores = gt.add(scores, rab)
    weights_scale = mask.astype(nc.get_dtype()) / n_norm
    weights = gt.mul(gt.silu(scores), weights_scale)
    return merge_heads(gt.matmul(weights, v))


def softmax_attention(
    q: gt.Tensor,
    k: gt.Tensor,
    v: gt.Tensor,
    rab: Optional[gt.Tensor],
    mask: np.ndarray,
    counter: Optional[FlopCounter] = None,
) -> gt.Tensor:
    """``softmax(Q K^T / sqrt(d_qk) + rab)`` over allowed keys, pooled over V."""
    h, n_q, d_qk = q.shape
    n_k = k.shape[1]
    if mask.shape != (n_q, n_k):
        raise ShapeError(f"Mask shape {mask.shape} does not match scores {n_q}x{n_k}")
    if counter is not None:
        counter.add_attention(h, n_q, n_k, d_qk, v.shape[2])
    scores = gt.scale(gt.matmul(q, gt.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d_qk))
    if rab is not None:
        scores = gt.add(scores, rab)
    return merge_heads(gt.matmul(gt.masked_softmax(scores, mask), v))


def gated_output(
    x: gt.Tensor,
    pooled: gt.Tensor,
    u: gt.Tensor,
    params: HstuLayerParams,
    config: HstuConfig,
    counter: Optional[FlopCounter] = None,
) -> gt.Tensor:
    """``X + f2(LayerNorm(AV) * U)`` with the norm over the h*d_v columns."""
    gated = gt.mul(gt.layer_norm(pooled, config.eps), u)
    if counter is not None:
        counter.add_matmul(x.shape[0], config.num_heads * config.d_v, config.d_model)
    return gt.add(x, gt.add(gt.matmul(gated, params.w2), params.b2))


@dataclass
class LayerKV:
    """Per-head keys and values a layer computed, ``h x n x d``."""

    k: np.ndarray
    v: np.ndarray


def hstu_layer_forward(
    x: gt.Tensor,
    params: HstuLayerParams,
    config: HstuConfig,
    mask: np.ndarray,
    timestamps: np.ndarray,
    positions: Optional[np.ndarray] = None,
    counter: Optional[FlopCounter] = None,
    kv_out: Optional[List[LayerKV]] = None,
    n_norm: Optional[Union[float, np.ndarray]] = None,
) -> gt.Tensor:
    """One HSTU layer with residual; appends this layer's K/V to ``kv_out``.

    ``n_norm`` overrides the configured pointwise divisor.
    """
    n = x.shape[0]
    if positions is None:
        positions = np.arange(n, dtype=np.int64)
    proj = pointwise_projection(x, params, config, counter)
    q = split_heads(proj.q, config.num_heads)
    k = split_heads(proj.k, config.num_heads)
    v = split_heads(proj.v, config.num_heads)
    if kv_out is not None:
        kv_out.append(LayerKV(k=k.value.copy(), v=v.value.copy()))
    rab = compute_rab(positions, timestamps, params, config)
    if config.attention == "softmax":
        pooled = softmax_attention(q, k, v, rab, mask, counter)
    else:
        if n_norm is None:
            n_norm = resolve_n_norm(config, mask)
        pooled = pointwise_attention(q, k, v, rab, mask, n_norm, counter)
    return gated_output(x, pooled, proj.u, params, config, counter)


def transformer_layer_forward(
    x: gt.Tensor,
    params: TransformerLayerParams,
    config: HstuConfig,
    mask: np.ndarray,
    counter: Optional[FlopCounter] = None,
) -> gt.Tensor:
    """Pre-norm block: X + Proj(SoftmaxAttn(LN(X))), then X + FFN(LN(X)) with GELU."""
    h, d_qk, d_v = config.num_heads, config.d_qk, config.d_v
    n = x.shape[0]
    normed = gt.layer_norm(x, config.eps)
    qkv = gt.add(gt.matmul(normed, params.w_qkv), params.b_qkv)
    if counter is not None:
        counter.add_matmul(n, config.d_model, 2 * h * d_qk + h * d_v)
    q = split_heads(gt.slice_last(qkv, 0, h * d_qk), h)
    k = split_heads(gt.slice_last(qkv, h * d_qk, 2 * h * d_qk), h)
    v = split_heads(gt.slice_last(qkv, 2 * h * d_qk, 2 * h * d_qk + h * d_v), h)
    attended = softmax_attention(q, k, v, None, mask, counter)
    x = gt.add(x, gt.add(gt.matmul(attended, params.w_o), params.b_o))

    normed = gt.layer_norm(x, config.eps)
    hidden = gt.gelu(gt.add(gt.matmul(normed, params.w_ff1), params.b_ff1))
    if counter is not None:
        counter.add_matmul(n, h * d_v, config.d_model)
        counter.add_matmul(n, config.d_model, config.d_ff)
        counter.add_matmul(n, config.d_ff, config.d_model)
    return gt.add(x, gt.add(gt.matmul(hidden, params.w_ff2), params.b_ff2))


def encode_sequence(
    x: gt.Tensor,
    layers: Sequence[LayerParams],
    config: HstuConfig,
    mask: np.ndarray,
    timestamps: np.ndarray,
    positions: Optional[np.ndarray] = None,
    counter: Optional[FlopCounter] = None,
    kv_out: Optional[List[LayerKV]] = None,
    n_norm: Optional[Union[float, np.ndarray]] = None,
) -> gt.Tensor:
    """Run every layer over a single sequence."""
    for params in layers:
        if isinstance(params, TransformerLayerParams):
            x = transformer_layer_forward(x, params, config, mask, counter)
        else:
            x = hstu_layer_forward(x, params, config, mask, timestamps, positions, counter, kv_out, n_norm)
    return x


def forward_encoder(
    batch: JaggedBatch,
    layers: Sequence[LayerParams],
    config: HstuConfig,
    mask: Optional[AttentionMask] = None,
    counter: Optional[FlopCounter] = None,
) -> gt.Tensor:
    """Apply the stack to every sequence of ``batch``; outputs stay flattened.

    Sequences never attend across their boundaries.
    """
    mask = mask or AttentionMask("causal")
    if batch.num_sequences == 0 or not layers:
        return batch.tokens
    outputs = []
    for i in range(batch.num_sequences):
        start, stop = batch.bounds(i)
        if stop == start:
            continue
        x = gt.index_rows(batch.tokens, np.arange(start, stop))
        allow = mask.realize(stop - start)
        n_norm = candidate_n_norm(config, allow, mask.prefix_len) if mask.kind == "mfalcon" else None
        outputs.append(
            encode_sequence(
                x,
                layers,
                config,
                allow,
                batch.timestamps[start:stop],
                batch.positions[start:stop],
                counter,
                n_norm=n_norm,
            )
        )
    if not outputs:
        # every sequence is empty: nothing to attend over
        return batch.tokens
    return gt.concat(outputs, axis=0)


def estimate_activation_floats(config: HstuConfig, arch: Optional[str] = None) -> int:
    """Activation floats kept per token per layer for the backward pass.

    HSTU: ``2d + 2d + 4h*d_qk + 4h*d_v + 2h*d_v`` (14d when h*d_qk = h*d_v = d).
    Transformer: attention intermediates ``3h*d_v``, feedforward block
    ``4d + 4d_ff``, input and input norm ``4d``, and the qkv projections
    ``2(2h*d_qk + h*d_v)`` (33d when additionally d_ff = 4d).
    """
    arch = arch or config.architecture
    d, h = config.d_model, config.num_heads
    if arch == "hstu":
        return 2 * d + 2 * d + 4 * h * config.d_qk + 4 * h * config.d_v + 2 * h * config.d_v
    if arch == "transformer":
        attention = 3 * h * config.d_v
        feedforward = 4 * d + 4 * config.d_ff
        inputs = 4 * d
        qkv = 2 * (2 * h * config.d_qk + h * config.d_v)
        return attention + feedforward + inputs + qkv
    raise ConfigurationError(f"Invalid architecture '{arch}'. Valid: {ARCHITECTURES}")
