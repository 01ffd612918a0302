"""Hashed embedding tables with a rowwise AdamW optimizer.

Large, continuously changing id vocabularies are emulated by hashing ids into
a fixed number of rows (Knuth multiplicative hash, collisions accepted). The
optimizer keeps a full first moment per row but a single scalar second moment,
so each row carries ``d + 1`` optimizer scalars instead of ``2d``.

Checkpoint layout (little-endian, version 1)::

    magic  b"HSTUEMB1"
    u64    num_rows T
    u64    dim d
    f32    weights           T * d
    f32    first moments     T * d
    f32    second moments    T
    u64    optimizer step count
"""

import logging
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Set, Tuple

import numpy as np

from . import grad_tape as gt
from . import numeric_core as nc
from .utils.exceptions import CheckpointError, ValidationError

logger = logging.getLogger(__name__)

KNUTH_MULTIPLIER = 2654435761
EMBEDDING_MAGIC = b"HSTUEMB1"
_HEADER = struct.Struct("<8sQQ")
_STEP = struct.Struct("<Q")
_MASK32 = np.uint64(0xFFFFFFFF)


def hash_id(item_id: int, num_rows: int) -> int:
    """Row index of ``item_id``: ((id * 2654435761) mod 2^32) mod T."""
    if num_rows < 1:
        raise ValidationError(f"Table must have at least one row, got {num_rows}")
    return ((int(item_id) * KNUTH_MULTIPLIER) % (1 << 32)) % num_rows


def hash_ids(ids: Iterable[int], num_rows: int) -> np.ndarray:
    """Vectorized ``hash_id`` over an id array."""
    if num_rows < 1:
        raise ValidationError(f"Table must have at least one row, got {num_rows}")
    arr = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids)
    arr = arr.astype(np.uint64) & _MASK32
    # both factors are below 2^32 so the product fits in 64 bits
    product = (arr * np.uint64(KNUTH_MULTIPLIER)) & _MASK32
    return (product % np.uint64(num_rows)).astype(np.int64)


@dataclass
class VocabPolicy:
    """How ids map onto table rows."""

    num_rows: int
    multiplier: int = KNUTH_MULTIPLIER
    collision_mode: str = "hash-mod"

    VALID_MODES = ("hash-mod", "direct")

    def __post_init__(self) -> None:
        if self.num_rows < 1:
            raise ValidationError(f"num_rows must be >= 1, got {self.num_rows}")
        if self.collision_mode not in self.VALID_MODES:
            raise ValidationError(
                f"Invalid collision_mode '{self.collision_mode}'. Valid: {self.VALID_MODES}"
            )

    def rows(self, ids: Iterable[int]) -> np.ndarray:
        """Row indices for ``ids``; ``direct`` mode requires ids < num_rows."""
        if self.collision_mode == "direct":
            arr = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
            if arr.size and (arr.min() < 0 or arr.max() >= self.num_rows):
                raise ValidationError(
                    f"Direct-mapped id out of range [0, {self.num_rows})"
                )
            return arr
        return hash_ids(ids, self.num_rows)


@dataclass
class RowwiseAdamWConfig:
    """Hyperparameters for ``rowwise_adamw_step``."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


class EmbeddingTable:
    """A ``T x d`` table of learnable rows plus rowwise optimizer state."""

    def __init__(
        self,
        num_rows: int,
        dim: int,
        name: str = "embeddings",
        collision_mode: str = "hash-mod",
        init_std: float = 0.1,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        if dim < 1:
            raise ValidationError(f"Embedding dim must be >= 1, got {dim}")
        self.policy = VocabPolicy(num_rows=num_rows, collision_mode=collision_mode)
        self.num_rows = num_rows
        self.dim = dim
        self.name = name
        rng = rng or np.random.default_rng(0)
        values = rng.normal(0.0, init_std, size=(num_rows, dim)).astype(nc.get_dtype())
        self.weights = gt.Tensor(values, requires_grad=True, name=name)
        self.first_moment = np.zeros((num_rows, dim), dtype=np.float64)
        self.second_moment = np.zeros(num_rows, dtype=np.float64)
        self.step_count = 0
        self.touched_rows: Set[int] = set()

    @property
    def state_scalars_per_row(self) -> int:
        return self.first_moment.shape[1] + 1

    def row_indices(self, ids: Iterable[int]) -> np.ndarray:
        return self.policy.rows(ids)

    def lookup(self, ids: Iterable[int]) -> gt.Tensor:
        """Embedding rows for ``ids`` as a ``len x d`` tensor on the active tape."""
        rows = self.row_indices(ids)
        if rows.size == 0:
            return gt.Tensor(np.zeros((0, self.dim), dtype=self.weights.value.dtype))
        self.touched_rows.update(int(r) for r in np.unique(rows))
        return gt.index_rows(self.weights, rows)

    def set_row(self, item_id: int, values: Iterable[float]) -> None:
        row = int(self.row_indices([item_id])[0])
        self.weights.value[row] = np.asarray(list(values), dtype=self.weights.value.dtype)

    def sparse_gradients(self) -> Tuple[np.ndarray, np.ndarray]:
        """``(rows, grads)`` for rows touched since the last ``clear_touched``."""
        rows = np.array(sorted(self.touched_rows), dtype=np.int64)
        if self.weights.grad is None or rows.size == 0:
            return rows, np.zeros((rows.size, self.dim), dtype=self.weights.value.dtype)
        return rows, self.weights.grad[rows]

    def clear_touched(self) -> None:
        self.touched_rows.clear()
        self.weights.zero_grad()

    def __repr__(self) -> str:
        return (
            f"EmbeddingTable(name={self.name}, rows={self.num_rows}, dim={self.dim}, "
            f"mode={self.policy.collision_mode})"
        )


def rowwise_adamw_step(
    table: EmbeddingTable,
    rows: np.ndarray,
    grads: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    step_count: Optional[int] = None,
) -> EmbeddingTable:
    """Apply one rowwise AdamW update to the touched ``rows`` in place.

    Per row r with gradient g: ``m_r = b1*m_r + (1-b1)*g``,
    ``v_r = b2*v_r + (1-b2)*mean(g^2)``, then
    ``w_r -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w_r)``.
    Rows not listed keep their weights and state.
    """
    if lr <= 0:
        raise ValidationError(f"Learning rate must be positive, got {lr}")
    rows = np.asarray(rows, dtype=np.int64)
    grads = np.asarray(grads, dtype=np.float64)
    if rows.size == 0:
        return table
    if grads.shape != (rows.size, table.dim):
        raise ValidationError(
            f"Sparse gradient shape {grads.shape} does not match {rows.size} rows x {table.dim}"
        )
    nc.ensure_finite(grads, f"gradient for embedding table '{table.name}'")
    if rows.min() < 0 or rows.max() >= table.num_rows:
        raise ValidationError(f"Gradient row out of range for table '{table.name}'")

    unique_rows, inverse = np.unique(rows, return_inverse=True)
    if unique_rows.size != rows.size:
        merged = np.zeros((unique_rows.size, table.dim))
        np.add.at(merged, inverse, grads)
        rows, grads = unique_rows, merged

    if step_count is None:
        table.step_count += 1
        step_count = table.step_count
    else:
        table.step_count = step_count

    m = beta1 * table.first_moment[rows] + (1.0 - beta1) * grads
    v = beta2 * table.second_moment[rows] + (1.0 - beta2) * np.mean(grads * grads, axis=1)
    table.first_moment[rows] = m
    table.second_moment[rows] = v

    m_hat = m / (1.0 - beta1**step_count)
    v_hat = v / (1.0 - beta2**step_count)
    w = table.weights.value[rows].astype(np.float64)
    update = m_hat / (np.sqrt(v_hat)[:, None] + eps) + weight_decay * w
    table.weights.value[rows] = (w - lr * update).astype(table.weights.value.dtype)
    return table


def save_embedding_table(table: EmbeddingTable, path: str) -> None:
    """Write ``table`` (weights and optimizer state) in the HSTUEMB1 layout."""
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as handle:
            handle.write(_HEADER.pack(EMBEDDING_MAGIC, table.num_rows, table.dim))
            handle.write(table.weights.value.astype("<f4").tobytes())
            handle.write(table.first_moment.astype("<f4").tobytes())
            handle.write(table.second_moment.astype("<f4").tobytes())
            handle.write(_STEP.pack(table.step_count))
        logger.info(f"Saved embedding table '{table.name}' ({table.num_rows}x{table.dim}) to {path}")
    except OSError as e:
        raise CheckpointError(f"Failed to write embedding checkpoint {path}: {e}")


def load_embedding_table(
    path: str, name: str = "embeddings", collision_mode: str = "hash-mod"
) -> EmbeddingTable:
    """Read an HSTUEMB1 checkpoint back into an ``EmbeddingTable``."""
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as e:
        raise CheckpointError(f"Failed to read embedding checkpoint {path}: {e}")

    try:
        magic, num_rows, dim = _HEADER.unpack_from(blob, 0)
    except struct.error as e:
        raise CheckpointError(f"Truncated embedding checkpoint header in {path}: {e}")
    if magic != EMBEDDING_MAGIC:
        raise CheckpointError(f"Bad magic {magic!r} in {path}, expected {EMBEDDING_MAGIC!r}")

    offset = _HEADER.size
    matrix_bytes = num_rows * dim * 4
    expected = offset + 2 * matrix_bytes + num_rows * 4 + _STEP.size
    if len(blob) != expected:
        raise CheckpointError(
            f"Embedding checkpoint {path} has {len(blob)} bytes, expected {expected}"
        )

    table = EmbeddingTable(num_rows, dim, name=name, collision_mode=collision_mode)
    weights = np.frombuffer(blob, dtype="<f4", count=num_rows * dim, offset=offset)
    offset += matrix_bytes
    first = np.frombuffer(blob, dtype="<f4", count=num_rows * dim, offset=offset)
    offset += matrix_bytes
    second = np.frombuffer(blob, dtype="<f4", count=num_rows, offset=offset)
    offset += num_rows * 4
    (step_count,) = _STEP.unpack_from(blob, offset)

    table.weights.value[...] = weights.reshape(num_rows, dim)
    table.first_moment[...] = first.reshape(num_rows, dim)
    table.second_moment[...] = second
    table.step_count = int(step_count)
    logger.debug(f"Loaded embedding table '{name}' from {path}")
    return table
