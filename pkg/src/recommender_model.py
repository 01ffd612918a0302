"""Generative recommender: token embeddings, HSTU stack and task heads.

Token embeddings:

- content tokens read the hashed item table; combined retrieval tokens add
  the embeddings of every action bit that fired;
- action tokens sum their active bit embeddings plus an action marker row;
- contextual tokens read a hashed table keyed by (feature, value);
- optionally a learned absolute position embedding is added to every token.

Retrieval and next-content heads score items by dot product with the item
table (tied weights). The ranking head is a d -> d -> A MLP with SiLU.
"""

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import grad_tape as gt
from . import numeric_core as nc
from .embedding_store import EmbeddingTable, load_embedding_table, save_embedding_table
from .hstu_encoder import (
    AttentionMask,
    FlopCounter,
    HstuConfig,
    JaggedBatch,
    LayerParams,
    forward_encoder,
    initialize_layers,
)
from .sequence_pipeline import TASKS, TokenKind, TokenSequence
from .utils.exceptions import CheckpointError, ConfigurationError

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"HSTUMDL1"
_LENGTH = struct.Struct("<Q")

# flat overrides on top of ModelConfig defaults
MODEL_PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "ml1m_small": {"num_layers": 2, "num_heads": 1, "d_model": 50, "d_qk": 50, "d_v": 50, "max_seq_len": 200},
    "ml1m_large": {"num_layers": 8, "num_heads": 2, "d_model": 50, "d_qk": 25, "d_v": 25, "max_seq_len": 200},
    "ranking_industrial": {
        "task": "ranking",
        "num_layers": 3,
        "num_heads": 4,
        "d_model": 512,
        "d_qk": 128,
        "d_v": 128,
        "max_seq_len": 2048,
        "num_position_buckets": 2048,
        "num_item_rows": 1 << 20,
    },
    "retrieval_industrial": {
        "task": "retrieval",
        "num_layers": 6,
        "num_heads": 4,
        "d_model": 256,
        "d_qk": 64,
        "d_v": 64,
        "max_seq_len": 512,
        "num_position_buckets": 512,
        "num_item_rows": 1 << 20,
    },
}


@dataclass
class ModelConfig:
    """Vocabulary sizes, task and encoder settings of a recommender."""

    task: str = "retrieval"
    num_item_rows: int = 4096
    num_action_bits: int = 2
    num_contextual_rows: int = 1024
    learned_positions: bool = True
    embedding_init_std: float = 0.1
    encoder: HstuConfig = field(default_factory=HstuConfig)

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigurationError(f"Invalid task '{self.task}'. Valid: {TASKS}")
        for name in ("num_item_rows", "num_action_bits", "num_contextual_rows"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"ModelConfig.{name} must be >= 1")

    @property
    def d_model(self) -> int:
        return self.encoder.d_model

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        """Build from a flat ``model`` section; explicit keys win over the named preset."""
        data = dict(data)
        preset = data.pop("preset", None)
        if preset is not None:
            if preset not in MODEL_PRESETS:
                raise ConfigurationError(f"Unknown model preset '{preset}'. Valid: {sorted(MODEL_PRESETS)}")
            data = {**MODEL_PRESETS[preset], **data}
        encoder_keys = set(HstuConfig.__dataclass_fields__)
        encoder = {k: data.pop(k) for k in list(data) if k in encoder_keys}
        if isinstance(data.get("encoder"), dict):
            encoder.update(data.pop("encoder"))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown model config keys: {sorted(unknown)}")
        return cls(encoder=HstuConfig.from_dict(encoder), **data)

    def to_dict(self) -> Dict[str, Any]:
        flat = asdict(self)
        flat.update(flat.pop("encoder"))
        return flat


@dataclass
class TaskHeads:
    """Ranking MLP weights; retrieval heads reuse the item table."""

    w1: gt.Tensor
    b1: gt.Tensor
    w2: gt.Tensor
    b2: gt.Tensor

    @classmethod
    def initialize(cls, d: int, num_tasks: int, rng: np.random.Generator) -> "TaskHeads":
        def param(value: np.ndarray, name: str) -> gt.Tensor:
            return gt.Tensor(value.astype(nc.get_dtype()), requires_grad=True, name=name)

        return cls(
            w1=param(rng.normal(0.0, np.sqrt(1.0 / d), size=(d, d)), "head.w1"),
            b1=param(np.zeros(d), "head.b1"),
            w2=param(rng.normal(0.0, np.sqrt(1.0 / d), size=(d, num_tasks)), "head.w2"),
            b2=param(np.zeros(num_tasks), "head.b2"),
        )

    def named_tensors(self) -> List[Tuple[str, gt.Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def logits(self, hidden: gt.Tensor) -> gt.Tensor:
        inner = gt.silu(gt.add(gt.matmul(hidden, self.w1), self.b1))
        return gt.add(gt.matmul(inner, self.w2), self.b2)


class GenerativeRecommender:
    """Embedding tables, encoder layers and heads for one task."""

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None) -> None:
        self.config = config
        rng = rng or np.random.default_rng(config.encoder.init_seed)
        d = config.d_model
        std = config.embedding_init_std
        self.item_table = EmbeddingTable(config.num_item_rows, d, "item_embeddings", "hash-mod", std, rng)
        # one row per action bit plus a marker row shared by every action token
        self.action_table = EmbeddingTable(
            config.num_action_bits + 1, d, "action_embeddings", "direct", std, rng
        )
        self.contextual_table = EmbeddingTable(
            config.num_contextual_rows, d, "contextual_embeddings", "hash-mod", std, rng
        )
        self.position_table: Optional[EmbeddingTable] = None
        if config.learned_positions:
            self.position_table = EmbeddingTable(
                config.encoder.max_seq_len, d, "position_embeddings", "direct", std, rng
            )
        self.layers: List[LayerParams] = initialize_layers(config.encoder, rng)
        self.heads = TaskHeads.initialize(d, config.num_action_bits, rng)
        logger.debug(
            f"Built {config.encoder.architecture} recommender: task={config.task}, "
            f"d={d}, layers={len(self.layers)}"
        )

    # ------------------------------------------------------------ parameters

    def embedding_tables(self) -> List[EmbeddingTable]:
        tables = [self.item_table, self.action_table, self.contextual_table]
        if self.position_table is not None:
            tables.append(self.position_table)
        return tables

    def dense_parameters(self) -> List[Tuple[str, gt.Tensor]]:
        """Every non-embedding parameter in declaration order."""
        named = []
        for i, layer in enumerate(self.layers):
            named.extend((f"layer{i}.{name}", t) for name, t in layer.named_tensors())
        named.extend((f"head.{name}", t) for name, t in self.heads.named_tensors())
        return named

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter array, keyed by name."""
        state = {name: t.value.copy() for name, t in self.dense_parameters()}
        state.update({table.name: table.weights.value.copy() for table in self.embedding_tables()})
        return state

    def zero_grad(self) -> None:
        for _, tensor in self.dense_parameters():
            tensor.zero_grad()
        for table in self.embedding_tables():
            table.clear_touched()

    # ------------------------------------------------------------ forward

    def embed(self, seq: TokenSequence, positions: Optional[Sequence[int]] = None) -> gt.Tensor:
        """``len(seq) x d`` input embeddings on the active tape.

        ``positions`` overrides the absolute positions (default 0..n-1).
        """
        n = len(seq)
        d = self.config.d_model
        num_bits = self.config.num_action_bits
        if n == 0:
            return gt.Tensor(np.zeros((0, d), dtype=nc.get_dtype()))

        content_pos = [i for i, k in enumerate(seq.kinds) if k is TokenKind.CONTENT]
        context_pos = [i for i, k in enumerate(seq.kinds) if k is TokenKind.CONTEXTUAL]
        blocks = [gt.Tensor(np.zeros((1, d), dtype=nc.get_dtype()))]
        gather = np.zeros(n, dtype=np.int64)
        if content_pos:
            blocks.append(self.item_table.lookup([seq.token_ids[i] for i in content_pos]))
            gather[content_pos] = np.arange(1, 1 + len(content_pos))
        if context_pos:
            blocks.append(self.contextual_table.lookup([seq.token_ids[i] for i in context_pos]))
            gather[context_pos] = np.arange(1 + len(content_pos), 1 + len(content_pos) + len(context_pos))
        x = gt.index_rows(gt.concat(blocks, axis=0), gather)

        multi_hot = np.zeros((n, num_bits + 1), dtype=nc.get_dtype())
        for i, (kind, bits) in enumerate(zip(seq.kinds, seq.actions)):
            if kind is TokenKind.ACTION:
                multi_hot[i, num_bits] = 1.0
            if kind is not TokenKind.CONTEXTUAL:
                for b in range(num_bits):
                    if (bits >> b) & 1:
                        multi_hot[i, b] = 1.0
        if multi_hot.any():
            action_rows = self.action_table.lookup(np.arange(num_bits + 1))
            x = gt.add(x, gt.matmul(multi_hot, action_rows))

        if self.position_table is not None:
            pos = np.arange(n) if positions is None else np.asarray(positions, dtype=np.int64)
            pos = np.minimum(pos, self.config.encoder.max_seq_len - 1)
            x = gt.add(x, self.position_table.lookup(pos))
        return x

    def encode(
        self,
        sequences: Sequence[TokenSequence],
        mask: Optional[AttentionMask] = None,
        counter: Optional[FlopCounter] = None,
    ) -> List[gt.Tensor]:
        """Encoder outputs per sequence, each ``len(seq) x d``."""
        if not sequences:
            return []
        batch = JaggedBatch.from_sequences(
            [self.embed(s) for s in sequences], [s.timestamps for s in sequences]
        )
        hidden = forward_encoder(batch, self.layers, self.config.encoder, mask, counter)
        outputs = []
        for i in range(batch.num_sequences):
            start, stop = batch.bounds(i)
            outputs.append(gt.index_rows(hidden, np.arange(start, stop)))
        return outputs

    def ranking_logits(self, hidden: gt.Tensor) -> gt.Tensor:
        """Per-event logits ``k x A`` for ``k`` encoder outputs."""
        return self.heads.logits(hidden)

    def item_embeddings(self, item_ids: Sequence[int]) -> gt.Tensor:
        return self.item_table.lookup(item_ids)

    def score_items(self, hidden: np.ndarray, item_ids: Sequence[int]) -> np.ndarray:
        """Dot-product scores of ``hidden`` (d or k x d) against item rows, off the tape."""
        rows = self.item_table.row_indices(item_ids)
        return np.asarray(hidden) @ self.item_table.weights.value[rows].T

    def ranking_probabilities(self, hidden: np.ndarray) -> np.ndarray:
        return nc.sigmoid(self.ranking_logits(gt.Tensor(np.atleast_2d(hidden))).value)


# ---------------------------------------------------------------- checkpoints


def _embedding_path(path: str, table_name: str) -> str:
    stem, _ = os.path.splitext(path)
    return f"{stem}.{table_name}.emb"


def save_model_checkpoint(model: GenerativeRecommender, path: str) -> List[str]:
    """Write dense parameters to ``path`` and each embedding table beside it.

    Layout: magic ``HSTUMDL1``, u64 length of a JSON config block, the block,
    then every dense parameter in declaration order as little-endian f32.
    Returns every file written.
    """
    dense = model.dense_parameters()
    embedding_files = {t.name: os.path.basename(_embedding_path(path, t.name)) for t in model.embedding_tables()}
    block = {
        "format_version": 1,
        "model": model.config.to_dict(),
        "parameters": [{"name": name, "shape": list(t.shape)} for name, t in dense],
        "embedding_files": embedding_files,
    }
    encoded = json.dumps(block, sort_keys=True).encode("utf-8")
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as handle:
            handle.write(MODEL_MAGIC)
            handle.write(_LENGTH.pack(len(encoded)))
            handle.write(encoded)
            for _, tensor in dense:
                handle.write(tensor.value.astype("<f4").tobytes())
    except OSError as e:
        raise CheckpointError(f"Failed to write model checkpoint {path}: {e}")
    written = [path]
    for table in model.embedding_tables():
        table_path = _embedding_path(path, table.name)
        save_embedding_table(table, table_path)
        written.append(table_path)
    logger.info(f"💾 Saved model checkpoint to {path} ({len(dense)} dense tensors)")
    return written


def load_model_checkpoint(path: str) -> GenerativeRecommender:
    """Inverse of ``save_model_checkpoint``."""
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as e:
        raise CheckpointError(f"Failed to read model checkpoint {path}: {e}")
    if blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint (bad magic)")
    offset = len(MODEL_MAGIC)
    try:
        (length,) = _LENGTH.unpack_from(blob, offset)
        offset += _LENGTH.size
        block = json.loads(blob[offset : offset + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Unreadable config block in {path}: {e}")
    offset += length

    model = GenerativeRecommender(ModelConfig.from_dict(block["model"]))
    dense = dict(model.dense_parameters())
    for spec in block["parameters"]:
        tensor = dense.get(spec["name"])
        if tensor is None or list(tensor.shape) != spec["shape"]:
            raise CheckpointError(f"Parameter {spec['name']} does not fit the configured model")
        count = int(np.prod(spec["shape"]))
        if offset + 4 * count > len(blob):
            raise CheckpointError(f"Model checkpoint {path} is truncated at {spec['name']}")
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensor.value[...] = values.reshape(spec["shape"])
        offset += 4 * count
    if offset != len(blob):
        raise CheckpointError(f"Model checkpoint {path} has {len(blob) - offset} trailing bytes")

    directory = os.path.dirname(os.path.abspath(path))
    by_name = {t.name: t for t in model.embedding_tables()}
    for name, filename in block["embedding_files"].items():
        table = by_name[name]
        loaded = load_embedding_table(
            os.path.join(directory, filename), name=name, collision_mode=table.policy.collision_mode
        )
        if (loaded.num_rows, loaded.dim) != (table.num_rows, table.dim):
            raise CheckpointError(f"Embedding table {name} does not fit the configured model")
        table.weights.value[...] = loaded.weights.value
        table.first_moment[...] = loaded.first_moment
        table.second_moment[...] = loaded.second_moment
        table.step_count = loaded.step_count
    logger.info(f"Loaded model checkpoint {path}")
    return model

