"""
Trainer - streaming and multi-epoch training plus held-out evaluation

Streaming mode visits every training record once in data order. Multi-epoch
mode repeats the data, optionally reshuffled per epoch from the seeded rng.
Each emitted example is subsampled with Stochastic Length, turned into a
task sequence, encoded, and scored with the task's loss at every defined
target. Dense parameters use AdamW; embedding tables use rowwise AdamW on
the rows a batch touched.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import grad_tape as gt
from . import numeric_core as nc
from .data_loaders import HeldOutExample, UserHistory
from .embedding_store import rowwise_adamw_step
from .losses import multitask_bce_loss, sample_negatives, sampled_softmax_loss
from .metrics import DEFAULT_KS, MetricReport, RankingAccumulator, normalized_entropy, target_rank
from .recommender_model import GenerativeRecommender
from .sequence_pipeline import (
    DEFAULT_POSITIVE_MASK,
    TASKS,
    TokenKind,
    TokenSequence,
    build_ranking_sequence,
    build_sequence,
    generative_emission_sampler,
)
from .stochastic_length import SLPolicy, apply_stochastic_length
from .utils.exceptions import ConfigurationError, DivergenceError, ValidationError
from .utils.metric_logger import MetricTimeline
from .utils.parallel import parallel_map

logger = logging.getLogger(__name__)

TRAIN_MODES = ("streaming", "multi_epoch")
EMISSION_MODES = ("every_record", "generative")


@dataclass
class TrainConfig:
    """Optimization and data-visiting settings for one training run."""

    task: str = "retrieval"
    mode: str = "streaming"
    epochs: int = 1
    shuffle: bool = False
    batch_size: int = 16
    learning_rate: float = 1e-3
    embedding_learning_rate: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.98
    embedding_beta1: float = 0.9
    embedding_beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    num_negatives: int = 128
    positive_mask: int = DEFAULT_POSITIVE_MASK
    task_weights: Optional[List[float]] = None
    emission: str = "every_record"
    emission_rate: float = 1.0
    log_interval: int = 100
    seed: int = 0
    stochastic_length: Optional[SLPolicy] = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigurationError(f"Invalid train.task '{self.task}'. Valid: {TASKS}")
        if self.mode not in TRAIN_MODES:
            raise ConfigurationError(f"Invalid train.mode '{self.mode}'. Valid: {TRAIN_MODES}")
        if self.emission not in EMISSION_MODES:
            raise ConfigurationError(f"Invalid train.emission '{self.emission}'. Valid: {EMISSION_MODES}")
        if self.mode == "streaming" and (self.epochs != 1 or self.shuffle):
            raise ConfigurationError(
                f"Streaming training requires epochs=1 and shuffle=false "
                f"(got epochs={self.epochs}, shuffle={self.shuffle})"
            )
        if self.epochs < 1:
            raise ConfigurationError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0 or (self.embedding_learning_rate or 0) < 0:
            raise ConfigurationError("Learning rates must be nonnegative")
        if self.num_negatives < 1:
            raise ConfigurationError(f"train.num_negatives must be >= 1, got {self.num_negatives}")
        betas = (self.beta1, self.beta2, self.embedding_beta1, self.embedding_beta2)
        if not all(0 <= b < 1 for b in betas):
            raise ConfigurationError("Adam betas must lie in [0, 1)")

    @property
    def table_learning_rate(self) -> float:
        if self.embedding_learning_rate is None:
            return self.learning_rate
        return self.embedding_learning_rate

    @classmethod
    def from_dict(cls, data: Dict[str, Any], sl_section: Optional[Dict[str, Any]] = None) -> "TrainConfig":
        """Build from the ``train`` config section and an optional SL section."""
        data = dict(data)
        policy = None
        if sl_section and sl_section.get("enabled", False):
            policy = SLPolicy.from_dict(sl_section)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown train config keys: {sorted(unknown)}")
        return cls(stochastic_length=policy, **data)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("stochastic_length")
        return data


@dataclass
class DenseAdamW:
    """AdamW over named dense tensors with bias-corrected moments."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    _moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, init=False)

    def step(self, named: Sequence[Tuple[str, gt.Tensor]], lr: float) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for name, tensor in named:
            if tensor.grad is None:
                continue
            grad = np.asarray(tensor.grad, dtype=np.float64)
            nc.ensure_finite(grad, f"gradient for {name} at optimizer step {self.step_count}", DivergenceError)
            m, v = self._moments.get(name, (np.zeros_like(grad), np.zeros_like(grad)))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self._moments[name] = (m, v)
            w = tensor.value.astype(np.float64)
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps) + self.weight_decay * w
            tensor.value[...] = (w - lr * update).astype(tensor.value.dtype)


@dataclass
class TrainResult:
    """Counters and timeline of a finished run."""

    steps: int = 0
    examples_seen: int = 0
    targets_seen: int = 0
    records_visited: int = 0
    epochs_completed: int = 0
    final_loss: float = float("nan")
    timeline: Optional[MetricTimeline] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "steps": self.steps,
            "examples_seen": self.examples_seen,
            "targets_seen": self.targets_seen,
            "records_visited": self.records_visited,
            "epochs_completed": self.epochs_completed,
            "final_loss": None if math.isnan(self.final_loss) else self.final_loss,
        }


def truncate_sequence(seq: TokenSequence, max_length: int) -> TokenSequence:
    """Keep the most recent ``max_length`` positions."""
    if len(seq) <= max_length:
        return seq
    cut = len(seq) - max_length
    return TokenSequence(
        token_ids=seq.token_ids[cut:],
        kinds=seq.kinds[cut:],
        timestamps=seq.timestamps[cut:],
        targets=seq.targets[cut:],
        actions=seq.actions[cut:],
        task=seq.task,
        user_id=seq.user_id,
    )


def history_sequence(
    history: UserHistory,
    task: str,
    max_length: int,
    positive_mask: int = DEFAULT_POSITIVE_MASK,
    kept: Optional[Sequence[int]] = None,
) -> TokenSequence:
    """Task sequence of ``history`` (optionally only the ``kept`` engagements)."""
    indices = range(len(history)) if kept is None else kept
    contents = [history.contents[i] for i in indices]
    actions = [history.actions[i] for i in indices]
    times = [history.timestamps[i] for i in indices]
    seq = build_sequence(task, contents, actions, times, positive_mask, history.contextual, history.user_id)
    return truncate_sequence(seq, max_length)


class Trainer:
    """Runs ``TrainConfig`` against a ``GenerativeRecommender``."""

    def __init__(
        self,
        model: GenerativeRecommender,
        config: TrainConfig,
        timeline: Optional[MetricTimeline] = None,
        corpus: Optional[Sequence[int]] = None,
    ):
        if config.task != model.config.task:
            raise ConfigurationError(
                f"Train task '{config.task}' does not match model task '{model.config.task}'"
            )
        self.model = model
        self.config = config
        self.timeline = timeline or MetricTimeline(log_interval=config.log_interval)
        self.corpus = None if corpus is None else np.unique(np.asarray(corpus, dtype=np.int64))
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = DenseAdamW(config.beta1, config.beta2, config.eps, config.weight_decay)
        self.result = TrainResult(timeline=self.timeline)

    # ------------------------------------------------------------ data

    def _prepare(self, history: UserHistory) -> Optional[TokenSequence]:
        """SL, sequence building and truncation; None when nothing is supervised."""
        if len(history) == 0:
            return None
        kept = None
        if self.config.stochastic_length is not None:
            kept, decision = apply_stochastic_length(
                history.contents, history.timestamps, self.config.stochastic_length, self.rng
            )
            if not decision.full:
                logger.debug(f"SL kept {decision.length} of {len(history)} engagements")
        seq = history_sequence(
            history, self.config.task, self.model.config.encoder.max_seq_len, self.config.positive_mask, kept
        )
        if not seq.target_positions():
            return None
        return seq

    def _emitted(self, history: UserHistory) -> bool:
        if self.config.emission == "every_record":
            return True
        return generative_emission_sampler(max(len(history), 1), self.rng, self.config.emission_rate)

    def _visit_order(self, count: int) -> np.ndarray:
        if self.config.shuffle:
            return self.rng.permutation(count)
        return np.arange(count)

    # ------------------------------------------------------------ losses

    def _example_loss(self, seq: TokenSequence, hidden: gt.Tensor, history: UserHistory) -> gt.Tensor:
        positions = seq.target_positions()
        rows = gt.index_rows(hidden, np.asarray(positions))
        targets = [int(seq.targets[p]) for p in positions]
        if self.config.task == "ranking":
            return multitask_bce_loss(self.model.ranking_logits(rows), targets, self.config.task_weights)
        if history.id_bound is not None:
            negatives = sample_negatives(targets, self.config.num_negatives, self.rng, id_bound=history.id_bound)
        else:
            negatives = sample_negatives(targets, self.config.num_negatives, self.rng, corpus=self.corpus)
        return sampled_softmax_loss(rows, targets, negatives, self.model.item_table)

    def _step(self, batch: List[Tuple[TokenSequence, UserHistory]]) -> float:
        self.model.zero_grad()
        with gt.GradTape() as tape:
            hidden = self.model.encode([seq for seq, _ in batch])
            counts = [len(seq.target_positions()) for seq, _ in batch]
            total = float(sum(counts))
            parts = [
                gt.scale(self._example_loss(seq, h, history), count / total)
                for (seq, history), h, count in zip(batch, hidden, counts)
            ]
            loss = parts[0]
            for part in parts[1:]:
                loss = gt.add(loss, part)
        value = loss.item()
        step = self.result.steps + 1
        if not math.isfinite(value):
            raise DivergenceError(f"Loss became {value} at step {step} (batch of {len(batch)} examples)")
        tape.backward(loss)

        if self.config.learning_rate > 0:
            self.optimizer.step(self.model.dense_parameters(), self.config.learning_rate)
        if self.config.table_learning_rate > 0:
            for table in self.model.embedding_tables():
                rows, grads = table.sparse_gradients()
                if rows.size:
                    nc.ensure_finite(grads, f"gradient for table '{table.name}' at step {step}", DivergenceError)
                    rowwise_adamw_step(
                        table,
                        rows,
                        grads,
                        self.config.table_learning_rate,
                        self.config.embedding_beta1,
                        self.config.embedding_beta2,
                        self.config.eps,
                        self.config.weight_decay,
                    )

        self.result.steps = step
        self.result.examples_seen += len(batch)
        self.result.targets_seen += int(total)
        self.result.final_loss = value
        self.timeline.log(step, "loss", value)
        self.timeline.log(step, "targets", total)
        return value

    # ------------------------------------------------------------ loop

    def train(self, histories: Sequence[UserHistory]) -> TrainResult:
        """Run every epoch over ``histories``; returns the counters and timeline."""
        if self.corpus is None and self.config.task != "ranking":
            ids = [item for h in histories for item in h.contents]
            self.corpus = np.unique(np.asarray(ids, dtype=np.int64))
        logger.info(
            f"🚀 Training {self.model.config.encoder.architecture} ({self.config.task}, {self.config.mode}) "
            f"on {len(histories)} records for {self.config.epochs} epoch(s)"
        )
        for epoch in range(self.config.epochs):
            batch: List[Tuple[TokenSequence, UserHistory]] = []
            for index in self._visit_order(len(histories)):
                history = histories[int(index)]
                self.result.records_visited += 1
                if not self._emitted(history):
                    continue
                seq = self._prepare(history)
                if seq is None:
                    continue
                batch.append((seq, history))
                if len(batch) == self.config.batch_size:
                    self._step(batch)
                    batch = []
            if batch:
                self._step(batch)
            self.result.epochs_completed = epoch + 1
            logger.info(
                f"Epoch {epoch + 1}/{self.config.epochs} done: {self.result.steps} steps, "
                f"last loss {self.result.final_loss:.5f}"
            )
        self.timeline.flush()
        self.model.zero_grad()
        return self.result


def train(
    histories: Sequence[UserHistory],
    model: GenerativeRecommender,
    config: TrainConfig,
    timeline: Optional[MetricTimeline] = None,
    corpus: Optional[Sequence[int]] = None,
) -> TrainResult:
    return Trainer(model, config, timeline, corpus).train(histories)


# ---------------------------------------------------------------- evaluation


def _query_hidden(model: GenerativeRecommender, seq: TokenSequence) -> np.ndarray:
    (hidden,) = model.encode([seq])
    return hidden.value


def _score_retrieval_example(
    model: GenerativeRecommender,
    example: HeldOutExample,
    corpus: Optional[np.ndarray],
    positive_mask: int,
) -> Tuple[int, float]:
    """``(rank, -log p(target))`` of one held-out target against its corpus."""
    task = model.config.task
    seq = history_sequence(example.history, task, model.config.encoder.max_seq_len, positive_mask)
    if example.available_items is not None:
        ids = np.arange(example.available_items, dtype=np.int64)
    elif corpus is not None:
        ids = corpus
    else:
        raise ValidationError("Evaluation needs a corpus or per-example available items")
    query = _query_hidden(model, seq)[-1]
    scores = model.score_items(query, ids)
    rank = target_rank(scores, ids, example.target_item)
    top = scores.max()
    log_norm = top + math.log(float(np.exp(scores - top).sum()))
    target_score = float(scores[np.flatnonzero(ids == example.target_item)[0]])
    return rank, log_norm - target_score


def _score_ranking_example(model: GenerativeRecommender, example: HeldOutExample) -> np.ndarray:
    """Per-task probabilities for the held-out engagement."""
    h = example.history
    timestamp = example.target_timestamp
    if timestamp is None:
        timestamp = h.timestamps[-1] if h.timestamps else 0
    seq = build_ranking_sequence(
        h.contents + [example.target_item],
        h.actions + [example.target_actions],
        h.timestamps + [timestamp],
        h.contextual,
        h.user_id,
    )
    seq = truncate_sequence(seq, model.config.encoder.max_seq_len)
    position = max(i for i, k in enumerate(seq.kinds) if k is TokenKind.CONTENT)
    hidden = _query_hidden(model, seq)
    return model.ranking_probabilities(hidden[position])[0]


def evaluate(
    model: GenerativeRecommender,
    examples: Sequence[HeldOutExample],
    ks: Sequence[int] = DEFAULT_KS,
    corpus: Optional[Sequence[int]] = None,
    positive_mask: int = DEFAULT_POSITIVE_MASK,
    threads: Optional[int] = None,
) -> MetricReport:
    """HR@K, NDCG@K and log perplexity (retrieval tasks) or per-task NE (ranking).

    Each example's query is the encoder output at the last history token,
    scored against the whole corpus or the example's available items.
    """
    report = MetricReport(examples_seen=len(examples))
    if not examples:
        logger.warning("Evaluation set is empty")
        return report

    if model.config.task == "ranking":
        probabilities = np.vstack(parallel_map(lambda e: _score_ranking_example(model, e), examples, threads))
        labels = np.asarray([e.target_actions for e in examples], dtype=np.int64)
        for bit in range(model.config.num_action_bits):
            y = (labels >> bit) & 1
            try:
                report.ne[f"task{bit}"] = normalized_entropy(probabilities[:, bit], y)
            except ValidationError as e:
                logger.warning(f"Skipping NE for task {bit}: {e}")
        logger.info(f"Ranking evaluation over {len(examples)} examples: NE={report.ne}")
        return report

    corpus_ids = None if corpus is None else np.unique(np.asarray(corpus, dtype=np.int64))
    scored = parallel_map(
        lambda e: _score_retrieval_example(model, e, corpus_ids, positive_mask), examples, threads
    )
    accumulator = RankingAccumulator(ks)
    for rank, _ in scored:
        accumulator.add_rank(rank)
    report.hr_at_k, report.ndcg_at_k = accumulator.summary()
    report.log_pplx = float(np.mean([nll for _, nll in scored]))
    logger.info(
        f"Evaluated {len(examples)} held-out targets: "
        + ", ".join(f"HR@{k}={v:.4f}" for k, v in report.hr_at_k.items())
        + f", log_pplx={report.log_pplx:.4f}"
    )
    return report
