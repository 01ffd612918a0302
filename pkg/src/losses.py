"""Training losses: sampled softmax for retrieval, multi-task BCE for ranking."""

import logging
from typing import Optional, Sequence, Union

import numpy as np

from . import grad_tape as gt
from .embedding_store import EmbeddingTable
from .utils.exceptions import ValidationError

logger = logging.getLogger(__name__)


def sample_negatives(
    positive_ids: Sequence[int],
    num_negatives: int,
    rng: np.random.Generator,
    id_bound: Optional[int] = None,
    corpus: Optional[np.ndarray] = None,
    max_attempts: int = 100,
) -> np.ndarray:
    """``len(positive_ids) x num_negatives`` ids drawn uniformly from the corpus.

    The corpus is ``[0, id_bound)`` or, when given, the ids in ``corpus``.
    Draws that hit the row's positive are redrawn.
    """
    if num_negatives < 1:
        raise ValidationError(f"num_negatives must be >= 1, got {num_negatives}")
    positives = np.asarray(positive_ids, dtype=np.int64).reshape(-1, 1)
    if corpus is not None:
        pool: Optional[np.ndarray] = np.asarray(corpus, dtype=np.int64)
        distinct = np.unique(pool).size
    elif id_bound is not None:
        pool = None
        distinct = id_bound
    else:
        raise ValidationError("sample_negatives needs id_bound or corpus")
    if distinct < 2:
        raise ValidationError("Need at least two candidate ids to draw negatives")

    def draw(size):
        if pool is None:
            return rng.integers(0, id_bound, size=size)
        return pool[rng.integers(0, pool.size, size=size)]

    negatives = draw((positives.shape[0], num_negatives))
    for _ in range(max_attempts):
        hits = negatives == positives
        if not hits.any():
            break
        negatives[hits] = draw(int(hits.sum()))
    else:
        raise ValidationError("Could not draw negatives distinct from the positive")
    return negatives


def softmax_loss_from_logits(positive_logits: gt.Tensor, negative_logits: gt.Tensor) -> gt.Tensor:
    """Mean over rows of ``-log(e^pos / (e^pos + Σ e^neg))``.

    ``positive_logits`` is ``k``, ``negative_logits`` is ``k x K``.
    """
    k = positive_logits.shape[0]
    stacked = gt.concat([gt.reshape(positive_logits, (k, 1)), negative_logits], axis=1)
    per_row = gt.sub(gt.logsumexp(stacked, axis=1), positive_logits)
    return gt.mean_all(per_row)


def sampled_softmax_loss(
    hidden: gt.Tensor,
    positive_ids: Union[int, Sequence[int]],
    negative_ids: np.ndarray,
    table: EmbeddingTable,
) -> gt.Tensor:
    """Sampled softmax with raw dot-product logits against ``table`` rows.

    ``hidden`` is ``d`` or ``k x d``; ``negative_ids`` is ``K`` or ``k x K``.
    """
    if hidden.ndim == 1:
        hidden = gt.reshape(hidden, (1, hidden.shape[0]))
    k, d = hidden.shape
    positives = np.atleast_1d(np.asarray(positive_ids, dtype=np.int64))
    negatives = np.asarray(negative_ids, dtype=np.int64)
    if negatives.ndim == 1:
        negatives = np.broadcast_to(negatives, (k, negatives.size))
    if positives.size != k or negatives.shape[0] != k:
        raise ValidationError(f"{k} query rows but {positives.size} positives and {negatives.shape[0]} negative rows")
    if negatives.shape[1] < 1:
        raise ValidationError("sampled softmax needs at least one negative")
    if np.any(negatives == positives[:, None]):
        raise ValidationError("A negative id equals its positive; resample before calling")

    num_neg = negatives.shape[1]
    pos_emb = table.lookup(positives)
    neg_emb = gt.reshape(table.lookup(negatives.reshape(-1)), (k, num_neg, d))
    pos_logits = gt.sum_axis(gt.mul(hidden, pos_emb), axis=1)
    neg_logits = gt.reshape(
        gt.matmul(gt.reshape(hidden, (k, 1, d)), gt.transpose(neg_emb, (0, 2, 1))), (k, num_neg)
    )
    return softmax_loss_from_logits(pos_logits, neg_logits)


def labels_from_bitmasks(bitmasks: Sequence[int], num_tasks: int) -> np.ndarray:
    """``k x A`` 0/1 matrix of action bits."""
    masks = np.asarray(bitmasks, dtype=np.int64).reshape(-1, 1)
    return ((masks >> np.arange(num_tasks)) & 1).astype(np.float64)


def multitask_bce_loss(
    logits: gt.Tensor,
    labels: Sequence[int],
    task_weights: Optional[Sequence[float]] = None,
) -> gt.Tensor:
    """``mean_rows Σ_e w_e · BCE(σ(x_e), y_e)`` with ``labels`` as bitmasks.

    Uses ``softplus(x) - y·x``, the stable form of binary cross-entropy.
    """
    if logits.ndim == 1:
        logits = gt.reshape(logits, (1, logits.shape[0]))
    k, num_tasks = logits.shape
    weights = np.ones(num_tasks) if task_weights is None else np.asarray(task_weights, dtype=np.float64)
    if weights.shape != (num_tasks,):
        raise ValidationError(f"{weights.size} task weights for {num_tasks} tasks")
    if np.any(weights < 0):
        raise ValidationError("Task weights must be nonnegative")
    y = labels_from_bitmasks(labels, num_tasks)
    if y.shape[0] != k:
        raise ValidationError(f"{y.shape[0]} labels for {k} logit rows")
    per_event = gt.sub(gt.softplus(logits), gt.mul(logits, y))
    weighted = gt.mul(per_event, weights)
    return gt.scale(gt.sum_all(weighted), 1.0 / max(k, 1))
