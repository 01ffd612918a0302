"""Evaluation metrics: HR@K, NDCG@K, normalized entropy and log perplexity."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .utils.exceptions import ValidationError

logger = logging.getLogger(__name__)

DEFAULT_KS = (10, 50, 200)


def target_rank(scores: np.ndarray, item_ids: np.ndarray, target_id: int) -> int:
    """1-based rank of ``target_id``; equal scores with smaller ids rank ahead."""
    scores = np.asarray(scores)
    item_ids = np.asarray(item_ids)
    where = np.flatnonzero(item_ids == target_id)
    if where.size == 0:
        raise ValidationError(f"Target {target_id} is not in the scored corpus")
    target_score = scores[where[0]]
    greater = int(np.count_nonzero(scores > target_score))
    tied_ahead = int(np.count_nonzero((scores == target_score) & (item_ids < target_id)))
    return 1 + greater + tied_ahead


def hr_ndcg_from_rank(rank: int, ks: Sequence[int]) -> Tuple[Dict[int, float], Dict[int, float]]:
    hr = {k: 1.0 if rank <= k else 0.0 for k in ks}
    ndcg = {k: 1.0 / math.log2(rank + 1) if rank <= k else 0.0 for k in ks}
    return hr, ndcg


def hr_ndcg(
    scores: np.ndarray, item_ids: np.ndarray, target_id: int, ks: Sequence[int] = DEFAULT_KS
) -> Tuple[Dict[int, float], Dict[int, float]]:
    """Hit rate and NDCG at each K for one held-out target."""
    return hr_ndcg_from_rank(target_rank(scores, item_ids, target_id), ks)


def normalized_entropy(predictions: Sequence[float], labels: Sequence[float], clip: float = 1e-15) -> float:
    """Cross-entropy divided by the entropy of the label base rate."""
    p = np.clip(np.asarray(predictions, dtype=np.float64), clip, 1.0 - clip)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise ValidationError(f"{p.size} predictions for {y.size} labels")
    base = y.mean()
    if base <= 0.0 or base >= 1.0:
        raise ValidationError(f"Normalized entropy undefined for base rate {base}")
    cross = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    entropy = -(base * math.log(base) + (1.0 - base) * math.log(1.0 - base))
    return float(cross / entropy)


def log_perplexity(distributions: np.ndarray, targets: Sequence[int]) -> float:
    """Mean ``-ln p(target)`` over rows of a probability matrix."""
    probs = np.atleast_2d(np.asarray(distributions, dtype=np.float64))
    idx = np.asarray(targets, dtype=np.int64)
    if idx.size != probs.shape[0]:
        raise ValidationError(f"{idx.size} targets for {probs.shape[0]} distributions")
    picked = probs[np.arange(idx.size), idx]
    with np.errstate(divide="ignore"):
        return float(np.mean(-np.log(picked)))


def log_perplexity_from_logits(logits: np.ndarray, targets: Sequence[int]) -> float:
    """Same as ``log_perplexity`` with a softmax applied to each row first."""
    x = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    idx = np.asarray(targets, dtype=np.int64)
    row_max = x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x - row_max).sum(axis=1)) + row_max[:, 0]
    return float(np.mean(lse - x[np.arange(idx.size), idx]))


@dataclass
class MetricReport:
    hr_at_k: Dict[int, float] = field(default_factory=dict)
    ndcg_at_k: Dict[int, float] = field(default_factory=dict)
    ne: Dict[str, float] = field(default_factory=dict)
    log_pplx: float = float("nan")
    examples_seen: int = 0

    def to_dict(self) -> Dict:
        return {
            "hr_at_k": {str(k): v for k, v in sorted(self.hr_at_k.items())},
            "ndcg_at_k": {str(k): v for k, v in sorted(self.ndcg_at_k.items())},
            "ne": dict(self.ne),
            "log_pplx": None if math.isnan(self.log_pplx) else self.log_pplx,
            "examples_seen": self.examples_seen,
        }


class RankingAccumulator:
    """Running means of HR@K and NDCG@K over held-out targets."""

    def __init__(self, ks: Sequence[int] = DEFAULT_KS) -> None:
        self.ks = sorted(int(k) for k in ks)
        self.ranks: List[int] = []

    def add_rank(self, rank: int) -> None:
        self.ranks.append(int(rank))

    def add(self, scores: np.ndarray, item_ids: np.ndarray, target_id: int) -> int:
        rank = target_rank(scores, item_ids, target_id)
        self.add_rank(rank)
        return rank

    def summary(self) -> Tuple[Dict[int, float], Dict[int, float]]:
        if not self.ranks:
            logger.warning("No held-out targets were scored; ranking metrics are empty")
            return {k: 0.0 for k in self.ks}, {k: 0.0 for k in self.ks}
        ranks = np.asarray(self.ranks)
        hr = {k: float(np.mean(ranks <= k)) for k in self.ks}
        ndcg = {k: float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1), 0.0))) for k in self.ks}
        return hr, ndcg
