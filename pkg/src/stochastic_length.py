"""Stochastic Length: randomized truncation of long user histories.

A history of ``n`` contents is kept whole when ``n <= L* = floor(N^(α/2))``.
Longer histories are kept whole with probability ``N^α / n²`` and otherwise
cut to ``L*`` items chosen by one of three selection methods.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .utils.exceptions import DataFormatError, ValidationError
from .utils.file_utils import require_file

logger = logging.getLogger(__name__)

SELECTION_METHODS = ("greedy", "random", "feature_weighted")


@dataclass
class SLPolicy:
    alpha: float = 1.7
    max_length: int = 1024
    method: str = "feature_weighted"

    def __post_init__(self) -> None:
        if not (1.0 < self.alpha <= 2.0):
            raise ValidationError(f"Stochastic length alpha must be in (1, 2], got {self.alpha}")
        if self.max_length < 1:
            raise ValidationError(f"max_length must be >= 1, got {self.max_length}")
        if self.method not in SELECTION_METHODS:
            raise ValidationError(f"Invalid selection method '{self.method}'. Valid: {SELECTION_METHODS}")

    @property
    def threshold(self) -> int:
        """``L* = floor(N^(α/2))``, at least 1."""
        value = self.max_length ** (self.alpha / 2.0)
        # guard against 4095.9999 style float error on exact powers
        rounded = round(value)
        threshold = rounded if abs(value - rounded) < 1e-9 else math.floor(value)
        return max(1, int(threshold))

    def keep_full_probability(self, n: int) -> float:
        if n <= self.threshold:
            return 1.0
        return min(1.0, max(0.0, self.max_length**self.alpha / float(n * n)))

    @classmethod
    def from_dict(cls, data: Dict) -> "SLPolicy":
        return cls(
            alpha=float(data.get("alpha", 1.7)),
            max_length=int(data.get("max_length", 1024)),
            method=data.get("method", "feature_weighted"),
        )


@dataclass
class SLDecision:
    """Outcome of ``sl_decide``: keep everything, or subsample to ``length``."""

    subsample: bool
    length: int

    @property
    def full(self) -> bool:
        return not self.subsample


def sl_decide(n: int, policy: SLPolicy, rng: np.random.Generator) -> SLDecision:
    """Draw the Stochastic Length branch for a history of ``n`` contents."""
    if n < 1:
        raise ValidationError(f"Sequence length must be >= 1, got {n}")
    if n <= policy.threshold:
        return SLDecision(subsample=False, length=n)
    if rng.random() < policy.keep_full_probability(n):
        return SLDecision(subsample=False, length=n)
    return SLDecision(subsample=True, length=policy.threshold)


def select_subsequence(
    seq: Sequence,
    length: int,
    method: str,
    timestamps: Sequence[int],
    rng: np.random.Generator,
    now: Optional[int] = None,
) -> List[int]:
    """Indices of ``length`` kept items, ascending so relative order is preserved.

    Recency feature ``f_i = now - t_i`` (``now`` defaults to the last
    timestamp). ``greedy`` keeps the smallest ``f_i``; ``random`` samples
    uniformly; ``feature_weighted`` samples sequentially without replacement
    with weight ``max(0, 1 - f_i / Σ f)`` renormalized after each draw.
    """
    n = len(seq)
    if length > n:
        raise ValidationError(f"Cannot select {length} items from a sequence of {n}")
    if len(timestamps) != n:
        raise ValidationError(f"{len(timestamps)} timestamps for {n} items")
    if method not in SELECTION_METHODS:
        raise ValidationError(f"Invalid selection method '{method}'. Valid: {SELECTION_METHODS}")
    if length == n:
        return list(range(n))
    if length <= 0:
        return []

    times = np.asarray(timestamps, dtype=np.float64)
    reference = times.max() if now is None else float(now)
    recency = reference - times

    if method == "greedy":
        # stable sort: among equal recency, later positions win
        order = np.argsort(recency[::-1], kind="stable")[:length]
        chosen = (n - 1) - order
    elif method == "random":
        chosen = rng.choice(n, size=length, replace=False)
    else:
        chosen = _feature_weighted_draw(recency, length, rng)
    return sorted(int(i) for i in chosen)


def _feature_weighted_draw(recency: np.ndarray, length: int, rng: np.random.Generator) -> List[int]:
    total = recency.sum()
    if total > 0:
        weights = np.clip(1.0 - recency / total, 0.0, None)
    else:
        weights = np.ones_like(recency)
    available = np.ones(recency.size, dtype=bool)
    chosen = []
    for _ in range(length):
        w = np.where(available, weights, 0.0)
        mass = w.sum()
        if mass <= 0:
            # every remaining weight clamped to zero: fall back to uniform
            w = available.astype(np.float64)
            mass = w.sum()
        pick = int(rng.choice(recency.size, p=w / mass))
        chosen.append(pick)
        available[pick] = False
    return chosen


def apply_stochastic_length(
    items: Sequence,
    timestamps: Sequence[int],
    policy: SLPolicy,
    rng: np.random.Generator,
) -> Tuple[List[int], SLDecision]:
    """Decide and select in one step; returns kept indices and the decision."""
    decision = sl_decide(len(items), policy, rng)
    if decision.full:
        return list(range(len(items))), decision
    kept = select_subsequence(items, decision.length, policy.method, timestamps, rng)
    return kept, decision


def sparsity_metrics(lengths: Sequence[int], max_length: int) -> Tuple[float, float]:
    """``(1 - mean(n)/N, 1 - mean(n²)/N²)``."""
    if max_length < 1:
        raise ValidationError(f"max_length must be >= 1, got {max_length}")
    arr = np.asarray(lengths, dtype=np.float64)
    if arr.size == 0:
        return 1.0, 1.0
    if np.any(arr > max_length):
        raise ValidationError(f"Length above max_length {max_length}")
    sparsity = 1.0 - arr.mean() / max_length
    s2 = 1.0 - np.mean(arr * arr) / (max_length * max_length)
    return float(sparsity), float(s2)


def expected_post_sl_lengths(histogram: Dict[int, int], policy: SLPolicy) -> Tuple[float, float]:
    """Expected ``(E[n'], E[n'^2])`` after SL over a length histogram."""
    total = sum(histogram.values())
    if total == 0:
        return 0.0, 0.0
    first = second = 0.0
    cut = policy.threshold
    for n, count in histogram.items():
        n = min(int(n), policy.max_length)
        keep = policy.keep_full_probability(n)
        first += count * (keep * n + (1.0 - keep) * cut)
        second += count * (keep * n * n + (1.0 - keep) * cut * cut)
    return first / total, second / total


def load_length_histogram(path: str) -> Dict[int, int]:
    """Read JSON lines of ``{"length": n, "count": c}``; repeated lengths add up."""
    require_file(path, "length histogram")
    histogram: Dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                row = json.loads(stripped)
                length, count = int(row["length"]), int(row["count"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataFormatError(f"{path}:{line_number}: bad histogram row ({e})")
            if length < 0 or count < 0:
                raise DataFormatError(f"{path}:{line_number}: negative length or count")
            histogram[length] = histogram.get(length, 0) + count
    return histogram


def sl_report_table(
    histogram: Dict[int, int], alphas: Sequence[float], max_lengths: Sequence[int]
) -> pd.DataFrame:
    """Sparsity and s2 after SL for every (alpha, max length) pair.

    Lengths above a max length are truncated to it first, as the trainer does.
    """
    rows = []
    total = sum(histogram.values())
    for max_length in max_lengths:
        base_first = base_second = 0.0
        for n, count in histogram.items():
            m = min(int(n), max_length)
            base_first += count * m
            base_second += count * m * m
        for alpha in alphas:
            policy = SLPolicy(alpha=alpha, max_length=max_length)
            first, second = expected_post_sl_lengths(histogram, policy)
            rows.append(
                {
                    "alpha": alpha,
                    "max_length": max_length,
                    "threshold": policy.threshold,
                    "sparsity": 1.0 - first / max_length if total else 1.0,
                    "s2": 1.0 - second / (max_length * max_length) if total else 1.0,
                    "base_sparsity": 1.0 - base_first / (total * max_length) if total else 1.0,
                    "attention_cost_ratio": second / (base_second / total) if total and base_second else 0.0,
                }
            )
    table = pd.DataFrame(rows)
    logger.debug(f"Built SL report with {len(table)} rows")
    return table


def plot_sl_report(table: pd.DataFrame, output_path: str) -> None:
    """Line plot of sparsity against alpha, one line per max length."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for max_length, group in table.groupby("max_length"):
        ax.plot(group["alpha"], group["sparsity"], marker="o", label=f"N={max_length}")
    ax.set_xlabel("alpha")
    ax.set_ylabel("sparsity")
    ax.legend()
    fig.tight_layout()
    fig.savefig(output_path)
    plt.close(fig)
    logger.info(f"Wrote SL plot to {output_path}")
