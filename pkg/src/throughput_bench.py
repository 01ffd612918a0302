"""Candidate-scoring throughput: naive, batched and microbatched+cached modes."""

import logging
import time
from fractions import Fraction
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

from .hstu_encoder import FlopCounter
from .mfalcon_serving import ScoreRequest, mfalcon_score, naive_score
from .recommender_model import GenerativeRecommender
from .sequence_pipeline import TokenSequence, build_ranking_sequence
from .utils.exceptions import ValidationError

logger = logging.getLogger(__name__)

BENCH_MODES = ("naive", "batched", "microbatched_cached")
BENCH_COLUMNS = [
    "microbatch_size",
    "mode",
    "repetitions",
    "mean_seconds",
    "p99_seconds",
    "candidates_per_second",
    "attention_flops",
    "projection_flops",
    "total_flops",
]


def attention_flop_ratio(n: int, m: int) -> Fraction:
    """Lower bound ``m·n² / (n + m)²`` on naive over batched attention cost."""
    return Fraction(m * n * n, (n + m) ** 2)


def random_history(num_tokens: int, rng: np.random.Generator, num_items: int = 10000) -> TokenSequence:
    """Interleaved ranking history with ``num_tokens`` tokens (rounded down to even)."""
    n_c = num_tokens // 2
    contents = rng.integers(0, num_items, size=n_c).tolist()
    actions = rng.integers(0, 4, size=n_c).tolist()
    timestamps = np.cumsum(rng.integers(1, 3600, size=n_c)).tolist()
    return build_ranking_sequence(contents, actions, timestamps, user_id=0)


def _run_mode(
    mode: str, model: GenerativeRecommender, history: TokenSequence, candidates: List[int], b_m: int
) -> FlopCounter:
    counter = FlopCounter()
    if mode == "naive":
        naive_score(ScoreRequest(history, candidates, microbatch_size=1, cache_mode="off"), model, counter)
    elif mode == "batched":
        mfalcon_score(ScoreRequest(history, candidates, microbatch_size=b_m, cache_mode="off"), model, counter=counter)
    else:
        mfalcon_score(ScoreRequest(history, candidates, microbatch_size=b_m, cache_mode="request"), model, counter=counter)
    return counter


def throughput_bench(
    model: GenerativeRecommender,
    n: int,
    m: int,
    microbatch_sizes: Sequence[int],
    repetitions: int,
    seed: int = 0,
    timer: Callable[[], float] = time.perf_counter,
) -> pd.DataFrame:
    """One row per (b_m, mode) with wall-clock and counted flops.

    ``n`` is the history length in tokens and ``m`` the number of candidates.
    Flops are counted on the first repetition; they do not vary between runs.
    """
    if repetitions < 0:
        raise ValidationError(f"repetitions must be >= 0, got {repetitions}")
    if m < 1:
        raise ValidationError(f"Need at least one candidate, got m={m}")
    if repetitions == 0:
        return pd.DataFrame(columns=BENCH_COLUMNS)

    rng = np.random.default_rng(seed)
    history = random_history(n, rng)
    candidates = rng.integers(0, 10000, size=m).tolist()
    rows = []
    for b_m in microbatch_sizes:
        if b_m < 1:
            raise ValidationError(f"microbatch sizes must be >= 1, got {b_m}")
        for mode in BENCH_MODES:
            timings = []
            counter: Optional[FlopCounter] = None
            for _ in range(repetitions):
                start = timer()
                run_counter = _run_mode(mode, model, history, candidates, b_m)
                timings.append(timer() - start)
                counter = counter or run_counter
            mean_seconds = float(np.mean(timings))
            rows.append(
                {
                    "microbatch_size": int(b_m),
                    "mode": mode,
                    "repetitions": repetitions,
                    "mean_seconds": mean_seconds,
                    "p99_seconds": float(np.percentile(timings, 99)),
                    "candidates_per_second": m / mean_seconds if mean_seconds > 0 else float("inf"),
                    "attention_flops": counter.attention,
                    "projection_flops": counter.projection,
                    "total_flops": counter.total,
                }
            )
            logger.debug(f"bench b_m={b_m} mode={mode}: {mean_seconds * 1000:.2f} ms")
    table = pd.DataFrame(rows, columns=BENCH_COLUMNS)
    logger.info(f"Benchmarked {len(microbatch_sizes)} microbatch sizes x {len(BENCH_MODES)} modes")
    return table


def plot_throughput(table: pd.DataFrame, output_path: str) -> None:
    """Candidates per second against b_m, one line per mode."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, group in table.groupby("mode"):
        ax.plot(group["microbatch_size"], group["candidates_per_second"], marker="o", label=mode)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("microbatch size b_m")
    ax.set_ylabel("candidates / second")
    ax.legend()
    fig.tight_layout()
    fig.savefig(output_path)
    plt.close(fig)
    logger.info(f"Wrote throughput plot to {output_path}")
