"""Event logs to token sequences for ranking, retrieval and next-content tasks.

A user's engagements become a single time series. Contextual features are
run-length compressed per feature and merged in by timestamp. Ranking
interleaves content and action tokens; retrieval uses one combined token per
engagement.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .utils.exceptions import ValidationError

logger = logging.getLogger(__name__)

TASKS = ("ranking", "retrieval", "next_content")
DEFAULT_POSITIVE_MASK = 0b1


class TokenKind(Enum):
    """What a position in a token sequence represents."""

    CONTENT = "content"
    ACTION = "action"
    CONTEXTUAL = "contextual"


def contextual_key(feature_id: int, value_id: int) -> int:
    """Pack a (feature, value) pair into one id for the contextual table."""
    return (int(feature_id) << 32) | (int(value_id) & 0xFFFFFFFF)


@dataclass
class Event:
    """One logged user event: an engagement or a contextual feature value."""

    user_id: int
    item_id: int = 0
    actions: int = 0
    timestamp: int = 0
    kind: str = "engagement"
    feature_id: Optional[int] = None
    value_id: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in ("engagement", "contextual"):
            raise ValidationError(f"Unknown event kind '{self.kind}'")
        if self.kind == "contextual" and (self.feature_id is None or self.value_id is None):
            raise ValidationError("Contextual events need feature_id and value_id")

    @property
    def is_contextual(self) -> bool:
        return self.kind == "contextual"


@dataclass
class TokenSequence:
    """Model input for one user: parallel per-position lists.

    ``targets[i]`` is None where supervision is undefined. For ranking it is
    the action bitmask of the engagement; for retrieval and next-content it is
    the id of the next content. ``actions`` carries the action bitmask folded
    into combined retrieval tokens and the bitmask of action tokens.
    """

    token_ids: List[int] = field(default_factory=list)
    kinds: List[TokenKind] = field(default_factory=list)
    timestamps: List[int] = field(default_factory=list)
    targets: List[Optional[int]] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    task: str = "ranking"
    user_id: Optional[int] = None

    def __len__(self) -> int:
        return len(self.token_ids)

    def append(
        self, token_id: int, kind: TokenKind, timestamp: int, target: Optional[int], actions: int = 0
    ) -> None:
        self.token_ids.append(int(token_id))
        self.kinds.append(kind)
        self.timestamps.append(int(timestamp))
        self.targets.append(target)
        self.actions.append(int(actions))

    def target_positions(self) -> List[int]:
        return [i for i, t in enumerate(self.targets) if t is not None]

    def content_ids(self) -> List[int]:
        return [t for t, k in zip(self.token_ids, self.kinds) if k is TokenKind.CONTENT]


def _stable_time_order(events: Sequence[Event]) -> List[Event]:
    return [e for _, e in sorted(enumerate(events), key=lambda pair: (pair[1].timestamp, pair[0]))]


def sequentialize(events: Sequence[Event]) -> List[Event]:
    """Merge one user's events into the main time series.

    Within each contextual feature, consecutive equal values collapse to the
    earliest occurrence. On equal timestamps contextual events come first.
    """
    ordered = _stable_time_order(events)
    kept: List[Tuple[int, int, int, Event]] = []
    last_value: Dict[int, int] = {}
    for index, event in enumerate(ordered):
        if event.is_contextual:
            if last_value.get(event.feature_id) == event.value_id:
                continue
            last_value[event.feature_id] = event.value_id
            kept.append((event.timestamp, 0, index, event))
        else:
            kept.append((event.timestamp, 1, index, event))
    kept.sort(key=lambda entry: entry[:3])
    return [entry[3] for entry in kept]


def _check_lengths(contents: Sequence[int], actions: Sequence[int], timestamps: Optional[Sequence[int]]) -> List[int]:
    if len(contents) != len(actions):
        raise ValidationError(f"{len(contents)} contents but {len(actions)} actions")
    if timestamps is None:
        return list(range(len(contents)))
    if len(timestamps) != len(contents):
        raise ValidationError(f"{len(contents)} contents but {len(timestamps)} timestamps")
    return [int(t) for t in timestamps]


def _contextual_before(
    seq: TokenSequence, contextual: List[Event], cursor: int, timestamp: Optional[int]
) -> int:
    """Emit contextual tokens at or before ``timestamp`` (all remaining when None)."""
    while cursor < len(contextual) and (timestamp is None or contextual[cursor].timestamp <= timestamp):
        event = contextual[cursor]
        seq.append(contextual_key(event.feature_id, event.value_id), TokenKind.CONTEXTUAL, event.timestamp, None)
        cursor += 1
    return cursor


def _prepare_contextual(contextual: Optional[Sequence[Event]]) -> List[Event]:
    if not contextual:
        return []
    return [e for e in sequentialize(contextual) if e.is_contextual]


def build_ranking_sequence(
    contents: Sequence[int],
    actions: Sequence[int],
    timestamps: Optional[Sequence[int]] = None,
    contextual: Optional[Sequence[Event]] = None,
    user_id: Optional[int] = None,
) -> TokenSequence:
    """Interleave ``Φ0, a0, Φ1, a1, ...`` with targets ``a0, ∅, a1, ∅, ...``."""
    times = _check_lengths(contents, actions, timestamps)
    ctx = _prepare_contextual(contextual)
    seq = TokenSequence(task="ranking", user_id=user_id)
    cursor = 0
    for item, action, t in zip(contents, actions, times):
        cursor = _contextual_before(seq, ctx, cursor, t)
        seq.append(item, TokenKind.CONTENT, t, int(action))
        seq.append(action, TokenKind.ACTION, t, None, actions=action)
    _contextual_before(seq, ctx, cursor, None)
    return seq


def build_retrieval_sequence(
    contents: Sequence[int],
    actions: Sequence[int],
    timestamps: Optional[Sequence[int]] = None,
    positive_mask: int = DEFAULT_POSITIVE_MASK,
    contextual: Optional[Sequence[Event]] = None,
    user_id: Optional[int] = None,
) -> TokenSequence:
    """One combined token per engagement; target is the next content if it was positive."""
    times = _check_lengths(contents, actions, timestamps)
    ctx = _prepare_contextual(contextual)
    seq = TokenSequence(task="retrieval", user_id=user_id)
    cursor = 0
    n = len(contents)
    for i, (item, action, t) in enumerate(zip(contents, actions, times)):
        cursor = _contextual_before(seq, ctx, cursor, t)
        target = None
        if i + 1 < n and int(actions[i + 1]) & positive_mask:
            target = int(contents[i + 1])
        seq.append(item, TokenKind.CONTENT, t, target, actions=action)
    _contextual_before(seq, ctx, cursor, None)
    return seq


def build_next_content_sequence(
    contents: Sequence[int],
    actions: Sequence[int],
    timestamps: Optional[Sequence[int]] = None,
    contextual: Optional[Sequence[Event]] = None,
    user_id: Optional[int] = None,
) -> TokenSequence:
    """Interleaved like ranking; the token after ``a_i`` must predict ``Φ_{i+1}``."""
    times = _check_lengths(contents, actions, timestamps)
    ctx = _prepare_contextual(contextual)
    seq = TokenSequence(task="next_content", user_id=user_id)
    cursor = 0
    n = len(contents)
    for i, (item, action, t) in enumerate(zip(contents, actions, times)):
        cursor = _contextual_before(seq, ctx, cursor, t)
        seq.append(item, TokenKind.CONTENT, t, None)
        target = int(contents[i + 1]) if i + 1 < n else None
        seq.append(action, TokenKind.ACTION, t, target, actions=action)
    _contextual_before(seq, ctx, cursor, None)
    return seq


def build_sequence(
    task: str,
    contents: Sequence[int],
    actions: Sequence[int],
    timestamps: Optional[Sequence[int]] = None,
    positive_mask: int = DEFAULT_POSITIVE_MASK,
    contextual: Optional[Sequence[Event]] = None,
    user_id: Optional[int] = None,
) -> TokenSequence:
    """Dispatch to the builder for ``task``."""
    if task == "ranking":
        return build_ranking_sequence(contents, actions, timestamps, contextual, user_id)
    if task == "retrieval":
        return build_retrieval_sequence(contents, actions, timestamps, positive_mask, contextual, user_id)
    if task == "next_content":
        return build_next_content_sequence(contents, actions, timestamps, contextual, user_id)
    raise ValidationError(f"Unknown task '{task}'. Valid: {TASKS}")


def deinterleave_ranking(seq: TokenSequence) -> Tuple[List[int], List[int], List[int]]:
    """Recover ``(contents, actions, timestamps)`` from an interleaved sequence."""
    contents: List[int] = []
    actions: List[int] = []
    times: List[int] = []
    for token, kind, t in zip(seq.token_ids, seq.kinds, seq.timestamps):
        if kind is TokenKind.CONTENT:
            contents.append(token)
            times.append(t)
        elif kind is TokenKind.ACTION:
            actions.append(token)
    return contents, actions, times


def split_engagements(events: Sequence[Event]) -> Tuple[List[int], List[int], List[int], List[Event]]:
    """Split a sequentialized history into engagement columns and contextual events."""
    contents, actions, times, contextual = [], [], [], []
    for event in events:
        if event.is_contextual:
            contextual.append(event)
        else:
            contents.append(int(event.item_id))
            actions.append(int(event.actions))
            times.append(int(event.timestamp))
    return contents, actions, times, contextual


def group_by_user(events: Iterable[Event]) -> Dict[int, List[Event]]:
    """Sequentialized history per user, users in first-seen order."""
    grouped: Dict[int, List[Event]] = {}
    for event in events:
        grouped.setdefault(int(event.user_id), []).append(event)
    return {user: sequentialize(history) for user, history in grouped.items()}


def impression_stream(events: Iterable[Event]) -> Iterator[Tuple[int, List[Event]]]:
    """Yield ``(user_id, history)`` at every engagement, in global time order.

    ``history`` is the user's sequentialized events up to and including the
    engagement, which is what an impression-level logging pipeline emits.
    """
    histories = group_by_user(events)
    impressions = []
    for user, history in histories.items():
        for index, event in enumerate(history):
            if not event.is_contextual:
                impressions.append((event.timestamp, user, index))
    impressions.sort()
    for _, user, index in impressions:
        yield user, histories[user][: index + 1]


def generative_emission_sampler(n: int, rng: np.random.Generator, c: float = 1.0) -> bool:
    """Emit a user's sequence with probability ``min(1, c / n)``."""
    if n < 1:
        raise ValidationError(f"Sequence length must be >= 1, got {n}")
    if c <= 0:
        return False
    return bool(rng.random() < min(1.0, c / n))


def count_training_flops(lengths: Iterable[int], d: int, d_ff: int, mode: str = "impression") -> Fraction:
    """Impression cost ``Σ n(n²d + n·d_ff·d)``; generative cost ``Σ (1/n)·n(n²d + n·d²)``.

    The generative form sizes the pointwise layer by ``d²`` and ignores ``d_ff``.
    Returned as an exact ``Fraction``.
    """
    if mode not in ("impression", "generative"):
        raise ValidationError(f"Unknown flop mode '{mode}'")
    total = Fraction(0)
    for n in lengths:
        n = int(n)
        if n <= 0:
            continue
        if mode == "generative":
            total += Fraction(n * (n * n * d + n * d * d), n)
        else:
            total += Fraction(n * (n * n * d + n * d_ff * d))
    return total
