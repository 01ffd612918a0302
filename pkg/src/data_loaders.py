"""Readers for event logs, MovieLens ratings and synthetic record files."""

import logging
from dataclasses import dataclass
from functools import partial
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .sequence_pipeline import Event, group_by_user, impression_stream, split_engagements
from .synthetic_data import DPConfig, availability_bound, split_train_test
from .utils.exceptions import DataFormatError
from .utils.file_utils import iter_jsonl, read_jsonl_header, require_file, write_jsonl

logger = logging.getLogger(__name__)

MOVIELENS_COLUMNS = ["user_id", "item_id", "rating", "timestamp"]


def load_events_jsonl(path: str) -> List[Event]:
    """Events from JSON lines ``{user_id, item_id, actions, ts, ctx?}``.

    A line with ``ctx: {feature_id, value_id}`` is a contextual event.
    """
    events = []
    for line_number, row in iter_jsonl(path):
        try:
            ctx = row.get("ctx")
            if ctx:
                events.append(
                    Event(
                        user_id=int(row["user_id"]),
                        timestamp=int(row["ts"]),
                        kind="contextual",
                        feature_id=int(ctx["feature_id"]),
                        value_id=int(ctx["value_id"]),
                    )
                )
            else:
                events.append(
                    Event(
                        user_id=int(row["user_id"]),
                        item_id=int(row["item_id"]),
                        actions=int(row.get("actions", 0)),
                        timestamp=int(row["ts"]),
                    )
                )
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise DataFormatError(f"{path}:{line_number}: bad event ({e})")
    logger.info(f"Loaded {len(events)} events from {path}")
    return events


def write_events_jsonl(path: str, events: List[Event]) -> int:
    def rows():
        for e in events:
            if e.is_contextual:
                yield {"user_id": e.user_id, "ts": e.timestamp, "ctx": {"feature_id": e.feature_id, "value_id": e.value_id}}
            else:
                yield {"user_id": e.user_id, "item_id": e.item_id, "actions": e.actions, "ts": e.timestamp}

    return write_jsonl(path, rows())


def _read_ratings_frame(path: str) -> pd.DataFrame:
    require_file(path, "ratings file")
    with open(path, "r", encoding="utf-8", errors="replace") as handle:
        first = handle.readline()
    try:
        if "::" in first:
            frame = pd.read_csv(path, sep="::", engine="python", header=None, names=MOVIELENS_COLUMNS)
        else:
            frame = pd.read_csv(path)
            rename = {"userId": "user_id", "movieId": "item_id", "itemId": "item_id"}
            frame = frame.rename(columns=rename)
            if not set(MOVIELENS_COLUMNS) <= set(frame.columns):
                frame = pd.read_csv(path, header=None, names=MOVIELENS_COLUMNS)
    except (pd.errors.ParserError, ValueError) as e:
        raise DataFormatError(f"Could not parse ratings file {path}: {e}")
    missing = set(MOVIELENS_COLUMNS) - set(frame.columns)
    if missing:
        raise DataFormatError(f"Ratings file {path} lacks columns {sorted(missing)}")
    return frame[MOVIELENS_COLUMNS]


def load_movielens(path: str, min_positive_rating: float = 1.0, strong_rating: float = 4.0) -> List[Event]:
    """Ratings (``user::item::rating::ts`` or CSV) as engagement events.

    Action bit 0 fires for ratings >= ``min_positive_rating``; bit 1 for
    ratings >= ``strong_rating``.
    """
    frame = _read_ratings_frame(path)
    try:
        frame = frame.astype({"user_id": "int64", "item_id": "int64", "rating": "float64", "timestamp": "int64"})
    except ValueError as e:
        raise DataFormatError(f"Non-numeric ratings row in {path}: {e}")
    frame = frame.sort_values(["user_id", "timestamp"], kind="stable")
    bit0 = (frame["rating"] >= min_positive_rating).astype("int64")
    bit1 = (frame["rating"] >= strong_rating).astype("int64") * 2
    frame = frame.assign(actions=bit0 + bit1)
    events = [
        Event(user_id=int(u), item_id=int(i), actions=int(a), timestamp=int(t))
        for u, i, a, t in frame[["user_id", "item_id", "actions", "timestamp"]].itertuples(index=False)
    ]
    logger.info(
        f"Loaded {len(events)} ratings for {frame['user_id'].nunique()} users "
        f"and {frame['item_id'].nunique()} items from {path}"
    )
    return events


@dataclass
class UserHistory:
    """Engagement columns of one user plus their contextual events."""

    user_id: int
    contents: List[int]
    actions: List[int]
    timestamps: List[int]
    contextual: List[Event]
    id_bound: Optional[int] = None

    def __len__(self) -> int:
        return len(self.contents)


@dataclass
class HeldOutExample:
    """A history prefix and the next engagement to predict."""

    history: UserHistory
    target_item: int
    target_actions: int = 1
    available_items: Optional[int] = None
    target_timestamp: Optional[int] = None


def user_histories(events: List[Event]) -> List[UserHistory]:
    histories = []
    for user, history in group_by_user(events).items():
        contents, actions, times, ctx = split_engagements(history)
        histories.append(UserHistory(user, contents, actions, times, ctx))
    return histories


def impression_histories(histories: List[UserHistory]) -> List[UserHistory]:
    """One history prefix per engagement, in global time order, for generative emission."""
    events: List[Event] = []
    bounds = {h.user_id: h.id_bound for h in histories}
    for h in histories:
        events.extend(
            Event(user_id=h.user_id, item_id=item, actions=action, timestamp=t)
            for item, action, t in zip(h.contents, h.actions, h.timestamps)
        )
        events.extend(h.contextual)
    prefixes = []
    for user, history in impression_stream(events):
        contents, actions, times, ctx = split_engagements(history)
        prefixes.append(UserHistory(user, contents, actions, times, ctx, bounds.get(user)))
    return prefixes


def leave_one_out_split(
    histories: List[UserHistory], min_length: int = 2
) -> Tuple[List[UserHistory], List[HeldOutExample]]:
    """Hold out each user's last engagement for testing.

    Training histories drop the held-out item; users shorter than
    ``min_length`` contribute training data only.
    """
    train, test = [], []
    for h in histories:
        if len(h) < min_length:
            train.append(h)
            continue
        cut = len(h) - 1
        last_time = h.timestamps[cut]
        prefix = UserHistory(
            h.user_id,
            h.contents[:cut],
            h.actions[:cut],
            h.timestamps[:cut],
            [e for e in h.contextual if e.timestamp <= last_time],
        )
        train.append(prefix)
        test.append(
            HeldOutExample(prefix, h.contents[cut], target_actions=h.actions[cut], target_timestamp=last_time)
        )
    logger.info(f"Leave-one-out split: {len(train)} training users, {len(test)} held-out targets")
    return train, test


def read_records_jsonl(path: str) -> Tuple[Optional[Dict[str, Any]], List[List[int]]]:
    """``(header, records)`` from a ``{"items": [...]}`` JSON-lines file."""
    header = read_jsonl_header(path)
    records = []
    for line_number, row in iter_jsonl(path):
        items = row.get("items") if isinstance(row, dict) else None
        if not isinstance(items, list):
            raise DataFormatError(f"{path}:{line_number}: record without an 'items' list")
        records.append([int(i) for i in items])
    return header, records


def write_records_jsonl(path: str, records: List[List[int]], header: Optional[Dict[str, Any]] = None) -> int:
    return write_jsonl(path, ({"items": list(r)} for r in records), header=header)


def histories_from_records(
    records: List[List[int]],
    start_index: int = 0,
    bound_fn: Optional[Callable[[int], int]] = None,
    positive_actions: int = 1,
) -> List[UserHistory]:
    """Wrap synthetic records as histories; every engagement is positive.

    Synthetic records carry no timestamps, so every token gets time 0.
    ``bound_fn`` maps a record's global index to its availability bound.
    """
    histories = []
    for offset, items in enumerate(records):
        index = start_index + offset
        histories.append(
            UserHistory(
                user_id=index,
                contents=list(items),
                actions=[positive_actions] * len(items),
                timestamps=[0] * len(items),
                contextual=[],
                id_bound=bound_fn(index) if bound_fn else None,
            )
        )
    return histories


def held_out_from_records(
    records: List[List[int]],
    start_index: int = 0,
    bound_fn: Optional[Callable[[int], int]] = None,
) -> List[HeldOutExample]:
    """Predict the last item of each record from the rest."""
    examples = []
    for history in histories_from_records(records, start_index, bound_fn):
        if len(history) < 2:
            continue
        prefix = UserHistory(
            history.user_id,
            history.contents[:-1],
            history.actions[:-1],
            history.timestamps[:-1],
            [],
            history.id_bound,
        )
        examples.append(
            HeldOutExample(
                prefix, history.contents[-1], history.actions[-1], history.id_bound, history.timestamps[-1]
            )
        )
    return examples


@dataclass
class DatasetSplit:
    """Training histories, held-out targets and the corpus to rank against.

    ``corpus`` is None when every held-out example carries its own
    availability bound.
    """

    train: List[UserHistory]
    test: List[HeldOutExample]
    corpus: Optional[np.ndarray]
    source: str


def _unique_items(histories: List[UserHistory], extra: Optional[List[int]] = None) -> np.ndarray:
    ids = [item for h in histories for item in h.contents] + list(extra or [])
    return np.unique(np.asarray(ids, dtype=np.int64))


def load_dataset(paths: Dict[str, Any], evaluation: Dict[str, Any]) -> DatasetSplit:
    """Resolve the configured data source into a train/test split.

    Event logs and ratings files use leave-one-out per user. Synthetic
    record files use the generator's train/test split and availability
    bounds unless ``evaluation.protocol`` is ``leave_one_out``.
    """
    min_history = int(evaluation.get("min_history", 2))
    if paths.get("events") or paths.get("ratings"):
        if paths.get("events"):
            require_file(paths["events"], "events file")
            events = load_events_jsonl(paths["events"])
        else:
            events = load_movielens(paths["ratings"], float(evaluation.get("min_positive_rating", 1.0)))
        train, test = leave_one_out_split(user_histories(events), min_history)
        corpus = _unique_items(train, [e.target_item for e in test])
        return DatasetSplit(train, test, corpus, "events")

    data_path = paths.get("data")
    if not data_path:
        raise DataFormatError("No data source configured (paths.data, paths.events or paths.ratings)")
    require_file(data_path, "records file")
    header, records = read_records_jsonl(data_path)

    if evaluation.get("protocol") == "leave_one_out":
        histories = histories_from_records(records)
        train, test = leave_one_out_split(histories, min_history)
        corpus = _unique_items(train, [e.target_item for e in test])
        return DatasetSplit(train, test, corpus, "records")

    dp_config = DPConfig.from_dict(header["config"]) if header and "config" in header else None
    bound_fn = partial(availability_bound, config=dp_config) if dp_config is not None else None
    if paths.get("test_data"):
        require_file(paths["test_data"], "test records file")
        _, test_records = read_records_jsonl(paths["test_data"])
        train_records = records
    else:
        fraction = dp_config.train_fraction if dp_config is not None else 0.9
        train_records, test_records = split_train_test(records, fraction)
    train = histories_from_records(train_records, 0, bound_fn)
    test = held_out_from_records(test_records, len(train_records), bound_fn)
    corpus = None if bound_fn is not None else _unique_items(train, [e.target_item for e in test])
    logger.info(f"Loaded {len(train)} training and {len(test)} test records from {data_path}")
    return DatasetSplit(train, test, corpus, "records")
