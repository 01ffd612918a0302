"""Tests for event, ratings and record file loading."""

import json

import numpy as np
import pytest

from src.data_loaders import (
    held_out_from_records,
    histories_from_records,
    impression_histories,
    leave_one_out_split,
    load_dataset,
    load_events_jsonl,
    load_movielens,
    read_records_jsonl,
    user_histories,
    write_events_jsonl,
    write_records_jsonl,
)
from src.sequence_pipeline import Event
from src.synthetic_data import DPConfig, availability_bound, write_dp_dataset
from src.utils.exceptions import DataFormatError, FileProcessingError
from src.utils.file_utils import file_checksum, read_id_lines, read_jsonl_header


@pytest.fixture
def events_file(tmp_path):
    rows = [
        {"user_id": 1, "item_id": 10, "actions": 1, "ts": 100},
        {"user_id": 2, "item_id": 11, "actions": 0, "ts": 105},
        {"user_id": 1, "ts": 110, "ctx": {"feature_id": 3, "value_id": 7}},
        {"user_id": 1, "item_id": 12, "actions": 3, "ts": 120},
        {"user_id": 2, "item_id": 10, "actions": 1, "ts": 130},
        {"user_id": 1, "item_id": 13, "actions": 1, "ts": 140},
    ]
    path = tmp_path / "events.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def small_dp_config():
    return DPConfig(num_items=50, num_categories=5, num_records=20, record_length=8, seed=3)


class TestEventLoading:
    """Test cases for JSON-lines event logs."""

    def test_parses_engagements_and_context(self, events_file):
        events = load_events_jsonl(str(events_file))
        assert len(events) == 6
        ctx = [e for e in events if e.is_contextual]
        assert len(ctx) == 1
        assert (ctx[0].feature_id, ctx[0].value_id) == (3, 7)
        assert events[3].actions == 3

    def test_bad_row_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"user_id": 1, "item_id": 2, "ts": 5}\n{"user_id": 1, "item_id": 3}\n')
        with pytest.raises(DataFormatError, match=":2:"):
            load_events_jsonl(str(path))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text("{not json}\n")
        with pytest.raises(DataFormatError, match="invalid JSON"):
            load_events_jsonl(str(path))

    def test_write_then_load(self, events_file, tmp_path):
        events = load_events_jsonl(str(events_file))
        out = tmp_path / "copy.jsonl"
        assert write_events_jsonl(str(out), events) == 6
        assert load_events_jsonl(str(out)) == events


class TestMovieLens:
    """Test cases for ratings files."""

    def test_double_colon_format(self, tmp_path):
        path = tmp_path / "ratings.dat"
        path.write_text("1::10::5::100\n1::11::3::90\n2::10::1::50\n")
        events = load_movielens(str(path), min_positive_rating=3.0)
        assert [(e.user_id, e.item_id, e.actions) for e in events] == [(1, 11, 1), (1, 10, 3), (2, 10, 0)]

    def test_csv_with_header(self, tmp_path):
        path = tmp_path / "ratings.csv"
        path.write_text("userId,movieId,rating,timestamp\n4,7,4.5,20\n4,8,2.0,10\n")
        events = load_movielens(str(path))
        assert [e.item_id for e in events] == [8, 7]
        assert [e.actions for e in events] == [1, 3]

    def test_non_numeric_rows(self, tmp_path):
        path = tmp_path / "ratings.csv"
        path.write_text("a,b\nx,y\n")
        with pytest.raises(DataFormatError):
            load_movielens(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileProcessingError, match="does not exist"):
            load_movielens(str(tmp_path / "none.dat"))


class TestHistories:
    """Test cases for grouping and splitting."""

    def test_user_histories(self, events_file):
        histories = {h.user_id: h for h in user_histories(load_events_jsonl(str(events_file)))}
        assert histories[1].contents == [10, 12, 13]
        assert histories[1].timestamps == [100, 120, 140]
        assert len(histories[1].contextual) == 1
        assert histories[2].actions == [0, 1]

    def test_leave_one_out(self, events_file):
        histories = user_histories(load_events_jsonl(str(events_file)))
        train, test = leave_one_out_split(histories, min_length=3)
        assert len(train) == 2
        assert len(test) == 1
        assert test[0].target_item == 13
        assert test[0].target_actions == 1
        assert test[0].history.contents == [10, 12]
        assert test[0].target_timestamp == 140
        assert max(test[0].history.timestamps) < 140

    def test_impression_histories_follow_global_time(self, events_file):
        prefixes = impression_histories(user_histories(load_events_jsonl(str(events_file))))
        assert [(p.user_id, len(p)) for p in prefixes] == [(1, 1), (2, 1), (1, 2), (2, 2), (1, 3)]
        assert len(prefixes[2].contextual) == 1
        assert prefixes[0].contextual == []

    def test_records_as_histories(self):
        histories = histories_from_records([[1, 2], [3]], start_index=5, bound_fn=lambda i: 10 * i)
        assert [h.user_id for h in histories] == [5, 6]
        assert histories[0].actions == [1, 1]
        assert histories[0].timestamps == [0, 0]
        assert histories[1].id_bound == 60

    def test_held_out_from_records(self):
        examples = held_out_from_records([[4, 5, 6], [7]], bound_fn=lambda i: 100)
        assert len(examples) == 1
        assert examples[0].target_item == 6
        assert examples[0].history.contents == [4, 5]
        assert examples[0].available_items == 100


class TestRecordFiles:
    """Test cases for synthetic record files and helpers."""

    def test_header_and_records(self, tmp_path):
        path = tmp_path / "records.jsonl"
        write_records_jsonl(str(path), [[1, 2], [3]], header={"generator": "test"})
        header, records = read_records_jsonl(str(path))
        assert header == {"generator": "test"}
        assert records == [[1, 2], [3]]

    def test_record_without_items(self, tmp_path):
        path = tmp_path / "records.jsonl"
        path.write_text('{"values": [1]}\n')
        with pytest.raises(DataFormatError, match="items"):
            read_records_jsonl(str(path))

    def test_header_absent(self, tmp_path):
        path = tmp_path / "plain.jsonl"
        path.write_text('{"items": [1]}\n')
        assert read_jsonl_header(str(path)) is None

    def test_same_rows_same_checksum(self, tmp_path):
        first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_records_jsonl(str(first), [[1, 2]])
        write_records_jsonl(str(second), [[1, 2]])
        assert file_checksum(str(first)) == file_checksum(str(second))

    def test_id_lines(self, tmp_path):
        path = tmp_path / "candidates.txt"
        path.write_text("3\n\n17\n")
        assert read_id_lines(str(path)) == [3, 17]


class TestLoadDataset:
    """Test cases for resolving configured data sources."""

    def test_events_source(self, events_file):
        split = load_dataset({"events": str(events_file)}, {"min_history": 2})
        assert split.source == "events"
        assert len(split.test) == 2
        assert set(e.target_item for e in split.test) <= set(split.corpus.tolist())

    def test_synthetic_records_use_availability(self, tmp_path, small_dp_config):
        path = tmp_path / "synthetic.jsonl"
        write_dp_dataset(small_dp_config, str(path))
        split = load_dataset({"data": str(path)}, {"protocol": "synthetic"})
        assert len(split.train) == 18
        assert len(split.test) == 2
        assert split.corpus is None
        assert split.test[0].available_items == availability_bound(18, small_dp_config)
        assert split.train[0].id_bound == availability_bound(0, small_dp_config)

    def test_synthetic_records_leave_one_out(self, tmp_path, small_dp_config):
        path = tmp_path / "synthetic.jsonl"
        write_dp_dataset(small_dp_config, str(path))
        split = load_dataset({"data": str(path)}, {"protocol": "leave_one_out"})
        assert len(split.test) == 20
        assert isinstance(split.corpus, np.ndarray)

    def test_separate_test_file(self, tmp_path):
        train_path, test_path = tmp_path / "train.jsonl", tmp_path / "test.jsonl"
        write_records_jsonl(str(train_path), [[1, 2, 3], [2, 3, 4]])
        write_records_jsonl(str(test_path), [[3, 4, 5]])
        split = load_dataset({"data": str(train_path), "test_data": str(test_path)}, {})
        assert len(split.train) == 2
        assert split.test[0].target_item == 5
        assert split.test[0].history.user_id == 2
        assert 5 in split.corpus

    def test_no_source(self):
        with pytest.raises(DataFormatError, match="No data source"):
            load_dataset({}, {})

    def test_missing_records_file(self, tmp_path):
        with pytest.raises(FileProcessingError):
            load_dataset({"data": str(tmp_path / "missing.jsonl")}, {})
