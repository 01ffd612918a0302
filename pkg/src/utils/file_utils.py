"""File handling utilities: JSON-lines I/O, checksums and directories."""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple

from .exceptions import DataFormatError, FileProcessingError

logger = logging.getLogger(__name__)

HEADER_PREFIX = "#"


def ensure_directory_exists(directory_path: str) -> None:
    """Ensure directory exists, create if it doesn't."""
    if not directory_path:
        return
    try:
        os.makedirs(directory_path, exist_ok=True)
    except Exception as e:
        raise FileProcessingError(f"Failed to create directory {directory_path}: {e}")


def ensure_parent_directory(file_path: str) -> None:
    ensure_directory_exists(os.path.dirname(os.path.abspath(file_path)))


def require_file(file_path: str, what: str = "file") -> Path:
    """Return ``file_path`` as a Path, raising if it does not exist."""
    path_obj = Path(file_path)
    if not path_obj.is_file():
        raise FileProcessingError(f"{what.capitalize()} does not exist: {file_path}")
    return path_obj


def file_checksum(file_path: str, chunk_size: int = 1 << 20) -> str:
    """SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    try:
        with open(file_path, "rb") as handle:
            for chunk in iter(lambda: handle.read(chunk_size), b""):
                digest.update(chunk)
    except OSError as e:
        raise FileProcessingError(f"Failed to read {file_path}: {e}")
    return digest.hexdigest()


def iter_jsonl(file_path: str) -> Iterator[Tuple[int, Any]]:
    """Yield ``(line_number, object)`` for each JSON line, skipping blanks and '#' headers."""
    require_file(file_path)
    try:
        with open(file_path, "r", encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith(HEADER_PREFIX):
                    continue
                try:
                    yield line_number, json.loads(stripped)
                except json.JSONDecodeError as e:
                    raise DataFormatError(f"{file_path}:{line_number}: invalid JSON ({e.msg})")
    except OSError as e:
        raise FileProcessingError(f"Failed to read {file_path}: {e}")


def read_jsonl_header(file_path: str) -> Optional[Dict[str, Any]]:
    """Parse the first line as a header object if it starts with '#'."""
    require_file(file_path)
    with open(file_path, "r", encoding="utf-8") as handle:
        first = handle.readline().strip()
    if not first.startswith(HEADER_PREFIX):
        return None
    try:
        return json.loads(first[len(HEADER_PREFIX) :].strip())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{file_path}: unreadable header line ({e.msg})")


def write_jsonl(
    file_path: str, rows: Iterable[Any], header: Optional[Dict[str, Any]] = None
) -> int:
    """Write one compact JSON object per line; returns the number of rows.

    Keys are sorted so identical content always produces identical bytes.
    """
    ensure_parent_directory(file_path)
    count = 0
    try:
        with open(file_path, "w", encoding="utf-8", newline="\n") as handle:
            if header is not None:
                handle.write(f"{HEADER_PREFIX} {json.dumps(header, sort_keys=True)}\n")
            for row in rows:
                handle.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
                handle.write("\n")
                count += 1
    except OSError as e:
        raise FileProcessingError(f"Failed to write {file_path}: {e}")
    logger.debug(f"Wrote {count} JSONL rows to {file_path}")
    return count


def write_json(file_path: str, data: Dict[str, Any]) -> None:
    ensure_parent_directory(file_path)
    try:
        with open(file_path, "w", encoding="utf-8") as handle:
            json.dump(data, handle, indent=2, sort_keys=True, default=str)
    except OSError as e:
        raise FileProcessingError(f"Failed to write {file_path}: {e}")


def read_json(file_path: str) -> Dict[str, Any]:
    require_file(file_path)
    try:
        with open(file_path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"Invalid JSON in {file_path}: {e}")
    except OSError as e:
        raise FileProcessingError(f"Failed to read {file_path}: {e}")


def read_id_lines(file_path: str) -> List[int]:
    """One integer id per line, blank lines ignored."""
    require_file(file_path)
    ids = []
    with open(file_path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                ids.append(int(stripped))
            except ValueError:
                raise DataFormatError(f"{file_path}:{line_number}: expected an integer id, got '{stripped}'")
    return ids
