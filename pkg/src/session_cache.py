"""
Session cache store - per-user KV caches kept across scoring requests

Entries expire after a TTL and the least recently used entry is evicted when
the store is full. A user's entry is checked out under that user's lock, so
one request at a time may extend or replace it.
"""

import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterator, Optional
import logging

logger = logging.getLogger(__name__)


class CacheOutcome(Enum):
    """What happened to a session's cache during a request"""

    CREATED = "created"
    REUSED = "reused"
    EXTENDED = "extended"
    RECOMPUTED = "recomputed"


@dataclass
class SessionEntry:
    """Cached state of one user"""

    user_id: int
    cache: Optional[Any] = None
    created_at: float = 0.0
    last_used: float = 0.0
    hits: int = 0
    last_outcome: Optional[CacheOutcome] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "user_id": self.user_id,
            "created_at": self.created_at,
            "last_used": self.last_used,
            "hits": self.hits,
            "last_outcome": self.last_outcome.value if self.last_outcome else None,
            "cached_tokens": getattr(self.cache, "prefix_len", 0),
        }


@dataclass
class SessionCacheStore:
    """Thread-safe map from user id to ``SessionEntry``"""

    ttl_seconds: float = 1800.0
    max_sessions: int = 1024
    clock: Callable[[], float] = time.monotonic
    _entries: Dict[int, SessionEntry] = field(default_factory=dict, init=False)
    _user_locks: Dict[int, threading.Lock] = field(default_factory=dict, init=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, init=False)

    def _user_lock(self, user_id: int) -> threading.Lock:
        with self._lock:
            return self._user_locks.setdefault(user_id, threading.Lock())

    @contextmanager
    def checkout(self, user_id: int) -> Iterator[SessionEntry]:
        """Exclusive access to a user's entry; created empty if missing or expired."""
        with self._user_lock(user_id):
            with self._lock:
                self.cleanup_expired()
                now = self.clock()
                entry = self._entries.get(user_id)
                if entry is None:
                    entry = SessionEntry(user_id=user_id, created_at=now, last_used=now)
                    self._entries[user_id] = entry
                    self._evict_if_full(keep=user_id)
            try:
                yield entry
            finally:
                with self._lock:
                    entry.last_used = self.clock()
                    entry.hits += 1

    def get(self, user_id: int) -> Optional[SessionEntry]:
        with self._lock:
            entry = self._entries.get(user_id)
            if entry is not None and self._expired(entry, self.clock()):
                del self._entries[user_id]
                return None
            return entry

    def drop(self, user_id: int) -> bool:
        with self._lock:
            return self._entries.pop(user_id, None) is not None

    def _expired(self, entry: SessionEntry, now: float) -> bool:
        return now - entry.last_used > self.ttl_seconds

    def cleanup_expired(self) -> int:
        """Remove expired entries; returns how many were removed."""
        with self._lock:
            now = self.clock()
            expired = [uid for uid, e in self._entries.items() if self._expired(e, now)]
            for uid in expired:
                del self._entries[uid]
            if expired:
                logger.info(f"Expired {len(expired)} session caches")
            return len(expired)

    def _evict_if_full(self, keep: int) -> None:
        while len(self._entries) > self.max_sessions:
            candidates = [e for uid, e in self._entries.items() if uid != keep]
            if not candidates:
                return
            victim = min(candidates, key=lambda e: e.last_used)
            del self._entries[victim.user_id]
            logger.debug(f"Evicted session cache of user {victim.user_id}")

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def stats(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "sessions": len(self._entries),
                "max_sessions": self.max_sessions,
                "ttl_seconds": self.ttl_seconds,
                "entries": [e.to_dict() for e in self._entries.values()],
            }
