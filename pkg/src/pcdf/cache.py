"""TTL key-value store carrying encoder output between pipeline stages.

Time is injected: every operation takes a logical `now` in nanoseconds and
the store never touches a wall clock, so tests drive arbitrary schedules
deterministically. Liveness is strict: an entry is live iff
now < inserted_at + ttl. An expired entry seen by get is removed and
counted as both a miss and an expiration; sweep counts only entries it
actually removes, so the expiration counter tallies distinct observations.
"""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass

from .core import UserRepr


class KeyKind(enum.Enum):
    USER_ID = "user"
    SESSION_ID = "session"


@dataclass(frozen=True)
class CacheKey:
    kind: KeyKind
    id: int

    def __post_init__(self):
        if not isinstance(self.kind, KeyKind):
            raise TypeError("kind must be a KeyKind")
        if not 0 <= self.id < 2**64:
            raise ValueError("id must fit in unsigned 64 bits")


@dataclass(frozen=True)
class CacheEntry:
    key: CacheKey
    value: UserRepr
    inserted_at: int
    ttl: int

    def __post_init__(self):
        if self.ttl <= 0:
            raise ValueError("ttl must be positive")

    def live_at(self, now: int) -> bool:
        return now < self.inserted_at + self.ttl


@dataclass(frozen=True)
class CacheStats:
    hits: int = 0
    misses: int = 0
    expirations: int = 0
    insertions: int = 0


class TtlCache:
    """Unbounded concurrent TTL store; last write wins per key."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: dict[CacheKey, CacheEntry] = {}
        self._hits = 0
        self._misses = 0
        self._expirations = 0
        self._insertions = 0

    def put(self, key: CacheKey, value: UserRepr, ttl: int, now: int) -> None:
        """Store value under key; replaces any prior entry and resets expiry."""
        entry = CacheEntry(key=key, value=value, inserted_at=now, ttl=ttl)
        with self._lock:
            self._entries[key] = entry
            self._insertions += 1

    def get(self, key: CacheKey, now: int) -> UserRepr | None:
        """Return the live value or None; expired entries are dropped here."""
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                self._misses += 1
                return None
            if not entry.live_at(now):
                del self._entries[key]
                self._misses += 1
                self._expirations += 1
                return None
            self._hits += 1
            return entry.value

    def sweep(self, now: int) -> int:
        """Drop every entry whose TTL has elapsed; returns how many."""
        with self._lock:
            dead = [k for k, e in self._entries.items() if not e.live_at(now)]
            for k in dead:
                del self._entries[k]
            self._expirations += len(dead)
            return len(dead)

    def stats(self) -> CacheStats:
        with self._lock:
            return CacheStats(
                hits=self._hits,
                misses=self._misses,
                expirations=self._expirations,
                insertions=self._insertions,
            )

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


__all__ = ["KeyKind", "CacheKey", "CacheEntry", "CacheStats", "TtlCache"]
