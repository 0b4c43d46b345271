"""Shared domain types and the deterministic hashing/embedding primitives.

Every float in the system is a 64-bit IEEE double and every reduction runs
in ascending index order, left to right. That discipline is what lets the
serialized baseline, the overlapped pipeline, and the split/merged scoring
paths produce bit-identical rankings, so the primitives here are the single
source of randomness-free "model weights" for the whole package.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, uint64

MASK64 = 0xFFFFFFFFFFFFFFFF

MAX_LONG_BEHAVIORS = 4096
MAX_SHORT_BEHAVIORS = 64


@njit(uint64(uint64), cache=True, nogil=True)
def _mix64(x):
    # SplitMix64 finalizer; wrapping uint64 arithmetic throughout.
    z = x + uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> uint64(30))) * uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> uint64(27))) * uint64(0x94D049BB133111EB)
    return z ^ (z >> uint64(31))


@njit(cache=True, nogil=True)
def _u01(x):
    # Top 53 bits of a uint64 mapped to [0, 1).
    return np.float64(x >> uint64(11)) * 2.0**-53


@njit(cache=True, nogil=True)
def _embed_into(seed, ident, out):
    base = _mix64(seed ^ _mix64(ident))
    for j in range(out.shape[0]):
        out[j] = 2.0 * _u01(_mix64(base + uint64(j))) - 1.0


@njit(cache=True, nogil=True)
def _embed_many(seed, idents, d):
    out = np.empty((idents.shape[0], d), dtype=np.float64)
    for i in range(idents.shape[0]):
        _embed_into(seed, idents[i], out[i, :])
    return out


def mix64(x: int) -> int:
    """SplitMix64 finalizer of ``x`` (taken mod 2**64). Pure and bit-exact."""
    return int(_mix64(uint64(x & MASK64)))


def embed(seed: int, ident: int, d: int) -> np.ndarray:
    """Deterministic d-vector for an id, each component in [-1, 1).

    Component j is ``2*u - 1`` with ``u`` the 53-bit uniform drawn from
    ``mix64(mix64(seed ^ mix64(id)) + j)``. Same (seed, id, d) always
    yields the identical bit pattern. The returned array is read-only.
    """
    if d < 1:
        raise ValueError("embedding dim must be >= 1")
    out = np.empty(d, dtype=np.float64)
    _embed_into(uint64(seed & MASK64), uint64(ident & MASK64), out)
    out.setflags(write=False)
    return out


def _as_id_array(ids, what: str, max_len: int) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.uint64)
    if arr.ndim != 1:
        raise ValueError(f"{what} must be a flat sequence of item ids")
    if arr.shape[0] > max_len:
        raise ValueError(f"{what} length {arr.shape[0]} exceeds {max_len}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Request:
    """One front-end user request: who is asking, with what history."""

    request_id: int
    session_id: int
    user_id: int
    long_behaviors: np.ndarray
    short_behaviors: np.ndarray
    context_id: int
    arrival_time: int = 0

    def __post_init__(self):
        object.__setattr__(
            self,
            "long_behaviors",
            _as_id_array(self.long_behaviors, "long_behaviors", MAX_LONG_BEHAVIORS),
        )
        object.__setattr__(
            self,
            "short_behaviors",
            _as_id_array(self.short_behaviors, "short_behaviors", MAX_SHORT_BEHAVIORS),
        )


@dataclass(frozen=True)
class Candidate:
    """An ad candidate: target item id plus its bid in milli-currency units."""

    item_id: int
    bid: int

    def __post_init__(self):
        if self.bid < 0:
            raise ValueError("bid must be nonnegative")


@dataclass(frozen=True)
class OrganicItem:
    """A non-ad search result item, the externality input to re-ranking."""

    item_id: int


@dataclass(frozen=True)
class UserRepr:
    """The target-independent user vector cached between pipeline stages."""

    vector: np.ndarray
    produced_at: int = 0
    source_request: int = 0

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1:
            raise ValueError("user representation must be a flat vector")
        if not np.all(np.isfinite(vec)):
            raise ValueError("user representation must be finite")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class ScoredCandidate:
    """Per-candidate scoring output: raw logit, click probability, final score."""

    item_id: int
    logit: float
    ctr: float
    final_score: float


@dataclass(frozen=True)
class RankedList:
    """Final ranking: non-increasing final_score, ties broken by ascending id."""

    entries: tuple[ScoredCandidate, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        prev = None
        for sc in self.entries:
            if sc.item_id in seen:
                raise ValueError(f"duplicate item_id {sc.item_id} in ranked list")
            seen.add(sc.item_id)
            if prev is not None:
                if sc.final_score > prev.final_score:
                    raise ValueError("ranked list not sorted by final_score")
                if sc.final_score == prev.final_score and sc.item_id < prev.item_id:
                    raise ValueError("tie not broken by ascending item_id")
            prev = sc

    def __len__(self) -> int:
        return len(self.entries)

    def item_ids(self) -> tuple[int, ...]:
        return tuple(sc.item_id for sc in self.entries)


def float_bits(x: float) -> int:
    """Raw IEEE-754 bit pattern of a double, for bit-exact comparisons."""
    return np.float64(x).view(np.uint64).item()


def ranked_lists_identical(a: RankedList, b: RankedList):
    """Bit-exact comparison of two ranked lists.

    Returns None when identical, else a dict naming the first divergence
    (position, item_id, field, and both bit patterns). Float fields are
    compared by bit pattern, so -0.0 vs 0.0 or differing NaNs diverge.
    """
    if len(a) != len(b):
        return {"field": "length", "expected": len(a), "got": len(b)}
    for pos, (x, y) in enumerate(zip(a.entries, b.entries)):
        if x.item_id != y.item_id:
            return {"position": pos, "field": "item_id", "expected": x.item_id, "got": y.item_id}
        for fname in ("logit", "ctr", "final_score"):
            xb = float_bits(getattr(x, fname))
            yb = float_bits(getattr(y, fname))
            if xb != yb:
                return {
                    "position": pos,
                    "item_id": x.item_id,
                    "field": fname,
                    "expected": f"{xb:#018x}",
                    "got": f"{yb:#018x}",
                }
    return None


def warm_kernels() -> None:
    """Force-compile the shared jitted primitives (first call is slow)."""
    _mix64(uint64(0))
    _u01(uint64(0))
    _embed_many(uint64(0), np.zeros(1, dtype=np.uint64), uint64(2))
