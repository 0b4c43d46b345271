"""Simulated serving fabric: capacity-limited node pools and lossy RPC hops.

Pools model the io-node / compute-node split with a semaphore per pool and
busy-time counters for utilization reports. Channels add hop latency and
independent failure draws from a counter-based stream: call n consumes
draw indices 2n (failure) and 2n+1 (latency), each u01(mix64(seed XOR
mix64(index))), so results never depend on thread interleaving. A failed
call still pays its latency sample, and rpc failure is a returned value,
not an exception.
"""
from __future__ import annotations

import enum
import itertools
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping

from .core import mix64


class ConfigurationError(ValueError):
    """Bad fabric or pipeline configuration (unknown pool, bad bounds)."""


class PoolKind(enum.Enum):
    IO = "io"
    COMPUTE = "compute"


def _u01(bits: int) -> float:
    return (bits >> 11) * 2.0**-53


class NodePool:
    """Fixed-capacity executor slice; callers hold slots while they work."""

    def __init__(self, name: str, kind: PoolKind, capacity: int):
        if capacity < 1:
            raise ConfigurationError(f"pool {name!r}: capacity must be >= 1")
        self.name = name
        self.kind = kind
        self.capacity = capacity
        self._sem = threading.BoundedSemaphore(capacity)
        self._lock = threading.Lock()
        self._busy_ns = 0
        self._occupancy = 0
        self._max_occupancy = 0

    @property
    def busy_ns(self) -> int:
        with self._lock:
            return self._busy_ns

    @property
    def max_occupancy(self) -> int:
        with self._lock:
            return self._max_occupancy

    @property
    def occupancy(self) -> int:
        with self._lock:
            return self._occupancy

    @contextmanager
    def hold(self):
        """Block for a slot, hold it for the body, bill measured elapsed time."""
        self._sem.acquire()
        with self._lock:
            self._occupancy += 1
            if self._occupancy > self._max_occupancy:
                self._max_occupancy = self._occupancy
        start = time.perf_counter_ns()
        try:
            yield
        finally:
            elapsed = time.perf_counter_ns() - start
            with self._lock:
                self._occupancy -= 1
                self._busy_ns += elapsed
            self._sem.release()

    def acquire(self, duration_ns: int) -> None:
        """Hold one slot for exactly duration_ns of billed busy time.

        Sleeps for the duration; the busy counter advances by the requested
        amount, not the measured sleep, so accounting is exact for stubs.
        """
        if duration_ns < 0:
            raise ValueError("duration must be >= 0")
        self._sem.acquire()
        with self._lock:
            self._occupancy += 1
            if self._occupancy > self._max_occupancy:
                self._max_occupancy = self._occupancy
        try:
            if duration_ns > 0:
                time.sleep(duration_ns / 1e9)
        finally:
            with self._lock:
                self._occupancy -= 1
                self._busy_ns += duration_ns
            self._sem.release()


@dataclass(frozen=True)
class LatencySpec:
    """Hop latency distribution: fixed point mass or uniform(lo, hi), in ns."""

    lo_ns: int
    hi_ns: int

    def __post_init__(self):
        if self.lo_ns < 0 or self.hi_ns < self.lo_ns:
            raise ConfigurationError("latency bounds need 0 <= lo <= hi")

    @staticmethod
    def fixed(ns: int) -> "LatencySpec":
        return LatencySpec(lo_ns=ns, hi_ns=ns)

    @staticmethod
    def uniform(lo_ns: int, hi_ns: int) -> "LatencySpec":
        return LatencySpec(lo_ns=lo_ns, hi_ns=hi_ns)

    def sample(self, u: float) -> int:
        if self.hi_ns == self.lo_ns:
            return self.lo_ns
        return self.lo_ns + int(u * (self.hi_ns - self.lo_ns))


@dataclass(frozen=True)
class RpcFailure:
    """Value returned by a failed call; carries enough to identify the draw."""

    channel: str
    call_index: int
    reason: str = "injected"


@dataclass(frozen=True)
class HopRecord:
    channel: str
    call_index: int
    start_ns: int
    end_ns: int
    ok: bool


class RpcChannel:
    """One logical link between pools; every call pays latency and may fail."""

    def __init__(
        self,
        name: str,
        *,
        src: str,
        dst: NodePool,
        latency: LatencySpec,
        failure_prob: float,
        rng_seed: int,
    ):
        if not 0.0 <= failure_prob <= 1.0:
            raise ConfigurationError(f"channel {name!r}: failure_prob outside [0,1]")
        self.name = name
        self.src = src
        self.dst = dst
        self.latency = latency
        self.failure_prob = failure_prob
        self.rng_seed = rng_seed
        self._counter = itertools.count()

    def draw(self, index: int) -> float:
        """The deterministic stream: u01(mix64(seed XOR mix64(index)))."""
        return _u01(mix64(self.rng_seed ^ mix64(index)))

    def call(
        self,
        task: Callable[[], Any],
        *,
        hops: list[HopRecord] | None = None,
    ) -> Any:
        """Run task on the destination pool after one hop; may return RpcFailure.

        Call n uses draw 2n for failure, 2n+1 for latency. The failure path
        pays the same latency sample and never executes the task. Successful
        calls execute on the calling thread while holding a destination slot.
        """
        n = next(self._counter)
        failed = self.draw(2 * n) < self.failure_prob
        lat_ns = self.latency.sample(self.draw(2 * n + 1))
        start = time.perf_counter_ns()
        if lat_ns > 0:
            time.sleep(lat_ns / 1e9)
        if failed:
            end = time.perf_counter_ns()
            if hops is not None:
                hops.append(HopRecord(self.name, n, start, end, ok=False))
            return RpcFailure(channel=self.name, call_index=n)
        with self.dst.hold():
            result = task()
        end = time.perf_counter_ns()
        if hops is not None:
            hops.append(HopRecord(self.name, n, start, end, ok=True))
        return result


@dataclass(frozen=True)
class PoolUsage:
    busy_ns: int
    wall_ns: int
    capacity: int
    utilization: float
    max_occupancy: int


@dataclass(frozen=True)
class UtilizationReport:
    pools: Mapping[str, PoolUsage]


def utilization_report(
    pools: Iterable[NodePool],
    wall_ns: int,
    *,
    busy_offsets: Mapping[str, int] | None = None,
) -> UtilizationReport:
    """Utilization = busy_ns / (capacity * wall_ns) per pool.

    busy_offsets subtracts a prior busy snapshot so a report can cover just
    one measurement window.
    """
    if wall_ns <= 0:
        raise ValueError("wall_ns must be positive")
    rows = {}
    for pool in pools:
        busy = pool.busy_ns - (busy_offsets or {}).get(pool.name, 0)
        rows[pool.name] = PoolUsage(
            busy_ns=busy,
            wall_ns=wall_ns,
            capacity=pool.capacity,
            utilization=busy / (pool.capacity * wall_ns),
            max_occupancy=pool.max_occupancy,
        )
    return UtilizationReport(pools=rows)


class Fabric:
    """The wiring for one run: named pools, named channels, a branch executor."""

    def __init__(
        self,
        pools: Iterable[NodePool],
        channels: Iterable[RpcChannel],
        *,
        executor_workers: int = 32,
    ):
        self.pools = {p.name: p for p in pools}
        self.channels = {}
        for ch in channels:
            if ch.src not in self.pools:
                raise ConfigurationError(f"channel {ch.name!r}: unknown pool {ch.src!r}")
            if ch.dst.name not in self.pools:
                raise ConfigurationError(f"channel {ch.name!r}: unknown pool {ch.dst.name!r}")
            self.channels[ch.name] = ch
        self.executor = ThreadPoolExecutor(
            max_workers=executor_workers, thread_name_prefix="fabric"
        )

    def pool(self, name: str) -> NodePool:
        try:
            return self.pools[name]
        except KeyError:
            raise ConfigurationError(f"unknown pool {name!r}") from None

    def channel(self, name: str) -> RpcChannel:
        try:
            return self.channels[name]
        except KeyError:
            raise ConfigurationError(f"unknown channel {name!r}") from None

    def shutdown(self) -> None:
        self.executor.shutdown(wait=True)

    def __enter__(self) -> "Fabric":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


__all__ = [
    "ConfigurationError",
    "PoolKind",
    "NodePool",
    "LatencySpec",
    "RpcFailure",
    "HopRecord",
    "RpcChannel",
    "PoolUsage",
    "UtilizationReport",
    "utilization_report",
    "Fabric",
]
