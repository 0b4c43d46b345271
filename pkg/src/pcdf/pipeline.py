"""Serving orchestrators: the serialized baseline and the overlapped pcdf mode.

Both modes run the same upstream stubs (retrieval, pre-rank: injected delay
plus deterministic candidate generation) and the same three model stages.
The baseline chains everything; pcdf launches the behavior encoder at
request arrival on a parallel branch, parks its output in the TTL cache,
and picks it up once pre-ranking finishes. Scores are bit-identical across
modes by construction; only the timing differs.

rank_stage_ns is measured the same way in both modes: from pre-rank
completion to the final ranked list. That makes the overlapped mode's rank
stage independent of the long-sequence length whenever the encoder finishes
under cover of retrieval plus pre-rank.
"""
from __future__ import annotations

import enum
import graphlib
import math
import time
from concurrent.futures import Future, TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from threading import Lock
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .cache import CacheKey, KeyKind, TtlCache
from .core import Candidate, OrganicItem, RankedList, Request, ScoredCandidate, UserRepr, mix64
from .model import ModelParams
from .simnet import (
    ConfigurationError,
    Fabric,
    HopRecord,
    LatencySpec,
    NodePool,
    PoolKind,
    RpcChannel,
    RpcFailure,
)

# ASCII bytes of "ORG": salt separating organic-item ids from candidate ids
ORGANIC_SALT = 0x4F5247
# ASCII bytes of "RETR" / "PREK": per-request delay-sampling streams
RETRIEVAL_SALT = 0x52455452
PRE_RANK_SALT = 0x5052454B

CHANNEL_NAMES = ("pre_model", "cache_put", "cache_get", "mid_model", "post_model")
STAGES = ("retrieval", "pre_rank", "pre_model", "cache_put", "cache_get", "mid_model", "post_model")

_MASK64 = (1 << 64) - 1


class Mode(enum.Enum):
    BASELINE = "baseline"
    PCDF = "pcdf"


class MissPolicy(enum.Enum):
    WAIT = "wait"
    COMPUTE_INLINE = "inline"


@dataclass(frozen=True)
class ChannelSpec:
    latency: LatencySpec
    failure_prob: float = 0.0


@dataclass(frozen=True)
class PipelineConfig:
    mode: Mode = Mode.BASELINE
    retrieval_delay: LatencySpec = LatencySpec.fixed(20_000_000)
    pre_rank_delay: LatencySpec = LatencySpec.fixed(10_000_000)
    candidates_per_request: int = 300
    organics_per_request: int = 8
    split_count: int = 4
    cache_ttl_ns: int = 60_000_000_000
    cache_key_kind: KeyKind = KeyKind.SESSION_ID
    miss_policy: MissPolicy = MissPolicy.WAIT
    deadline_ns: int = 200_000_000
    jitter_budget_ns: int = 5_000_000
    model_params: ModelParams = field(default_factory=ModelParams)
    io_capacity: int = 64
    compute_capacity: int = 8
    channels: Mapping[str, ChannelSpec] = field(default_factory=dict)
    rpc_seed: int = 0xFAB

    def __post_init__(self):
        if self.candidates_per_request < 0:
            raise ConfigurationError("candidates_per_request must be >= 0")
        if self.organics_per_request < 0:
            raise ConfigurationError("organics_per_request must be >= 0")
        if self.split_count < 1:
            raise ConfigurationError("split_count must be >= 1")
        if self.cache_ttl_ns <= 0:
            raise ConfigurationError("cache ttl must be positive")
        if self.deadline_ns <= 0:
            raise ConfigurationError("deadline must be positive")
        unknown = set(self.channels) - set(CHANNEL_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown channel names: {sorted(unknown)}")

    def channel_spec(self, name: str) -> ChannelSpec:
        if name not in CHANNEL_NAMES:
            raise ConfigurationError(f"unknown channel {name!r}")
        return self.channels.get(name, ChannelSpec(latency=LatencySpec.fixed(500_000)))


def build_fabric(config: PipelineConfig, *, executor_workers: int = 64) -> Fabric:
    """Construct the pools and channels one serving run needs."""
    io = NodePool("io", PoolKind.IO, config.io_capacity)
    compute = NodePool("compute", PoolKind.COMPUTE, config.compute_capacity)
    dst = {
        "pre_model": compute,
        "mid_model": compute,
        "post_model": compute,
        "cache_put": io,
        "cache_get": io,
    }
    channels = []
    for idx, name in enumerate(CHANNEL_NAMES):
        spec = config.channel_spec(name)
        channels.append(
            RpcChannel(
                name,
                src="io",
                dst=dst[name],
                latency=spec.latency,
                failure_prob=spec.failure_prob,
                rng_seed=mix64((config.rpc_seed + idx + 1) & _MASK64),
            )
        )
    return Fabric([io, compute], channels, executor_workers=executor_workers)


class StageTrace:
    """Per-request record of every stage window and RPC hop, in ns."""

    def __init__(self, request_id: int, mode: Mode):
        self.request_id = request_id
        self.mode = mode
        self.spans: dict[str, list[tuple[int, int]]] = {}
        self.hops: list[HopRecord] = []
        self._lock = Lock()

    def record(self, stage: str, start_ns: int, end_ns: int) -> None:
        if end_ns < start_ns:
            raise ValueError(f"stage {stage!r}: end before start")
        with self._lock:
            self.spans.setdefault(stage, []).append((start_ns, end_ns))

    def span(self, stage: str) -> tuple[int, int] | None:
        """Overall window of a stage: earliest start to latest end."""
        with self._lock:
            windows = self.spans.get(stage)
            if not windows:
                return None
            return min(w[0] for w in windows), max(w[1] for w in windows)

    def duration(self, stage: str) -> int | None:
        w = self.span(stage)
        return None if w is None else w[1] - w[0]

    @property
    def end_to_end_ns(self) -> int:
        with self._lock:
            starts = [w[0] for ws in self.spans.values() for w in ws]
            ends = [w[1] for ws in self.spans.values() for w in ws]
            starts += [h.start_ns for h in self.hops]
            ends += [h.end_ns for h in self.hops]
        if not starts:
            return 0
        return max(ends) - min(starts)

    @property
    def rank_stage_ns(self) -> int | None:
        """From pre-rank completion to the ranked list being ready."""
        rank_end = self.span("post_model")
        rank_entry = self.span("pre_rank")
        if rank_end is None or rank_entry is None:
            return None
        return rank_end[1] - rank_entry[1]


@dataclass(frozen=True)
class ServeResult:
    ok: bool
    ranked: RankedList | None
    trace: StageTrace
    failure: str | None
    end_to_end_ns: int
    rank_stage_ns: int | None


def _delay_ns(spec: LatencySpec, request_id: int, salt: int) -> int:
    u = (mix64(request_id ^ salt) >> 11) * 2.0**-53
    return spec.sample(u)


def retrieve(request: Request, config: PipelineConfig) -> tuple[list[Candidate], list[OrganicItem]]:
    """Upstream retrieval stub: injected delay, deterministic candidates.

    item_id = mix64(request_id XOR mix64(i)); organic ids use ORGANIC_SALT
    so the two id families come from disjoint hash inputs.
    """
    delay = _delay_ns(config.retrieval_delay, request.request_id, RETRIEVAL_SALT)
    if delay > 0:
        time.sleep(delay / 1e9)
    cands = []
    for i in range(config.candidates_per_request):
        item_id = mix64(request.request_id ^ mix64(i))
        cands.append(Candidate(item_id=item_id, bid=1000 + item_id % 1000))
    organics = [
        OrganicItem(item_id=mix64((request.request_id + ORGANIC_SALT + j) & _MASK64))
        for j in range(config.organics_per_request)
    ]
    return cands, organics


def pre_rank(candidates: Sequence[Candidate], config: PipelineConfig, *, request_id: int = 0) -> list[Candidate]:
    """Pre-rank stub: delay, then keep the ceil-half with smallest mix64(item_id)."""
    if not candidates:
        raise ValueError("pre_rank requires a nonempty candidate list")
    delay = _delay_ns(config.pre_rank_delay, request_id, PRE_RANK_SALT)
    if delay > 0:
        time.sleep(delay / 1e9)
    keep = math.ceil(len(candidates) / 2)
    ranked = sorted(candidates, key=lambda c: mix64(c.item_id))
    return ranked[:keep]


def split_candidates(items: Sequence, k: int) -> list[list]:
    """Contiguous order-preserving chunks; first n mod k chunks get the extra item."""
    if k < 1:
        raise ValueError("split count must be >= 1")
    n = len(items)
    base, extra = divmod(n, k)
    out = []
    pos = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        out.append(list(items[pos:pos + size]))
        pos += size
    return out


def merge_scored(sub_results: Sequence[Sequence[tuple[int, float]]]) -> list[tuple[int, float]]:
    """Concatenate sub-request outputs in index order; no partial merges."""
    merged = []
    for part in sub_results:
        if isinstance(part, RpcFailure):
            raise ValueError(f"cannot merge failed sub-request: {part}")
        merged.extend(part)
    return merged


def critical_path_latency(
    stage_durations: Mapping[str, float],
    dependency_edges: Iterable[tuple[str, str]],
) -> float:
    """Longest path through the stage DAG; node weight = duration.

    Edges are happens-before pairs (a, b). Raises on cycles and on edges
    naming unknown stages.
    """
    edges = list(dependency_edges)
    for a, b in edges:
        if a not in stage_durations or b not in stage_durations:
            raise ValueError(f"edge ({a!r}, {b!r}) names an unknown stage")
    preds: dict[str, list[str]] = {n: [] for n in stage_durations}
    graph: dict[str, set[str]] = {n: set() for n in stage_durations}
    for a, b in edges:
        graph[b].add(a)
        preds[b].append(a)
    try:
        order = list(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as e:
        raise ValueError(f"dependency cycle: {e.args[1]}") from None
    finish: dict[str, float] = {}
    for node in order:
        start = max((finish[p] for p in preds[node]), default=0.0)
        finish[node] = start + stage_durations[node]
    return max(finish.values(), default=0.0)


class StubModel:
    """Fixed-span stand-in model for overlap and scheduling experiments.

    Each stage sleeps a configured span and returns deterministic filler
    values; scores carry no information, timing is the point.
    """

    def __init__(self, *, d: int = 4, pre_ns: int = 0, mid_ns: int = 0, post_ns: int = 0):
        self.d = d
        self.pre_ns = pre_ns
        self.mid_ns = mid_ns
        self.post_ns = post_ns

    def pre(self, request: Request) -> UserRepr:
        if self.pre_ns > 0:
            time.sleep(self.pre_ns / 1e9)
        return UserRepr(
            vector=np.zeros(self.d),
            produced_at=time.perf_counter_ns(),
            source_request=request.request_id,
        )

    def score(self, u: UserRepr, request: Request, item_ids: Sequence[int]) -> list[tuple[int, float]]:
        if self.mid_ns > 0:
            time.sleep(self.mid_ns / 1e9)
        return [(int(i), 0.0) for i in item_ids]

    def post(self, scored: Sequence[tuple[int, float]], organics) -> RankedList:
        if self.post_ns > 0:
            time.sleep(self.post_ns / 1e9)
        entries = sorted(
            (
                ScoredCandidate(item_id=i, logit=lg, ctr=0.5, final_score=0.5)
                for i, lg in scored
            ),
            key=lambda sc: sc.item_id,
        )
        return RankedList(entries=tuple(entries))


def cache_key_for(request: Request, config: PipelineConfig) -> CacheKey:
    if config.cache_key_kind is KeyKind.USER_ID:
        return CacheKey(kind=KeyKind.USER_ID, id=request.user_id)
    return CacheKey(kind=KeyKind.SESSION_ID, id=request.session_id)


def _timed_call(channel: RpcChannel, stage: str, trace: StageTrace, task: Callable[[], Any]) -> Any:
    start = time.perf_counter_ns()
    result = channel.call(task, hops=trace.hops)
    trace.record(stage, start, time.perf_counter_ns())
    return result


def _upstream(request: Request, config: PipelineConfig, fabric: Fabric, trace: StageTrace):
    """Retrieval then pre-rank, holding an io slot for each stage's span."""
    io = fabric.pool("io")
    start = time.perf_counter_ns()
    with io.hold():
        cands, organics = retrieve(request, config)
    trace.record("retrieval", start, time.perf_counter_ns())
    start = time.perf_counter_ns()
    with io.hold():
        if cands:
            survivors = pre_rank(cands, config, request_id=request.request_id)
        else:
            # empty candidate set: the stage still spends its delay, the
            # filter is vacuous
            delay = _delay_ns(config.pre_rank_delay, request.request_id, PRE_RANK_SALT)
            if delay > 0:
                time.sleep(delay / 1e9)
            survivors = []
    trace.record("pre_rank", start, time.perf_counter_ns())
    return survivors, organics


def _rank_candidates(
    survivors: Sequence[Candidate],
    organics: Sequence[OrganicItem],
    u: UserRepr,
    request: Request,
    config: PipelineConfig,
    model,
    fabric: Fabric,
    trace: StageTrace,
) -> RankedList | RpcFailure:
    """Scatter survivors over k scoring calls, gather, then rank."""
    mid = fabric.channel("mid_model")
    chunks = [c for c in split_candidates([c.item_id for c in survivors], config.split_count) if c]
    start = time.perf_counter_ns()
    futures = [
        fabric.executor.submit(mid.call, lambda ids=tuple(ids): model.score(u, request, list(ids)), hops=trace.hops)
        for ids in chunks
    ]
    results = [f.result() for f in futures]
    trace.record("mid_model", start, time.perf_counter_ns())
    for r in results:
        if isinstance(r, RpcFailure):
            return r
    scored = merge_scored(results)
    post = fabric.channel("post_model")
    ranked = _timed_call(post, "post_model", trace, lambda: model.post(scored, organics))
    return ranked


def _finish(trace: StageTrace, ranked: RankedList | None, failure: str | None) -> ServeResult:
    return ServeResult(
        ok=failure is None,
        ranked=ranked,
        trace=trace,
        failure=failure,
        end_to_end_ns=trace.end_to_end_ns,
        rank_stage_ns=trace.rank_stage_ns,
    )


def _fail(trace: StageTrace, what: str) -> ServeResult:
    return _finish(trace, None, what)


def _failure_label(r: RpcFailure) -> str:
    return f"rpc_failure:{r.channel}#{r.call_index}"


def serve_baseline(
    request: Request,
    config: PipelineConfig,
    model,
    fabric: Fabric,
    cache: TtlCache | None = None,
) -> ServeResult:
    """Strictly sequential: upstream stages, then all three model parts."""
    trace = StageTrace(request.request_id, Mode.BASELINE)
    survivors, organics = _upstream(request, config, fabric, trace)
    pre = fabric.channel("pre_model")
    u = _timed_call(pre, "pre_model", trace, lambda: model.pre(request))
    if isinstance(u, RpcFailure):
        return _fail(trace, _failure_label(u))
    ranked = _rank_candidates(survivors, organics, u, request, config, model, fabric, trace)
    if isinstance(ranked, RpcFailure):
        return _fail(trace, _failure_label(ranked))
    return _finish(trace, ranked, None)


def serve_pcdf(
    request: Request,
    config: PipelineConfig,
    model,
    fabric: Fabric,
    cache: TtlCache,
) -> ServeResult:
    """Overlapped mode: encoder branch races the upstream stages.

    Branch A: encoder on the compute pool, output parked in the cache.
    Branch B: retrieval and pre-rank. B then fetches the cached vector;
    a miss is handled per miss_policy, and a Wait whose branch A failed
    falls back to computing inline. The scores cannot depend on which
    branch wins the race.
    """
    trace = StageTrace(request.request_id, Mode.PCDF)
    arrival = time.perf_counter_ns()
    key = cache_key_for(request, config)
    pre = fabric.channel("pre_model")
    put_ch = fabric.channel("cache_put")
    get_ch = fabric.channel("cache_get")

    def branch_a():
        u = _timed_call(pre, "pre_model", trace, lambda: model.pre(request))
        if isinstance(u, RpcFailure):
            return u
        def do_put():
            cache.put(key, u, config.cache_ttl_ns, time.perf_counter_ns())
            return u
        res = _timed_call(put_ch, "cache_put", trace, do_put)
        return res

    future: Future = fabric.executor.submit(branch_a)

    def join_branch_a(timeout_ns: int):
        try:
            return future.result(timeout=max(timeout_ns, 0) / 1e9)
        except FutureTimeout:
            return None

    survivors, organics = _upstream(request, config, fabric, trace)

    got = _timed_call(get_ch, "cache_get", trace, lambda: cache.get(key, time.perf_counter_ns()))
    if isinstance(got, RpcFailure):
        return _fail(trace, _failure_label(got))

    u: UserRepr | None = got
    inline_needed = False
    if u is None:
        if config.miss_policy is MissPolicy.WAIT:
            remaining = config.deadline_ns - (time.perf_counter_ns() - arrival)
            if remaining <= 0:
                return _fail(trace, "deadline")
            a_result = join_branch_a(remaining)
            if a_result is None:
                # timeout can race completion; only a still-running branch
                # counts as a blown deadline
                if not future.done():
                    return _fail(trace, "deadline")
                a_result = future.result()
            if isinstance(a_result, RpcFailure):
                inline_needed = True
            else:
                got2 = _timed_call(get_ch, "cache_get", trace, lambda: cache.get(key, time.perf_counter_ns()))
                if isinstance(got2, RpcFailure):
                    return _fail(trace, _failure_label(got2))
                if got2 is None:
                    # put landed but expired already (tiny ttl); recompute
                    inline_needed = True
                else:
                    u = got2
        else:
            inline_needed = True

    if inline_needed:
        u2 = _timed_call(pre, "pre_model", trace, lambda: model.pre(request))
        if isinstance(u2, RpcFailure):
            return _fail(trace, _failure_label(u2))
        u = u2

    ranked = _rank_candidates(survivors, organics, u, request, config, model, fabric, trace)
    if isinstance(ranked, RpcFailure):
        return _fail(trace, _failure_label(ranked))

    # let the encoder branch finish before sealing the trace so its spans
    # don't bleed into the next request's window
    join_branch_a(config.deadline_ns)
    return _finish(trace, ranked, None)


def serve(
    request: Request,
    config: PipelineConfig,
    model,
    fabric: Fabric,
    cache: TtlCache,
) -> ServeResult:
    if config.mode is Mode.PCDF:
        return serve_pcdf(request, config, model, fabric, cache)
    return serve_baseline(request, config, model, fabric, cache)


__all__ = [
    "Mode",
    "MissPolicy",
    "ChannelSpec",
    "PipelineConfig",
    "StageTrace",
    "ServeResult",
    "StubModel",
    "ORGANIC_SALT",
    "RETRIEVAL_SALT",
    "PRE_RANK_SALT",
    "CHANNEL_NAMES",
    "STAGES",
    "build_fabric",
    "cache_key_for",
    "retrieve",
    "pre_rank",
    "split_candidates",
    "merge_scored",
    "critical_path_latency",
    "serve",
    "serve_baseline",
    "serve_pcdf",
]
