"""Workload generation, experiment execution, and latency reporting.

Latency sweeps default to one request at a time so the architectural
effect is not confounded by queueing; a closed-loop arrival mode with a
fixed number of in-flight requests exists for utilization runs.
Percentiles use the nearest-rank method. The equivalence checker drives
the same request through the single-graph composition, the serialized
mode, and the overlapped mode at several split counts, and demands
bit-identical ranked lists.
"""
from __future__ import annotations

import datetime
import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit, uint64

from .cache import TtlCache
from .core import (
    Request,
    _mix64,
    mix64,
    ranked_lists_identical,
)
from .model import DeterministicModel, pre_forward, warm_model
from .pipeline import (
    ChannelSpec,
    Mode,
    PipelineConfig,
    ServeResult,
    STAGES,
    build_fabric,
    pre_rank,
    retrieve,
    serve,
)
from .simnet import ConfigurationError, LatencySpec, utilization_report

_MASK64 = (1 << 64) - 1

CSV_HEADER = "mode,seq_len,count,failures,e2e_p50_ns,e2e_p99_ns,rank_p50_ns,rank_p99_ns"


@dataclass(frozen=True)
class Arrival:
    """Request injection: concurrency 1 is sequential, >1 is closed-loop."""

    concurrency: int = 1

    def __post_init__(self):
        if self.concurrency < 1:
            raise ConfigurationError("arrival concurrency must be >= 1")

    @staticmethod
    def sequential() -> "Arrival":
        return Arrival(concurrency=1)

    @staticmethod
    def closed_loop(concurrency: int) -> "Arrival":
        return Arrival(concurrency=concurrency)


@dataclass(frozen=True)
class Workload:
    num_requests: int = 200
    seq_lengths: tuple[int, ...] = (128, 256, 512, 1024)
    short_len: int = 50
    arrival: Arrival = field(default_factory=Arrival)
    seed: int = 42

    def __post_init__(self):
        if self.num_requests < 1:
            raise ConfigurationError("num_requests must be >= 1")
        if not self.seq_lengths:
            raise ConfigurationError("seq_lengths must be nonempty")
        if any(t < 0 for t in self.seq_lengths):
            raise ConfigurationError("sequence lengths must be >= 0")
        if not 0 <= self.short_len <= 64:
            raise ConfigurationError("short_len must be in [0, 64]")


@njit(cache=True, nogil=True)
def _behavior_ids(user_id, n):
    out = np.empty(n, dtype=np.uint64)
    for j in range(n):
        out[j] = _mix64(user_id ^ _mix64(uint64(j)))
    return out


def generate_requests(workload: Workload, t_l: int) -> list[Request]:
    """Deterministic request stream for one sequence length.

    Request i: user_id = mix64(seed + i), session_id = mix64(user_id),
    behaviors[j] = mix64(user_id XOR mix64(j)) (short sequence uses the
    same formula, so it is a prefix of the long one), context_id =
    mix64(seed XOR i), request_id = mix64(mix64(seed) + i) which is unique
    across i because the finalizer is a bijection.
    """
    if t_l < 0:
        raise ValueError("sequence length must be >= 0")
    seed = workload.seed & _MASK64
    base = mix64(seed)
    requests = []
    for i in range(workload.num_requests):
        user_id = mix64((seed + i) & _MASK64)
        n = max(t_l, workload.short_len)
        ids = _behavior_ids(uint64(user_id), n) if n else np.empty(0, dtype=np.uint64)
        requests.append(
            Request(
                request_id=mix64((base + i) & _MASK64),
                session_id=mix64(user_id),
                user_id=user_id,
                long_behaviors=ids[:t_l],
                short_behaviors=ids[: workload.short_len],
                context_id=mix64(seed ^ i),
            )
        )
    return requests


def percentile(samples: Sequence[int | float], p: float):
    """Nearest-rank percentile: sorted sample at ceil(p/100 * n) - 1."""
    if not samples:
        raise ValueError("percentile of empty sample set")
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    ordered = sorted(samples)
    rank = math.ceil(p * len(ordered) / 100)
    return ordered[max(rank - 1, 0)]


@dataclass(frozen=True)
class StatSummary:
    mean: float
    p50: int
    p90: int
    p99: int

    @staticmethod
    def of(samples: Sequence[int]) -> "StatSummary":
        if not samples:
            return StatSummary(mean=0.0, p50=0, p90=0, p99=0)
        return StatSummary(
            mean=statistics.fmean(samples),
            p50=int(percentile(samples, 50)),
            p90=int(percentile(samples, 90)),
            p99=int(percentile(samples, 99)),
        )

    def as_dict(self) -> dict:
        return {"mean": self.mean, "p50": self.p50, "p90": self.p90, "p99": self.p99}


@dataclass(frozen=True)
class LatencyCell:
    mode: str
    seq_len: int
    count: int
    failures: int
    e2e: StatSummary
    rank: StatSummary
    stage_medians: dict[str, int]
    utilization: dict[str, dict]
    within_budget: bool


@dataclass(frozen=True)
class LatencyReport:
    meta: dict
    cells: list[LatencyCell]

    def cell(self, mode: str, seq_len: int) -> LatencyCell:
        for c in self.cells:
            if c.mode == mode and c.seq_len == seq_len:
                return c
        raise KeyError(f"no cell for ({mode}, {seq_len})")


def _run_cell(
    config: PipelineConfig,
    workload: Workload,
    t_l: int,
    model,
    budget_ns: int,
) -> LatencyCell:
    requests = generate_requests(workload, t_l)
    fabric = build_fabric(config)
    cache = TtlCache()
    results: list[ServeResult] = []
    try:
        start = time.perf_counter_ns()
        if workload.arrival.concurrency == 1:
            for req in requests:
                results.append(serve(req, config, model, fabric, cache))
        else:
            with ThreadPoolExecutor(
                max_workers=workload.arrival.concurrency, thread_name_prefix="bench"
            ) as pool:
                futures = [
                    pool.submit(serve, req, config, model, fabric, cache)
                    for req in requests
                ]
                results = [f.result() for f in futures]
        wall_ns = time.perf_counter_ns() - start
        util = utilization_report(fabric.pools.values(), wall_ns)
    finally:
        fabric.shutdown()
    ok = [r for r in results if r.ok]
    failures = len(results) - len(ok)
    e2e = StatSummary.of([r.end_to_end_ns for r in ok])
    rank = StatSummary.of([r.rank_stage_ns for r in ok if r.rank_stage_ns is not None])
    stage_medians = {}
    for stage in STAGES:
        durations = [d for r in ok if (d := r.trace.duration(stage)) is not None]
        if durations:
            stage_medians[stage] = int(percentile(durations, 50))
    util_rows = {
        name: {
            "busy_ns": row.busy_ns,
            "wall_ns": row.wall_ns,
            "capacity": row.capacity,
            "utilization": row.utilization,
            "max_occupancy": row.max_occupancy,
        }
        for name, row in util.pools.items()
    }
    return LatencyCell(
        mode=config.mode.value,
        seq_len=t_l,
        count=len(results),
        failures=failures,
        e2e=e2e,
        rank=rank,
        stage_medians=stage_medians,
        utilization=util_rows,
        within_budget=bool(ok) and rank.p99 <= budget_ns,
    )


def run_experiment(
    config: PipelineConfig,
    workload: Workload,
    *,
    model=None,
    budget_ns: int = 60_000_000,
    meta: dict | None = None,
) -> LatencyReport:
    """Drive every request through the configured mode at each swept length."""
    if model is None:
        model = DeterministicModel(config.model_params)
    _warm(config, workload, model)
    cells = [
        _run_cell(config, workload, t_l, model, budget_ns)
        for t_l in workload.seq_lengths
    ]
    return LatencyReport(meta=_meta(workload, budget_ns, meta), cells=cells)


def _meta(workload: Workload, budget_ns: int, extra: dict | None) -> dict:
    meta = {
        "seed": workload.seed,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "budget_ns": budget_ns,
    }
    if extra:
        meta.update(extra)
    return meta


def _warm(config: PipelineConfig, workload: Workload, model) -> None:
    # compile/link every kernel outside the timed window; do not touch the
    # fabric so channel draw streams stay untouched
    if isinstance(model, DeterministicModel):
        warm_model(model.params)
        probe = generate_requests(
            Workload(num_requests=1, seq_lengths=(max(workload.seq_lengths),),
                     short_len=workload.short_len, seed=workload.seed),
            max(workload.seq_lengths),
        )[0]
        u = model.pre(probe)
        scored = model.score(u, probe, [1, 2])
        model.post(scored, [])


@dataclass(frozen=True)
class VerifyResult:
    passed: bool
    checked: int
    paths: int
    divergence: dict | None = None


def _quiet_config(config: PipelineConfig, mode: Mode, split_count: int) -> PipelineConfig:
    zero = LatencySpec.fixed(0)
    return PipelineConfig(
        mode=mode,
        retrieval_delay=zero,
        pre_rank_delay=zero,
        candidates_per_request=config.candidates_per_request,
        organics_per_request=config.organics_per_request,
        split_count=split_count,
        cache_ttl_ns=config.cache_ttl_ns,
        cache_key_kind=config.cache_key_kind,
        miss_policy=config.miss_policy,
        deadline_ns=config.deadline_ns,
        jitter_budget_ns=config.jitter_budget_ns,
        model_params=config.model_params,
        io_capacity=config.io_capacity,
        compute_capacity=config.compute_capacity,
        channels={name: ChannelSpec(latency=zero) for name in
                  ("pre_model", "cache_put", "cache_get", "mid_model", "post_model")},
        rpc_seed=config.rpc_seed,
    )


def verify_equivalence(
    config: PipelineConfig,
    workload: Workload,
    *,
    model=None,
    split_counts: tuple[int, ...] = (1, 4),
) -> VerifyResult:
    """Bit-exact cross-check of every execution path on every request.

    Injected delays, hop latencies, and failure probabilities are zeroed:
    they shape timing, never scores, and the check is about scores. Request
    i uses seq_lengths[i mod len(seq_lengths)] so short and long sequences
    are both covered.
    """
    if model is None:
        model = DeterministicModel(config.model_params)
    _warm(config, Workload(num_requests=1, seq_lengths=(max(workload.seq_lengths),),
                           short_len=workload.short_len, seed=workload.seed), model)
    lengths = workload.seq_lengths
    configs = {
        (mode, k): _quiet_config(config, mode, k)
        for mode in (Mode.BASELINE, Mode.PCDF)
        for k in split_counts
    }
    paths = 1 + len(configs)
    runtimes = {key: (build_fabric(cfg), TtlCache()) for key, cfg in configs.items()}
    checked = 0
    try:
        for i in range(workload.num_requests):
            t_l = lengths[i % len(lengths)]
            one = Workload(
                num_requests=1,
                seq_lengths=(t_l,),
                short_len=workload.short_len,
                seed=(workload.seed + i) & _MASK64,
            )
            request = generate_requests(one, t_l)[0]
            quiet = configs[(Mode.BASELINE, split_counts[0])]
            cands, organics = retrieve(request, quiet)
            survivors = pre_rank(cands, quiet, request_id=request.request_id) if cands else []
            reference = model.monolithic(request, survivors, organics)
            for (mode, k), cfg in configs.items():
                fabric, cache = runtimes[(mode, k)]
                result = serve(request, cfg, model, fabric, cache)
                if not result.ok:
                    return VerifyResult(
                        passed=False, checked=checked, paths=paths,
                        divergence={
                            "kind": "request_failure",
                            "mode": mode.value, "split_count": k,
                            "request_id": request.request_id,
                            "seed": workload.seed, "index": i, "seq_len": t_l,
                            "failure": result.failure,
                        },
                    )
                diff = ranked_lists_identical(reference, result.ranked)
                if diff is not None:
                    diff.update({
                        "mode": mode.value, "split_count": k,
                        "request_id": request.request_id,
                        "seed": workload.seed, "index": i, "seq_len": t_l,
                    })
                    return VerifyResult(passed=False, checked=checked, paths=paths, divergence=diff)
            checked += 1
    finally:
        for fabric, _ in runtimes.values():
            fabric.shutdown()
    return VerifyResult(passed=True, checked=checked, paths=paths)


def emit_report(report: LatencyReport, fmt: str, path: str) -> None:
    """Write the report as one JSON document or nearest-rank CSV rows."""
    if fmt not in ("json", "csv"):
        raise ValueError(f"unknown report format {fmt!r}")
    if fmt == "json":
        doc = {
            "meta": report.meta,
            "results": [
                {
                    "mode": c.mode,
                    "seq_len": c.seq_len,
                    "count": c.count,
                    "failures": c.failures,
                    "end_to_end": c.e2e.as_dict(),
                    "rank_stage": c.rank.as_dict(),
                    "stages": c.stage_medians,
                    "utilization": c.utilization,
                    "within_budget": c.within_budget,
                }
                for c in report.cells
            ],
        }
        text = json.dumps(doc, indent=2) + "\n"
    else:
        lines = [CSV_HEADER]
        for c in report.cells:
            lines.append(
                f"{c.mode},{c.seq_len},{c.count},{c.failures},"
                f"{c.e2e.p50},{c.e2e.p99},{c.rank.p50},{c.rank.p99}"
            )
        text = "\n".join(lines) + "\n"
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise OSError(f"cannot write report to {path!r}: {e}") from None


@dataclass(frozen=True)
class CalibrationRow:
    seq_len: int
    median_span_ns: int
    cover_ns: int

    @property
    def fits(self) -> bool:
        return self.median_span_ns <= self.cover_ns


def calibrate(
    config: PipelineConfig,
    seq_lengths: Sequence[int],
    *,
    seed: int = 42,
    reps: int = 5,
) -> list[CalibrationRow]:
    """Measure encoder spans per length against the upstream cover."""
    params = config.model_params
    warm_model(params)
    cover = config.retrieval_delay.lo_ns + config.pre_rank_delay.lo_ns
    rows = []
    for t_l in seq_lengths:
        wl = Workload(num_requests=1, seq_lengths=(t_l,), short_len=50, seed=seed)
        request = generate_requests(wl, t_l)[0]
        pre_forward(params, request.long_behaviors)
        spans = []
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            pre_forward(params, request.long_behaviors)
            spans.append(time.perf_counter_ns() - t0)
        rows.append(
            CalibrationRow(
                seq_len=t_l,
                median_span_ns=int(percentile(spans, 50)),
                cover_ns=cover,
            )
        )
    return rows


def workload_from_settings(
    settings: dict[str, str],
    *,
    requests: int | None = None,
    seq_lens: Sequence[int] | None = None,
    seed: int | None = None,
) -> Workload:
    arrival_raw = settings["arrival"].strip().lower()
    if arrival_raw == "sequential":
        arrival = Arrival.sequential()
    elif arrival_raw.startswith("closed:"):
        try:
            arrival = Arrival.closed_loop(int(arrival_raw.split(":", 1)[1]))
        except ValueError:
            raise ConfigurationError(f"arrival: bad closed-loop spec {arrival_raw!r}") from None
    else:
        raise ConfigurationError(
            f"arrival: expected 'sequential' or 'closed:N', got {arrival_raw!r}"
        )
    if seq_lens is None:
        try:
            seq_lens = tuple(int(part) for part in settings["seq_lens"].split(",") if part.strip())
        except ValueError:
            raise ConfigurationError(f"seq_lens: bad list {settings['seq_lens']!r}") from None
    return Workload(
        num_requests=requests if requests is not None else int(settings["requests"]),
        seq_lengths=tuple(seq_lens),
        short_len=int(settings["short_len"]),
        arrival=arrival,
        seed=seed if seed is not None else int(settings["seed"], 0),
    )


__all__ = [
    "Arrival",
    "Workload",
    "generate_requests",
    "percentile",
    "StatSummary",
    "LatencyCell",
    "LatencyReport",
    "run_experiment",
    "VerifyResult",
    "verify_equivalence",
    "emit_report",
    "CalibrationRow",
    "calibrate",
    "workload_from_settings",
    "CSV_HEADER",
]
