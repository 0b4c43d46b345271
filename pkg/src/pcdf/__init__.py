"""Overlapped-ranking serving testbed with a bit-reproducible model.

One deep ranking model is split into a behavior encoder, a per-candidate
scorer, and an externality fusion step. The serving pipeline runs the
encoder in parallel with retrieval and pre-ranking, parks its output in a
TTL cache, and proves with real concurrent execution that rank-stage
latency stops depending on behavior-sequence length while every score
stays bit-identical to the serialized baseline.
"""
from .bench import (
    Arrival,
    LatencyReport,
    Workload,
    calibrate,
    emit_report,
    generate_requests,
    percentile,
    run_experiment,
    verify_equivalence,
)
from .cache import CacheKey, CacheStats, KeyKind, TtlCache
from .core import (
    Candidate,
    OrganicItem,
    RankedList,
    Request,
    ScoredCandidate,
    UserRepr,
    embed,
    mix64,
    ranked_lists_identical,
)
from .model import (
    DeterministicModel,
    ModelParams,
    mid_forward,
    monolithic_forward,
    post_forward,
    pre_forward,
    score_candidates,
    sigmoid,
    softmax,
)
from .pipeline import (
    ChannelSpec,
    MissPolicy,
    Mode,
    PipelineConfig,
    ServeResult,
    StageTrace,
    StubModel,
    build_fabric,
    critical_path_latency,
    merge_scored,
    pre_rank,
    retrieve,
    serve,
    serve_baseline,
    serve_pcdf,
    split_candidates,
)
from .simnet import (
    Fabric,
    LatencySpec,
    NodePool,
    PoolKind,
    RpcChannel,
    RpcFailure,
    utilization_report,
)

__version__ = "0.1.0"
