"""The deterministic three-part ranking model.

One parameter set drives three entry points: a target-independent encoder
over the long behavior sequence (quadratic in sequence length, on purpose),
a per-candidate scorer, and an externality fusion step that folds organic
results into the final ranking. ``monolithic_forward`` composes all three
in-process and is the reference every distributed execution path must match
bit for bit.

Numerics are locked down: single-head attention with no learned projections,
max-subtracted softmax, and every reduction in ascending index order. The
jitted kernels keep exactly that order (LLVM does not reassociate or fuse
FP ops at default flags), so they agree bit-exactly with a straight-line
scalar evaluation of the same formulas.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numba import njit, uint64

from .core import (
    MASK64,
    Candidate,
    OrganicItem,
    RankedList,
    Request,
    ScoredCandidate,
    UserRepr,
    _embed_into,
    _embed_many,
)

DEFAULT_EMBED_DIM = 32
DEFAULT_ITEM_SEED = 101
DEFAULT_USER_SEED = 202
DEFAULT_CTX_SEED = 303
DEFAULT_QUERY_SEED = 404


@dataclass(frozen=True)
class ModelParams:
    """Fixed, seed-derived stand-in for trained weights; shared read-only."""

    d: int = DEFAULT_EMBED_DIM
    item_seed: int = DEFAULT_ITEM_SEED
    user_seed: int = DEFAULT_USER_SEED
    ctx_seed: int = DEFAULT_CTX_SEED
    query_seed: int = DEFAULT_QUERY_SEED
    beta: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("embedding dim must be >= 1")
        if not math.isfinite(self.beta):
            raise ValueError("beta must be finite")


@njit(cache=True, nogil=True)
def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


@njit(cache=True, nogil=True)
def _softmax_into(x, out):
    # max-subtracted for stability; adds stay in ascending index order
    n = x.shape[0]
    m = x[0]
    for k in range(1, n):
        if x[k] > m:
            m = x[k]
    z = 0.0
    for k in range(n):
        e = math.exp(x[k] - m)
        out[k] = e
        z += e
    for k in range(n):
        out[k] = out[k] / z


@njit(cache=True, nogil=True)
def _dot(a, b):
    acc = 0.0
    for j in range(a.shape[0]):
        acc += a[j] * b[j]
    return acc


@njit(cache=True, nogil=True)
def _encode_long(item_seed, query_seed, ids, d):
    t = ids.shape[0]
    u = np.zeros(d, dtype=np.float64)
    if t == 0:
        return u
    sqrt_d = math.sqrt(np.float64(d))
    E = _embed_many(item_seed, ids, d)
    Et = E.T.copy()
    # pairwise scores: loops ordered so each S[i,k] accumulates j ascending
    # while the innermost k loop stays elementwise (vectorizable without
    # changing the reduction order)
    S = np.zeros((t, t), dtype=np.float64)
    for i in range(t):
        row = S[i, :]
        for j in range(d):
            eij = E[i, j]
            col = Et[j, :]
            for k in range(t):
                row[k] += eij * col[k]
        for k in range(t):
            row[k] = row[k] / sqrt_d
    A = np.empty((t, t), dtype=np.float64)
    for i in range(t):
        _softmax_into(S[i, :], A[i, :])
    H = np.zeros((t, d), dtype=np.float64)
    for i in range(t):
        hrow = H[i, :]
        for k in range(t):
            aik = A[i, k]
            erow = E[k, :]
            for j in range(d):
                hrow[j] += aik * erow[j]
    q = np.empty(d, dtype=np.float64)
    _embed_into(query_seed, uint64(0), q)
    scores = np.empty(t, dtype=np.float64)
    for i in range(t):
        acc = 0.0
        for j in range(d):
            acc += q[j] * H[i, j]
        scores[i] = acc / sqrt_d
    w = np.empty(t, dtype=np.float64)
    _softmax_into(scores, w)
    for i in range(t):
        wi = w[i]
        for j in range(d):
            u[j] += wi * H[i, j]
    return u


@njit(cache=True, nogil=True)
def _score_chunk(item_seed, user_seed, ctx_seed, d, uvec, short_ids, user_id, context_id, cand_ids):
    n = cand_ids.shape[0]
    logits = np.empty(n, dtype=np.float64)
    sqrt_d = math.sqrt(np.float64(d))
    ts = short_ids.shape[0]
    s_emb = _embed_many(item_seed, short_ids, d)
    p_u = np.empty(d, dtype=np.float64)
    _embed_into(user_seed, user_id, p_u)
    p_c = np.empty(d, dtype=np.float64)
    _embed_into(ctx_seed, context_id, p_c)
    e_t = np.empty(d, dtype=np.float64)
    att = np.empty(ts, dtype=np.float64)
    wts = np.empty(ts, dtype=np.float64)
    c = np.empty(d, dtype=np.float64)
    for idx in range(n):
        _embed_into(item_seed, cand_ids[idx], e_t)
        for j in range(d):
            c[j] = 0.0
        if ts > 0:
            for s in range(ts):
                acc = 0.0
                for j in range(d):
                    acc += e_t[j] * s_emb[s, j]
                att[s] = acc / sqrt_d
            _softmax_into(att, wts)
            for s in range(ts):
                ws = wts[s]
                for j in range(d):
                    c[j] += ws * s_emb[s, j]
        d1 = _dot(uvec, e_t)
        d2 = _dot(c, e_t)
        d3 = _dot(p_u, e_t)
        d4 = _dot(p_c, e_t)
        logits[idx] = (((d1 + d2) + d3) + d4) / sqrt_d
    return logits


@njit(cache=True, nogil=True)
def _externality_chunk(item_seed, d, cand_ids, organic_ids):
    n = cand_ids.shape[0]
    ext = np.zeros(n, dtype=np.float64)
    m = organic_ids.shape[0]
    if m == 0:
        return ext
    sqrt_d = math.sqrt(np.float64(d))
    o_emb = _embed_many(item_seed, organic_ids, d)
    e_t = np.empty(d, dtype=np.float64)
    for idx in range(n):
        _embed_into(item_seed, cand_ids[idx], e_t)
        best = 0.0
        for jdx in range(m):
            acc = 0.0
            for j in range(d):
                acc += e_t[j] * o_emb[jdx, j]
            v = acc / sqrt_d
            if jdx == 0 or v > best:
                best = v
        ext[idx] = best
    return ext


def sigmoid(x: float) -> float:
    """1 / (1 + exp(-x)), evaluated exactly as the kernels evaluate it."""
    return float(_sigmoid(x))


def softmax(scores: Sequence[float]) -> np.ndarray:
    """Max-subtracted softmax with index-order accumulation (n >= 1)."""
    x = np.ascontiguousarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] == 0:
        raise ValueError("softmax needs a nonempty flat vector")
    out = np.empty_like(x)
    _softmax_into(x, out)
    return out


def _u64(x: int) -> uint64:
    return uint64(x & MASK64)


def pre_forward(
    params: ModelParams,
    long_behaviors,
    *,
    produced_at: int = 0,
    source_request: int = 0,
) -> UserRepr:
    """Encode the long behavior sequence into the user vector.

    Depends only on (params, long_behaviors); candidates never enter.
    An empty sequence maps to the zero vector. Cost grows quadratically
    with the sequence length.
    """
    ids = np.ascontiguousarray(long_behaviors, dtype=np.uint64)
    vec = _encode_long(_u64(params.item_seed), _u64(params.query_seed), ids, uint64(params.d))
    return UserRepr(vector=vec, produced_at=produced_at, source_request=source_request)


def score_candidates(
    params: ModelParams,
    u: UserRepr,
    request: Request,
    item_ids: Sequence[int],
) -> list[tuple[int, float]]:
    """Score a batch of candidate item ids; each candidate is independent.

    Returns (item_id, logit) pairs in input order. Splitting the batch and
    concatenating the results reproduces the unsplit output bit-exactly.
    """
    if u.vector.shape[0] != params.d:
        raise ValueError(
            f"user vector has dim {u.vector.shape[0]}, model expects {params.d}"
        )
    ids = np.ascontiguousarray(item_ids, dtype=np.uint64)
    logits = _score_chunk(
        _u64(params.item_seed),
        _u64(params.user_seed),
        _u64(params.ctx_seed),
        uint64(params.d),
        u.vector,
        request.short_behaviors,
        _u64(request.user_id),
        _u64(request.context_id),
        ids,
    )
    return [(int(i), float(l)) for i, l in zip(ids, logits)]


def mid_forward(
    params: ModelParams,
    u: UserRepr,
    request: Request,
    candidate: Candidate,
) -> tuple[float, float]:
    """Score one candidate: returns (logit, ctr) with ctr = sigmoid(logit)."""
    (_, logit), = score_candidates(params, u, request, [candidate.item_id])
    return logit, sigmoid(logit)


def post_forward(
    params: ModelParams,
    scored: Sequence[tuple[int, float]],
    organics: Sequence[OrganicItem],
) -> RankedList:
    """Fuse organic-item similarity into final scores and rank.

    final_score = sigmoid(logit + beta * ext) where ext is the best scaled
    dot product against the organic items (0 when there are none). Sorted
    by descending final_score, ties broken by ascending item_id.
    """
    ids = [item_id for item_id, _ in scored]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate item_id in scored candidates")
    if not scored:
        return RankedList()
    cand_ids = np.ascontiguousarray(ids, dtype=np.uint64)
    organic_ids = np.ascontiguousarray([o.item_id for o in organics], dtype=np.uint64)
    ext = _externality_chunk(_u64(params.item_seed), uint64(params.d), cand_ids, organic_ids)
    entries = []
    for (item_id, logit), e in zip(scored, ext):
        entries.append(
            ScoredCandidate(
                item_id=item_id,
                logit=logit,
                ctr=sigmoid(logit),
                final_score=sigmoid(logit + params.beta * float(e)),
            )
        )
    entries.sort(key=lambda sc: (-sc.final_score, sc.item_id))
    return RankedList(entries=tuple(entries))


def monolithic_forward(
    params: ModelParams,
    request: Request,
    candidates: Sequence[Candidate],
    organics: Sequence[OrganicItem],
) -> RankedList:
    """All three stages as one in-process composition, no serialization.

    This is the single-graph reference: every distributed execution path
    must reproduce its output bit-exactly.
    """
    u = pre_forward(params, request.long_behaviors, source_request=request.request_id)
    scored = score_candidates(params, u, request, [c.item_id for c in candidates])
    return post_forward(params, scored, organics)


class DeterministicModel:
    """The real model behind the serving pipeline.

    One instance (hence one parameter set) is shared read-only by every
    node and thread; the three stage methods are pure given their inputs.
    """

    def __init__(self, params: ModelParams):
        self.params = params

    def pre(self, request: Request) -> UserRepr:
        return pre_forward(
            self.params,
            request.long_behaviors,
            produced_at=time.perf_counter_ns(),
            source_request=request.request_id,
        )

    def score(self, u: UserRepr, request: Request, item_ids: Sequence[int]) -> list[tuple[int, float]]:
        return score_candidates(self.params, u, request, item_ids)

    def post(self, scored: Sequence[tuple[int, float]], organics: Sequence[OrganicItem]) -> RankedList:
        return post_forward(self.params, scored, organics)

    def monolithic(
        self,
        request: Request,
        candidates: Sequence[Candidate],
        organics: Sequence[OrganicItem],
    ) -> RankedList:
        return monolithic_forward(self.params, request, candidates, organics)


def warm_model(params: ModelParams | None = None) -> None:
    """Compile and exercise every kernel once so timed runs never pay JIT cost."""
    p = params or ModelParams(d=4)
    req = Request(
        request_id=1,
        session_id=1,
        user_id=1,
        long_behaviors=[1, 2],
        short_behaviors=[3],
        context_id=1,
    )
    u = pre_forward(p, req.long_behaviors)
    scored = score_candidates(p, u, req, [5, 6])
    post_forward(p, scored, [OrganicItem(item_id=9)])
    softmax([0.0, 1.0])
    sigmoid(0.0)


__all__ = [
    "ModelParams",
    "DeterministicModel",
    "pre_forward",
    "mid_forward",
    "score_candidates",
    "post_forward",
    "monolithic_forward",
    "sigmoid",
    "softmax",
    "warm_model",
]
