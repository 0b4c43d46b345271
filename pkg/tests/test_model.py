import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import reference_model as ref
from pcdf.core import Candidate, OrganicItem, Request, UserRepr, float_bits
from pcdf.model import (
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

P4 = ModelParams(d=4, item_seed=101, user_seed=202, ctx_seed=303, query_seed=404, beta=1.0)

# Frozen outputs of tests/reference_model.py for the fixed d=4 instances;
# regenerate by running that script if the formulas ever change.
PRE_3_9_27 = (
    "-0x1.1ce215484dc79p-1",
    "-0x1.584a2b1feac7bp-3",
    "0x1.f23d62501a893p-4",
    "-0x1.fd278aa000cfcp-4",
)
SCORE_TARGET_11 = "0x1.4b0a9d028b74dp-3"
MONO_ROWS = (
    (12, "0x1.8a091576b921ep-2", "0x1.30a7d157117f1p-1", "0x1.4176af78f01f2p-1"),
    (13, "-0x1.a5ed9d0029910p-6", "0x1.f968616c4f78cp-2", "0x1.25d00ae4244c0p-1"),
    (11, "0x1.4b0a9d028b74dp-3", "0x1.14a5292b604dcp-1", "0x1.b892d252011e4p-2"),
)


def _request(long=(3, 9, 27), short=(5, 6), user=77, ctx=88, rid=1):
    return Request(
        request_id=rid, session_id=2, user_id=user,
        long_behaviors=list(long), short_behaviors=list(short), context_id=ctx,
    )


class TestPreForward:
    def test_empty_sequence_is_zero_vector(self):
        u = pre_forward(P4, [])
        assert [x.hex() for x in u.vector] == ["0x0.0p+0"] * 4

    def test_single_element_equals_its_embedding(self):
        from pcdf.core import embed

        u = pre_forward(P4, [42])
        e = embed(P4.item_seed, 42, 4)
        assert [x.hex() for x in u.vector] == [x.hex() for x in e]

    def test_frozen_vector(self):
        u = pre_forward(P4, [3, 9, 27])
        assert tuple(x.hex() for x in u.vector) == PRE_3_9_27

    def test_pure_bitwise(self):
        a = pre_forward(P4, [3, 9, 27])
        b = pre_forward(P4, [3, 9, 27])
        assert [x.hex() for x in a.vector] == [x.hex() for x in b.vector]

    def test_candidate_independent(self):
        # output depends only on (params, long_behaviors); requests that
        # differ in context or candidates cannot change it
        a = pre_forward(P4, [3, 9, 27])
        b = pre_forward(P4, list(reversed([27, 9, 3])))
        assert [x.hex() for x in a.vector] == [x.hex() for x in b.vector]

    @given(st.lists(st.integers(min_value=0, max_value=2**64 - 1), max_size=12))
    @settings(max_examples=40, deadline=None)
    def test_matches_reference(self, ids):
        u = pre_forward(P4, ids)
        want = ref.pre_ref(P4.item_seed, P4.query_seed, ids, 4)
        assert [x.hex() for x in u.vector] == [w.hex() for w in want]


class TestSoftmax:
    @given(st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=200))
    @settings(max_examples=60, deadline=None)
    def test_nonnegative_and_normalized(self, xs):
        w = softmax(xs)
        assert np.all(w >= 0)
        assert abs(float(np.sum(w)) - 1.0) <= 2.0**-46

    def test_large_input_count(self):
        rng = random.Random(5)
        xs = [rng.uniform(-20, 20) for _ in range(4096)]
        w = softmax(xs)
        assert abs(float(np.sum(w)) - 1.0) <= 2.0**-46

    def test_uniform_on_equal_inputs(self):
        w = softmax([3.5] * 7)
        assert len(set(x.hex() for x in w)) == 1
        assert w[0] == pytest.approx(1 / 7)

    def test_stability_at_extreme_magnitudes(self):
        w = softmax([700.0, 710.0])
        assert math.isfinite(w[0]) and math.isfinite(w[1])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            softmax([])


class TestMidForward:
    def test_frozen_logit(self):
        u = pre_forward(P4, [3, 9, 27])
        logit, ctr = mid_forward(P4, u, _request(), Candidate(item_id=11, bid=1))
        assert logit.hex() == SCORE_TARGET_11
        assert ctr.hex() == sigmoid(logit).hex()

    def test_ctr_is_sigmoid_of_logit_exactly(self):
        u = pre_forward(P4, [3, 9, 27])
        for item in (11, 12, 13, 2**63):
            logit, ctr = mid_forward(P4, u, _request(), Candidate(item_id=item, bid=1))
            assert float_bits(ctr) == float_bits(sigmoid(logit))

    def test_same_candidate_twice_is_bit_identical(self):
        u = pre_forward(P4, [3, 9, 27])
        r = _request()
        a = mid_forward(P4, u, r, Candidate(item_id=11, bid=1))
        b = mid_forward(P4, u, r, Candidate(item_id=11, bid=1))
        assert a[0].hex() == b[0].hex() and a[1].hex() == b[1].hex()

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mid_forward(P4, UserRepr(vector=np.zeros(7)), _request(), Candidate(item_id=1, bid=1))

    def test_zero_vector_and_empty_short_reduces_to_profile_terms(self):
        # u = 0 and no short behaviors leave only the two profile dots
        u = UserRepr(vector=np.zeros(4))
        r = _request(short=())
        logit, _ = mid_forward(P4, u, r, Candidate(item_id=11, bid=1))
        e_t = ref.embed_ref(P4.item_seed, 11, 4)
        p_u = ref.embed_ref(P4.user_seed, r.user_id, 4)
        p_c = ref.embed_ref(P4.ctx_seed, r.context_id, 4)
        d3 = ref.dot_ref(p_u, e_t)
        d4 = ref.dot_ref(p_c, e_t)
        want = (((0.0 + 0.0) + d3) + d4) / math.sqrt(4.0)
        assert logit.hex() == want.hex()

    def test_sigmoid_zero_is_half(self):
        assert sigmoid(0.0) == 0.5

    def test_batched_equals_per_candidate(self):
        u = pre_forward(P4, [3, 9, 27])
        r = _request()
        ids = [11, 12, 13, 99, 2**40]
        batch = score_candidates(P4, u, r, ids)
        for item_id, logit in batch:
            single, _ = mid_forward(P4, u, r, Candidate(item_id=item_id, bid=1))
            assert logit.hex() == single.hex()

    def test_chunked_equals_unsplit(self):
        u = pre_forward(P4, [3, 9, 27])
        r = _request()
        ids = list(range(100, 117))
        whole = score_candidates(P4, u, r, ids)
        parts = score_candidates(P4, u, r, ids[:5]) + score_candidates(P4, u, r, ids[5:])
        assert [(i, l.hex()) for i, l in whole] == [(i, l.hex()) for i, l in parts]


class TestPostForward:
    def _scored(self):
        u = pre_forward(P4, [3, 9, 27])
        return score_candidates(P4, u, _request(), [11, 12, 13])

    def test_empty_organics_final_equals_ctr(self):
        rl = post_forward(P4, self._scored(), [])
        for sc in rl.entries:
            assert float_bits(sc.final_score) == float_bits(sc.ctr)

    def test_beta_zero_ranking_matches_logit_order(self):
        p = ModelParams(d=4, item_seed=101, user_seed=202, ctx_seed=303, query_seed=404, beta=0.0)
        scored = self._scored()
        rl = post_forward(p, scored, [OrganicItem(item_id=91)])
        by_logit = [i for i, _ in sorted(scored, key=lambda t: (-t[1], t[0]))]
        assert list(rl.item_ids()) == by_logit

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            post_forward(P4, [(1, 0.5), (1, 0.2)], [])

    def test_two_candidates_one_organic_matches_reference(self):
        scored = self._scored()[:2]
        rl = post_forward(P4, scored, [OrganicItem(item_id=91)])
        want = ref.post_ref(P4.item_seed, 4, P4.beta, [(i, l) for i, l in scored], [91])
        got = [(sc.item_id, sc.logit.hex(), sc.ctr.hex(), sc.final_score.hex()) for sc in rl.entries]
        assert got == [(i, l.hex(), c.hex(), f.hex()) for i, l, c, f in want]

    def test_positive_externality_raises_final_score(self):
        scored = [(11, 0.25)]
        ext = ref.ext_ref(P4.item_seed, 4, 11, [11])
        assert ext > 0  # self-similarity is a positive scaled dot product
        bare = post_forward(P4, scored, []).entries[0].final_score
        fused = post_forward(P4, scored, [OrganicItem(item_id=11)]).entries[0].final_score
        assert fused > bare

    @given(
        st.floats(min_value=-3, max_value=3),
        st.floats(min_value=-3, max_value=1),
        st.floats(min_value=1e-3, max_value=2),
        st.floats(min_value=0.1, max_value=4),
    )
    @settings(max_examples=80)
    def test_fusion_strictly_monotone_in_externality(self, logit, e1, delta, beta):
        lo = sigmoid(logit + beta * e1)
        hi = sigmoid(logit + beta * (e1 + delta))
        assert hi > lo


class TestMonolithic:
    def test_equals_manual_composition(self):
        r = _request()
        cands = [Candidate(item_id=i, bid=1) for i in (11, 12, 13)]
        orgs = [OrganicItem(item_id=91)]
        mono = monolithic_forward(P4, r, cands, orgs)
        u = pre_forward(P4, r.long_behaviors)
        scored = score_candidates(P4, u, r, [c.item_id for c in cands])
        manual = post_forward(P4, scored, orgs)
        got = [(sc.item_id, sc.final_score.hex()) for sc in mono.entries]
        want = [(sc.item_id, sc.final_score.hex()) for sc in manual.entries]
        assert got == want

    def test_frozen_rows(self):
        r = _request()
        mono = monolithic_forward(
            P4, r,
            [Candidate(item_id=i, bid=1) for i in (11, 12, 13)],
            [OrganicItem(item_id=91)],
        )
        got = tuple(
            (sc.item_id, sc.logit.hex(), sc.ctr.hex(), sc.final_score.hex())
            for sc in mono.entries
        )
        assert got == MONO_ROWS

    def test_empty_candidates(self):
        rl = monolithic_forward(P4, _request(), [], [OrganicItem(item_id=91)])
        assert len(rl) == 0

    def test_random_small_instances_match_reference(self):
        rng = random.Random(2024)
        for trial in range(15):
            d = rng.choice([1, 2, 4])
            p = ModelParams(
                d=d,
                item_seed=rng.getrandbits(64),
                user_seed=rng.getrandbits(64),
                ctx_seed=rng.getrandbits(64),
                query_seed=rng.getrandbits(64),
                beta=rng.choice([0.0, 0.5, 1.0]),
            )
            longs = [rng.getrandbits(64) for _ in range(rng.randint(0, 8))]
            shorts = [rng.getrandbits(64) for _ in range(rng.randint(0, 4))]
            cands = list({rng.getrandbits(64) for _ in range(rng.randint(1, 6))})
            orgs = [rng.getrandbits(64) for _ in range(rng.randint(0, 3))]
            r = Request(
                request_id=trial, session_id=1, user_id=rng.getrandbits(64),
                long_behaviors=longs, short_behaviors=shorts,
                context_id=rng.getrandbits(64),
            )
            got = monolithic_forward(
                p, r,
                [Candidate(item_id=c, bid=0) for c in cands],
                [OrganicItem(item_id=o) for o in orgs],
            )
            want = ref.mono_ref(
                p.item_seed, p.user_seed, p.ctx_seed, p.query_seed, d, p.beta,
                longs, shorts, r.user_id, r.context_id, cands, orgs,
            )
            assert [
                (sc.item_id, sc.logit.hex(), sc.ctr.hex(), sc.final_score.hex())
                for sc in got.entries
            ] == [(i, l.hex(), c.hex(), f.hex()) for i, l, c, f in want]


class TestParams:
    def test_rejects_bad_dim(self):
        with pytest.raises(ValueError):
            ModelParams(d=0)

    def test_rejects_nonfinite_beta(self):
        with pytest.raises(ValueError):
            ModelParams(beta=float("nan"))

    def test_model_wrapper_round_trip(self):
        m = DeterministicModel(P4)
        r = _request()
        u = m.pre(r)
        scored = m.score(u, r, [11, 12])
        rl = m.post(scored, [OrganicItem(item_id=91)])
        mono = m.monolithic(r, [Candidate(item_id=11, bid=1), Candidate(item_id=12, bid=1)],
                            [OrganicItem(item_id=91)])
        assert [sc.final_score.hex() for sc in rl.entries] == [
            sc.final_score.hex() for sc in mono.entries
        ]
