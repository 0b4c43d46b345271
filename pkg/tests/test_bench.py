import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pcdf.bench import (
    Arrival,
    CSV_HEADER,
    LatencyCell,
    LatencyReport,
    StatSummary,
    Workload,
    calibrate,
    emit_report,
    generate_requests,
    percentile,
    run_experiment,
    verify_equivalence,
)
from pcdf.core import mix64
from pcdf.model import DeterministicModel, ModelParams
from pcdf.pipeline import ChannelSpec, Mode, PipelineConfig
from pcdf.simnet import LatencySpec

MS = 1_000_000


def _fast_config(mode=Mode.BASELINE, **kw):
    defaults = dict(
        mode=mode,
        retrieval_delay=LatencySpec.fixed(1 * MS),
        pre_rank_delay=LatencySpec.fixed(1 * MS),
        candidates_per_request=8,
        organics_per_request=2,
        split_count=2,
        model_params=ModelParams(d=4),
        channels={name: ChannelSpec(latency=LatencySpec.fixed(0))
                  for name in ("pre_model", "cache_put", "cache_get",
                               "mid_model", "post_model")},
    )
    defaults.update(kw)
    return PipelineConfig(**defaults)


def _tiny_workload(n=6, lengths=(0, 4), short=3, seed=7, arrival=None):
    return Workload(
        num_requests=n,
        seq_lengths=lengths,
        short_len=short,
        arrival=arrival or Arrival.sequential(),
        seed=seed,
    )


class TestGenerateRequests:
    def test_formulas(self):
        w = _tiny_workload(n=3, seed=20)
        reqs = generate_requests(w, 5)
        base = mix64(20)
        for i, r in enumerate(reqs):
            user = mix64(20 + i)
            assert r.user_id == user
            assert r.session_id == mix64(user)
            assert r.request_id == mix64(base + i)
            assert r.context_id == mix64(20 ^ i)
            assert len(r.long_behaviors) == 5
            assert len(r.short_behaviors) == 3
            for j, b in enumerate(r.long_behaviors):
                assert int(b) == mix64(user ^ mix64(j))

    def test_short_is_prefix_of_long(self):
        reqs = generate_requests(_tiny_workload(n=2, short=3), 8)
        for r in reqs:
            assert list(r.short_behaviors) == list(r.long_behaviors[:3])

    def test_zero_length_long(self):
        reqs = generate_requests(_tiny_workload(n=2, short=3), 0)
        for r in reqs:
            assert len(r.long_behaviors) == 0
            assert len(r.short_behaviors) == 3

    def test_deterministic_and_distinct_ids(self):
        w = _tiny_workload(n=40)
        a = generate_requests(w, 4)
        b = generate_requests(w, 4)
        assert [r.request_id for r in a] == [r.request_id for r in b]
        assert len({r.request_id for r in a}) == 40

    def test_negative_length_rejected(self):
        with pytest.raises(ValueError):
            generate_requests(_tiny_workload(), -1)

    def test_workload_validation(self):
        with pytest.raises(ValueError):
            Workload(num_requests=0)
        with pytest.raises(ValueError):
            Workload(seq_lengths=())
        with pytest.raises(ValueError):
            Workload(short_len=65)
        with pytest.raises(ValueError):
            Arrival(concurrency=0)


class TestPercentile:
    def test_known_values(self):
        s = [10, 20, 30, 40]
        assert percentile(s, 50) == 20
        assert percentile(s, 75) == 30
        assert percentile(s, 100) == 40
        assert percentile(s, 1) == 10
        assert percentile([7], 99) == 7

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            percentile([], 50)
        with pytest.raises(ValueError):
            percentile([1], 0)
        with pytest.raises(ValueError):
            percentile([1], 101)

    @given(
        st.lists(st.integers(min_value=0, max_value=10**9), min_size=1, max_size=60),
        st.integers(min_value=1, max_value=100),
    )
    def test_matches_nearest_rank_definition(self, samples, p):
        ordered = sorted(samples)
        rank = math.ceil(p * len(ordered) / 100)
        assert percentile(samples, p) == ordered[max(rank - 1, 0)]

    def test_summary_of_empty(self):
        s = StatSummary.of([])
        assert (s.mean, s.p50, s.p90, s.p99) == (0, 0, 0, 0)

    def test_summary_fields(self):
        s = StatSummary.of([100] * 10)
        assert s.mean == 100 and s.p50 == 100 and s.p99 == 100


class TestRunExperiment:
    def test_smoke_counts_and_budget(self):
        cfg = _fast_config()
        w = _tiny_workload(n=4, lengths=(0, 4))
        report = run_experiment(cfg, w, budget_ns=60 * MS)
        assert [c.seq_len for c in report.cells] == [0, 4]
        for c in report.cells:
            assert c.mode == "baseline"
            assert c.count == 4
            assert c.failures == 0
            assert c.e2e.p50 >= 2 * MS
            assert c.rank.p50 > 0
            assert c.within_budget
            assert set(c.utilization) == {"io", "compute"}
            for pool in c.utilization.values():
                assert 0.0 <= pool["utilization"] <= 1.0
        assert report.meta["seed"] == w.seed
        assert report.cell("baseline", 4) is report.cells[1]
        with pytest.raises(KeyError):
            report.cell("pcdf", 4)

    def test_all_failures_counted(self):
        channels = {name: ChannelSpec(latency=LatencySpec.fixed(0))
                    for name in ("pre_model", "cache_put", "cache_get",
                                 "mid_model", "post_model")}
        channels["mid_model"] = ChannelSpec(latency=LatencySpec.fixed(0), failure_prob=1.0)
        cfg = _fast_config(channels=channels)
        report = run_experiment(cfg, _tiny_workload(n=5, lengths=(4,)), budget_ns=60 * MS)
        cell = report.cells[0]
        assert cell.failures == cell.count == 5
        # no successful samples: summaries are all zero
        assert cell.e2e.p50 == 0

    def test_closed_loop_arrival(self):
        cfg = _fast_config(mode=Mode.PCDF)
        w = _tiny_workload(n=8, lengths=(4,), arrival=Arrival.closed_loop(4))
        report = run_experiment(cfg, w, budget_ns=60 * MS)
        cell = report.cells[0]
        assert cell.count == 8 and cell.failures == 0
        for pool in cell.utilization.values():
            assert 0.0 <= pool["utilization"] <= 1.0
            assert pool["max_occupancy"] <= pool["capacity"]


class TestEmitReport:
    def _report(self):
        cfg = _fast_config()
        return run_experiment(cfg, _tiny_workload(n=2, lengths=(4,)), budget_ns=60 * MS)

    def test_json_round_trip(self, tmp_path):
        report = self._report()
        path = tmp_path / "out.json"
        emit_report(report, "json", str(path))
        doc = json.loads(path.read_text())
        assert doc["meta"]["seed"] == report.meta["seed"]
        assert len(doc["results"]) == 1
        row = doc["results"][0]
        assert row["mode"] == "baseline" and row["seq_len"] == 4
        assert row["end_to_end"]["p50"] == report.cells[0].e2e.p50
        assert row["rank_stage"]["p99"] == report.cells[0].rank.p99

    def test_csv_shape(self, tmp_path):
        report = self._report()
        path = tmp_path / "out.csv"
        emit_report(report, "csv", str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 2
        fields = lines[1].split(",")
        assert fields[0] == "baseline"
        assert [int(x) for x in fields[1:]] == [
            4, 2, 0,
            report.cells[0].e2e.p50, report.cells[0].e2e.p99,
            report.cells[0].rank.p50, report.cells[0].rank.p99,
        ]

    def test_empty_report_is_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        emit_report(LatencyReport(meta={}, cells=[]), "csv", str(path))
        assert path.read_text() == CSV_HEADER + "\n"

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(LatencyReport(meta={}, cells=[]), "yaml", str(tmp_path / "x"))

    def test_unwritable_path_raises_oserror(self, tmp_path):
        with pytest.raises(OSError, match="cannot write"):
            emit_report(LatencyReport(meta={}, cells=[]), "csv",
                        str(tmp_path / "missing" / "out.csv"))


class _UlpNudgeModel:
    """Staged paths drift the lowest item's logit by one ulp; the single
    graph stays honest, so the checker must flag the difference."""

    def __init__(self, params):
        self.inner = DeterministicModel(params)
        self.params = params

    def pre(self, request, **kw):
        return self.inner.pre(request, **kw)

    def score(self, u, request, item_ids):
        rows = self.inner.score(u, request, item_ids)
        victim = min(i for i, _ in rows) if rows else None
        return [
            (i, np.nextafter(s, np.inf) if i == victim else s)
            for i, s in rows
        ]

    def post(self, scored, organics):
        return self.inner.post(scored, organics)

    def monolithic(self, request, candidates, organics):
        return self.inner.monolithic(request, candidates, organics)


class TestVerifyEquivalence:
    def test_honest_model_passes(self):
        cfg = _fast_config()
        res = verify_equivalence(cfg, _tiny_workload(n=6, lengths=(0, 1, 5)),
                                 split_counts=(1, 3))
        assert res.passed
        assert res.checked == 6
        assert res.paths == 5
        assert res.divergence is None

    def test_single_ulp_is_detected(self):
        cfg = _fast_config()
        model = _UlpNudgeModel(cfg.model_params)
        res = verify_equivalence(cfg, _tiny_workload(n=4, lengths=(4,)),
                                 model=model, split_counts=(1,))
        assert not res.passed
        assert res.checked == 0
        d = res.divergence
        assert d is not None
        assert d["field"] in ("logit", "ctr", "final_score", "item_id")
        assert d["mode"] in ("baseline", "pcdf")
        assert "request_id" in d and "seq_len" in d


class TestCalibrate:
    def test_rows_and_cover(self):
        cfg = _fast_config(
            retrieval_delay=LatencySpec.fixed(20 * MS),
            pre_rank_delay=LatencySpec.fixed(10 * MS),
        )
        rows = calibrate(cfg, [1, 16], reps=3)
        assert [r.seq_len for r in rows] == [1, 16]
        for r in rows:
            assert r.cover_ns == 30 * MS
            assert r.median_span_ns > 0
            assert r.fits  # d=4 encodes far inside 30ms
