import httpx
import pytest

from sage.core import Channel, Document, FrequencyBucket, Query
from sage.errors import GateConfigError, PolicyMismatchError, SamplingError
from sage.metrics import EvalConfig, EvalReport, SliceStats
from sage.simulation import (
    GateConfig,
    GateThresholds,
    SampleSet,
    StrataSpec,
    SutKind,
    SystemUnderTest,
    TrafficRecord,
    compare_candidates,
    gate,
    replay,
    stratified_sample,
)


def traffic_record(i, channel=Channel.EMAIL, bucket=FrequencyBucket.TORSO, n_docs=3):
    query = Query(
        query_id=f"q{i}",
        text=f"query {i}",
        facets={"Title": ("data analyst",)},
        channel=channel,
        frequency_bucket=bucket,
    )
    docs = tuple(
        (f"d{i}-{j}", Document(doc_id=f"d{i}-{j}", fields={"Title": ("Data Analyst",)}), j)
        for j in range(1, n_docs + 1)
    )
    return TrafficRecord(query=query, served_results=docs, timestamp="2026-01-01T00:00:00Z")


def make_log(email=900, feed=100):
    log = [traffic_record(i, channel=Channel.EMAIL) for i in range(email)]
    log += [traffic_record(email + i, channel=Channel.FEED) for i in range(feed)]
    return log


def spec(email=0.5, feed=0.5, size=100, seed=7, **kwargs):
    return StrataSpec(
        dimensions=(("channel", {"email": email, "feed": feed}),),
        total_sample_size=size,
        seed=seed,
        **kwargs,
    )


class TestStratifiedSample:
    def test_quota_arithmetic(self):
        sample = stratified_sample(make_log(900, 100), spec())
        counts = sample.counts()
        assert counts == {"channel=email": 50, "channel=feed": 50}
        assert sample.shortfalls == {}

    def test_seeded_reproducibility(self):
        log = make_log(200, 200)
        a = stratified_sample(log, spec(size=60, seed=42))
        b = stratified_sample(log, spec(size=60, seed=42))
        assert [r.query.query_id for _, r in a.records] == [
            r.query.query_id for _, r in b.records
        ]
        c = stratified_sample(log, spec(size=60, seed=43))
        assert [r.query.query_id for _, r in a.records] != [
            r.query.query_id for _, r in c.records
        ]

    def test_shortfall_redistribution(self):
        sample = stratified_sample(make_log(900, 30), spec())
        counts = sample.counts()
        assert counts == {"channel=email": 70, "channel=feed": 30}
        assert sample.shortfalls == {"channel=feed": 20}

    def test_counts_sum_to_min_of_target_and_available(self):
        sample = stratified_sample(make_log(10, 5), spec(size=100))
        assert sum(sample.counts().values()) == 15

    def test_chunking_independence(self):
        log = make_log(100, 100)
        as_list = stratified_sample(log, spec(size=40))
        as_generator = stratified_sample(iter(log), spec(size=40))
        assert [r.query.query_id for _, r in as_list.records] == [
            r.query.query_id for _, r in as_generator.records
        ]

    def test_crossed_dimensions(self):
        log = []
        i = 0
        for channel in (Channel.EMAIL, Channel.FEED):
            for bucket in (FrequencyBucket.HEAD, FrequencyBucket.TAIL):
                for _ in range(50):
                    log.append(traffic_record(i, channel=channel, bucket=bucket))
                    i += 1
        crossed = StrataSpec(
            dimensions=(
                ("channel", {"email": 0.5, "feed": 0.5}),
                ("frequency_bucket", {"head": 0.5, "tail": 0.5}),
            ),
            total_sample_size=40,
            seed=1,
        )
        counts = stratified_sample(log, crossed).counts()
        assert all(count == 10 for count in counts.values())
        assert len(counts) == 4

    def test_upweight_tail_defaults(self):
        log = []
        for i, bucket in enumerate(
            [FrequencyBucket.HEAD] * 50 + [FrequencyBucket.TORSO] * 50 + [FrequencyBucket.TAIL] * 50
        ):
            log.append(traffic_record(i, bucket=bucket))
        tail_spec = StrataSpec(
            dimensions=(), total_sample_size=20, seed=3, upweight_tail=True
        )
        counts = stratified_sample(log, tail_spec).counts()
        assert counts["frequency_bucket=tail"] == 10  # 0.5 of 20
        assert counts["frequency_bucket=head"] == 4  # 0.2 of 20

    def test_empty_log_errors(self):
        with pytest.raises(SamplingError, match="empty"):
            stratified_sample([], spec())

    def test_proportions_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to"):
            StrataSpec(dimensions=(("channel", {"email": 0.5}),), total_sample_size=10)

    def test_jsonl_roundtrip(self, tmp_path):
        sample = stratified_sample(make_log(20, 20), spec(size=10))
        path = tmp_path / "sample.jsonl"
        sample.to_jsonl(path)
        loaded = SampleSet.from_jsonl(path, sample.spec)
        assert [r.query.query_id for _, r in loaded.records] == [
            r.query.query_id for _, r in sample.records
        ]


class TestReplay:
    def sample_of(self, n=10):
        log = make_log(n, 0)
        return stratified_sample(log, spec(email=1.0, feed=0.0, size=n))

    def test_recorded_run_reproduces_exactly(self, tmp_path):
        sample = self.sample_of(10)
        results_file = tmp_path / "run.jsonl"
        from sage.jsonl import write_jsonl

        write_jsonl(
            results_file,
            (
                {
                    "query": record.query.to_dict(),
                    "results": [
                        {"doc_id": doc_id, "document": doc.to_dict(), "position": pos}
                        for doc_id, doc, pos in record.served_results
                    ],
                }
                for _, record in sample.records
            ),
        )
        sut = SystemUnderTest(
            sut_id="baseline", kind=SutKind.RECORDED_RUN, results_file=str(results_file)
        )
        first = replay(sut, sample)
        second = replay(sut, sample)
        assert len(first.results) == 10
        assert not first.failures
        assert [r.to_dict() for r in first.results] == [r.to_dict() for r in second.results]

    def test_recorded_run_missing_query_fails_that_query(self, tmp_path):
        sample = self.sample_of(3)
        results_file = tmp_path / "run.jsonl"
        results_file.write_text("", encoding="utf-8")
        sut = SystemUnderTest(
            sut_id="baseline", kind=SutKind.RECORDED_RUN, results_file=str(results_file)
        )
        result = replay(sut, sample)
        assert len(result.failures) == 3

    def test_http_endpoint_shape(self):
        def handler(request):
            import json as _json

            query = _json.loads(request.content)["query"]
            return httpx.Response(
                200,
                json={
                    "results": [
                        {
                            "doc_id": f"{query['query_id']}-r{i}",
                            "fields": {"Title": ["Data Analyst"]},
                            "position": i,
                        }
                        for i in range(1, 6)
                    ]
                },
            )

        sample = self.sample_of(20)
        sut = SystemUnderTest(
            sut_id="candidate", kind=SutKind.HTTP_ENDPOINT, endpoint="http://sut/rank"
        )
        result = replay(sut, sample, parallelism=4, transport=httpx.MockTransport(handler))
        assert len(result.results) == 20
        assert all(len(r.results) == 5 for r in result.results)
        # order preserved relative to sample
        assert [r.query.query_id for r in result.results] == [
            rec.query.query_id for _, rec in sample.records
        ]

    def test_per_query_failure_isolation(self):
        def handler(request):
            import json as _json

            query = _json.loads(request.content)["query"]
            if query["query_id"] == "q3":
                return httpx.Response(500, text="boom")
            return httpx.Response(
                200, json={"results": [{"doc_id": "d", "fields": {}, "position": 1}]}
            )

        sample = self.sample_of(10)
        sut = SystemUnderTest(
            sut_id="flaky", kind=SutKind.HTTP_ENDPOINT, endpoint="http://sut/rank", max_retries=1
        )
        result = replay(
            sut, sample, parallelism=2, transport=httpx.MockTransport(handler), backoff_base_s=0.0
        )
        assert len(result.results) == 9
        assert len(result.failures) == 1
        assert result.failures[0].query_id == "q3"


def report_with(gr=None, pmr=None, ndcg=None, slice_name="segment=company-queries", k=10, version="1.0"):
    slices = {
        slice_name: SliceStats(
            gr_mean=gr, pmr_mean=pmr, ndcg_mean=ndcg, n_queries=10, n_gr_undefined=0, n_ndcg_undefined=0
        )
    }
    return EvalReport(policy_version=version, config=EvalConfig(k=k), slices=slices)


class TestCompare:
    def test_relative_delta_minus_sixteen_percent(self):
        comparison = compare_candidates(report_with(gr=0.50), report_with(gr=0.42))
        delta = comparison.delta("gr", "segment=company-queries")
        assert delta.relative == pytest.approx(-0.16)
        assert delta.absolute == pytest.approx(-0.08)

    def test_identical_reports_zero_deltas(self):
        comparison = compare_candidates(report_with(gr=0.5, pmr=0.1), report_with(gr=0.5, pmr=0.1))
        assert all(d.relative in (0.0, None) for d in comparison.deltas)

    def test_pmr_improvement_delta(self):
        comparison = compare_candidates(report_with(pmr=0.10), report_with(pmr=0.05))
        assert comparison.delta("pmr", "segment=company-queries").relative == pytest.approx(-0.5)

    def test_k_mismatch_errors(self):
        with pytest.raises(PolicyMismatchError, match="different K"):
            compare_candidates(report_with(gr=0.5, k=10), report_with(gr=0.5, k=5))

    def test_version_mismatch_needs_override(self):
        base = report_with(gr=0.5, version="1.0")
        cand = report_with(gr=0.5, version="2.0")
        with pytest.raises(PolicyMismatchError, match="versions differ"):
            compare_candidates(base, cand)
        assert compare_candidates(base, cand, allow_cross_version=True).deltas

    def test_missing_slices_reported_uncomparable(self):
        base = report_with(gr=0.5, slice_name="channel=email")
        cand = report_with(gr=0.5, slice_name="channel=feed")
        comparison = compare_candidates(base, cand)
        assert set(comparison.uncomparable_slices) == {"channel=email", "channel=feed"}
        assert comparison.deltas == ()


class TestGate:
    def config(self, pmr=0.10, gr=0.05, ndcg=0.05, per_slice=None):
        return GateConfig(
            default=GateThresholds(
                max_pmr_increase=pmr, max_gr_decrease=gr, max_ndcg_decrease=ndcg
            ),
            per_slice=per_slice or {},
        )

    def test_gr_regression_fails(self):
        comparison = compare_candidates(report_with(gr=0.50), report_with(gr=0.42))
        verdict = gate(comparison, self.config())
        assert verdict.verdict == "FAIL"
        (breach,) = verdict.breaches
        assert breach.metric == "gr"
        assert breach.slice_name == "segment=company-queries"
        assert breach.baseline == pytest.approx(0.50)
        assert breach.candidate == pytest.approx(0.42)
        assert breach.relative == pytest.approx(-0.16)

    def test_within_bounds_passes(self):
        comparison = compare_candidates(report_with(gr=0.50), report_with(gr=0.49))
        verdict = gate(comparison, self.config(gr=0.05))
        assert verdict.passed
        assert verdict.comparison.deltas  # full delta table still attached

    def test_improvements_never_breach(self):
        comparison = compare_candidates(report_with(pmr=0.10), report_with(pmr=0.05))
        assert gate(comparison, self.config(pmr=0.10)).passed

    def test_zero_baseline_pmr_increase_breaches(self):
        comparison = compare_candidates(report_with(pmr=0.0), report_with(pmr=0.02))
        verdict = gate(comparison, self.config())
        assert not verdict.passed
        assert verdict.breaches[0].relative is None

    def test_removing_threshold_flips_only_its_breaches(self):
        base = report_with(gr=0.50, pmr=0.10)
        cand = report_with(gr=0.42, pmr=0.20)
        comparison = compare_candidates(base, cand)
        both = gate(comparison, self.config(pmr=0.10, gr=0.05))
        assert {b.metric for b in both.breaches} == {"gr", "pmr"}
        no_gr_bound = gate(comparison, GateConfig(default=GateThresholds(max_pmr_increase=0.10)))
        assert {b.metric for b in no_gr_bound.breaches} == {"pmr"}

    def test_per_slice_override(self):
        comparison = compare_candidates(report_with(gr=0.50), report_with(gr=0.42))
        lenient = self.config(
            per_slice={"segment=company-queries": GateThresholds(max_gr_decrease=0.5)}
        )
        assert gate(comparison, lenient).passed

    def test_threshold_sign_validation(self):
        with pytest.raises(GateConfigError):
            GateConfig(default=GateThresholds(max_pmr_increase=-0.1))
