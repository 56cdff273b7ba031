import json
from datetime import date, timedelta

import pytest

from sage.core import Channel, Document, Query, dump_policy
from sage.judge import JudgeKind, JudgeSpec, MatcherConfig, RubricConfig
from sage.metrics import ALL_SLICE, EvalConfig
from sage.monitor import TimeSeriesStore
from sage.pipeline import (
    DailyConfig,
    evaluate_results,
    grade_results,
    run_daily_pipeline,
    served_results_of,
)
from sage.simulation import RankedResults, StrataSpec

from .conftest import make_policy

DAY0 = date(2026, 1, 1)


def rubric_spec():
    return JudgeSpec(
        judge_id="rubric-judge",
        kind=JudgeKind.RUBRIC,
        rubric_config=RubricConfig(default=MatcherConfig()),
    )


def result_set(i, titles, channel=Channel.EMAIL):
    query = Query(
        query_id=f"q{i}",
        text="data analyst",
        facets={"Title": ("data analyst",)},
        channel=channel,
    )
    docs = tuple(
        (f"d{i}-{j}", Document(doc_id=f"d{i}-{j}", fields={"Title": (title,)}))
        for j, title in enumerate(titles)
    )
    return RankedResults(query=query, results=docs, sut_id="production")


class TestGradeResults:
    def test_lists_carry_slice_tags_and_version(self, policy):
        lists, failures = grade_results(
            rubric_spec(), policy, [result_set(1, ["Data Analyst", "barista"])]
        )
        assert not failures
        (ranked,) = lists
        assert ranked.policy_version == policy.policy_version
        assert ranked.slice_tags["channel"] == "email"
        assert ranked.grades == (4, 0)

    def test_evaluate_produces_channel_slices(self, policy):
        sets = [
            result_set(1, ["Data Analyst"], channel=Channel.EMAIL),
            result_set(2, ["barista"], channel=Channel.FEED),
        ]
        report = evaluate_results(rubric_spec(), policy, sets, EvalConfig(k=10), ["channel"])
        assert set(report.slices) == {ALL_SLICE, "channel=email", "channel=feed"}


def poor_counts_to_titles(poor, total=10):
    # poor docs score 0 (mismatch); good docs score 4 (exact)
    return ["barista"] * poor + ["Data Analyst"] * (total - poor)


def write_traffic_log(path, queries):
    records = []
    for i, poor in enumerate(queries):
        titles = poor_counts_to_titles(poor)
        records.append(
            {
                "query": {
                    "query_id": f"q{i}",
                    "text": "data analyst",
                    "facets": {"Title": ["data analyst"]},
                    "channel": "email",
                },
                "served_results": [
                    {
                        "doc_id": f"d{i}-{j}",
                        "document": {"doc_id": f"d{i}-{j}", "fields": {"Title": [t]}},
                        "position": j + 1,
                    }
                    for j, t in enumerate(titles)
                ],
                "timestamp": "2026-01-01T00:00:00Z",
            }
        )
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")


@pytest.fixture
def daily_setup(tmp_path):
    policy = make_policy()
    policy_file = tmp_path / "policy.json"
    dump_policy(policy, policy_file)
    judge_file = tmp_path / "judge.json"
    judge_file.write_text(json.dumps(rubric_spec().to_dict()), encoding="utf-8")
    traffic = tmp_path / "traffic.jsonl"
    # 25 queries, one poor doc in ten -> PMR@10 mean 0.10
    write_traffic_log(traffic, [1] * 25)
    config = DailyConfig(
        policy_file=str(policy_file),
        judge_file=str(judge_file),
        traffic_log=str(traffic),
        strata=StrataSpec(
            dimensions=(("channel", {"email": 1.0}),), total_sample_size=25, seed=5
        ),
        k=10,
        thresholds={"pmr": 0.20},
    )
    return tmp_path, config, traffic


class TestDailyPipeline:
    def test_records_points_for_all_metrics_and_slices(self, daily_setup):
        data_dir, config, _ = daily_setup
        result = run_daily_pipeline(config, data_dir, DAY0)
        assert not result.already_ran
        store = TimeSeriesStore(data_dir)
        for metric in ("gr", "pmr", "ndcg"):
            series = store.series(metric, 10, ALL_SLICE)
            assert len(series) == 1, metric
        assert store.series("pmr", 10, "channel=email")
        assert store.series("pmr", 10, ALL_SLICE)[0].value == pytest.approx(0.10)
        store.close()

    def test_second_run_is_noop(self, daily_setup):
        data_dir, config, traffic = daily_setup
        first = run_daily_pipeline(config, data_dir, DAY0)
        # even with changed traffic, the day's result is already committed
        write_traffic_log(traffic, [5] * 25)
        second = run_daily_pipeline(config, data_dir, DAY0)
        assert second.already_ran
        assert second.report.to_dict() == first.report.to_dict()
        assert second.points_recorded == 0

    def test_interrupted_day_rolls_forward_identically(self, daily_setup):
        data_dir, config, _ = daily_setup
        first = run_daily_pipeline(config, data_dir, DAY0)
        (data_dir / "daily" / f"{DAY0.isoformat()}.json").unlink()  # lose the marker
        rerun = run_daily_pipeline(config, data_dir, DAY0)
        assert not rerun.already_ran
        assert rerun.points_recorded == 0  # identical points already in the log
        assert rerun.report.to_dict() == first.report.to_dict()

    def test_incident_fires_alert_through_composition(self, daily_setup):
        data_dir, config, traffic = daily_setup
        # week one at PMR 0.10
        for offset in range(7):
            run_daily_pipeline(config, data_dir, DAY0 + timedelta(days=offset))
        # week two at PMR 0.14: 10 queries with 2 poor, 15 with 1 poor
        write_traffic_log(traffic, [2] * 10 + [1] * 15)
        alerts = []
        for offset in range(7, 14):
            result = run_daily_pipeline(config, data_dir, DAY0 + timedelta(days=offset))
            alerts.extend(result.alerts)
        assert alerts, "step change must fire at least one alert"
        peak = max(a.relative_change for a in alerts)
        assert peak == pytest.approx(0.40, abs=1e-9)
        from sage.monitor import AlertLog

        log = AlertLog(data_dir)
        assert len(log.replay()) == len({a.alert_id for a in alerts})
        log.close()
