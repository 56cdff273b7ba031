"""End-to-end compositions: grade ranked results into evaluation reports,
and the daily sample -> annotate -> evaluate -> record -> detect pipeline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date as date_type
from datetime import timedelta
from pathlib import Path
from typing import Mapping, Sequence

from .core import Policy, Query, load_policy
from .errors import SageError
from .judge import JudgeSpec, annotate_batch, load_judge_spec
from .metrics import ALL_SLICE, EvalConfig, EvalReport, RankedList, aggregate_eval
from .monitor import (
    DEFAULT_THRESHOLDS,
    Alert,
    AlertLog,
    DetectionNotice,
    MetricPoint,
    TimeSeriesStore,
    detect_regression,
)
from .simulation import RankedResults, SampleSet, StrataSpec, stratified_sample, read_traffic_log

DEFAULT_SLICE_DIMENSIONS = ("channel",)


def query_slice_tags(query: Query) -> dict[str, str]:
    return {
        "channel": query.channel.value,
        "locale": query.locale,
        "frequency_bucket": query.frequency_bucket.value,
    }


def grade_results(
    spec: JudgeSpec,
    policy: Policy,
    result_sets: Sequence[RankedResults],
    parallelism: int = 4,
    **judge_kwargs,
) -> tuple[list[RankedList], list]:
    """Judge every (query, document) pair in the result sets and assemble
    graded ranked lists. A query with any failed pair is dropped and its
    failures reported, so partial lists never skew the metrics."""
    pairs = []
    spans: list[tuple[RankedResults, int, int]] = []
    for result in result_sets:
        start = len(pairs)
        for doc_id, document in result.results:
            pairs.append((result.query, document))
        spans.append((result, start, len(pairs)))
    batch = annotate_batch(spec, policy, pairs, parallelism=parallelism, **judge_kwargs)
    failed_indexes = {f.index for f in batch.failures}
    lists: list[RankedList] = []
    for result, start, end in spans:
        if any(i in failed_indexes for i in range(start, end)):
            continue
        entries = tuple(
            (batch.results[i].doc_id, batch.results[i].final_grade) for i in range(start, end)
        )
        lists.append(
            RankedList(
                query_id=result.query.query_id,
                entries=entries,
                slice_tags=query_slice_tags(result.query),
                policy_version=policy.policy_version,
            )
        )
    return lists, list(batch.failures)


def evaluate_results(
    spec: JudgeSpec,
    policy: Policy,
    result_sets: Sequence[RankedResults],
    config: EvalConfig,
    slice_dimensions: Sequence[str] = DEFAULT_SLICE_DIMENSIONS,
    parallelism: int = 4,
    **judge_kwargs,
) -> EvalReport:
    lists, _ = grade_results(spec, policy, result_sets, parallelism, **judge_kwargs)
    if not lists:
        raise SageError("no result set survived judging; nothing to evaluate")
    return aggregate_eval(
        lists, config, slice_dimensions, policy_version=policy.policy_version
    )


def served_results_of(sample: SampleSet) -> list[RankedResults]:
    """Treat the logged serving order as the ranked results (production
    traffic evaluation rather than candidate replay)."""
    out = []
    for _, record in sample.records:
        out.append(
            RankedResults(
                query=record.query,
                results=tuple((doc_id, doc) for doc_id, doc, _ in record.served_results),
                sut_id="production",
                captured_at=record.timestamp,
            )
        )
    return out


@dataclass(frozen=True)
class DailyConfig:
    """Everything one daily oversight run needs."""

    policy_file: str
    judge_file: str
    traffic_log: str
    strata: StrataSpec
    k: int = 10
    slice_dimensions: tuple[str, ...] = DEFAULT_SLICE_DIMENSIONS
    thresholds: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    window_days: int = 7
    parallelism: int = 4

    def __post_init__(self):
        object.__setattr__(self, "thresholds", dict(self.thresholds))
        object.__setattr__(self, "slice_dimensions", tuple(self.slice_dimensions))

    @classmethod
    def from_dict(cls, data: Mapping) -> "DailyConfig":
        return cls(
            policy_file=data["policy_file"],
            judge_file=data["judge_file"],
            traffic_log=data["traffic_log"],
            strata=StrataSpec.from_dict(data["strata"]),
            k=data.get("k", 10),
            slice_dimensions=tuple(data.get("slice_dimensions", DEFAULT_SLICE_DIMENSIONS)),
            thresholds=data.get("thresholds", dict(DEFAULT_THRESHOLDS)),
            window_days=data.get("window_days", 7),
            parallelism=data.get("parallelism", 4),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "DailyConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class DailyRunResult:
    day: str
    report: EvalReport
    points_recorded: int
    alerts: tuple[Alert, ...]
    notices: tuple[DetectionNotice, ...]
    already_ran: bool = False

    def to_dict(self) -> dict:
        return {
            "day": self.day,
            "report": self.report.to_dict(),
            "points_recorded": self.points_recorded,
            "alerts": [a.to_dict() for a in self.alerts],
            "notices": [n.to_dict() for n in self.notices],
            "already_ran": self.already_ran,
        }


def _day_seed(base_seed: int, day: date_type) -> int:
    return base_seed + day.toordinal()


def points_from_report(
    report: EvalReport, day: date_type, judge_id: str
) -> list[MetricPoint]:
    points = []
    for slice_name, stats in sorted(report.slices.items()):
        for metric in ("gr", "pmr", "ndcg"):
            value = getattr(stats, f"{metric}_mean")
            if value is None:
                continue
            points.append(
                MetricPoint(
                    day=day,
                    metric=metric,
                    k=report.config.k,
                    slice_name=slice_name,
                    value=value,
                    n_queries=stats.n_queries,
                    policy_version=report.policy_version,
                    judge_id=judge_id,
                )
            )
    return points


def run_daily_pipeline(
    config: DailyConfig,
    data_dir: str | Path,
    day: date_type,
    transport=None,
    store: TimeSeriesStore | None = None,
    alert_log: AlertLog | None = None,
) -> DailyRunResult:
    """One oversight day: sample logged traffic, judge the served results,
    aggregate per-slice metrics, record the daily points, and run the
    week-over-week detector.

    Idempotent per calendar day: a completed day returns its stored result
    untouched. All derivation happens before anything is written, and the
    derivation is deterministic, so re-running an interrupted day rolls
    forward to the identical committed state.
    """
    data_dir = Path(data_dir)
    marker_dir = data_dir / "daily"
    marker_dir.mkdir(parents=True, exist_ok=True)
    marker = marker_dir / f"{day.isoformat()}.json"
    if marker.exists():
        with open(marker, encoding="utf-8") as fh:
            stored = json.load(fh)
        return DailyRunResult(
            day=stored["day"],
            report=EvalReport.from_dict(stored["report"]),
            points_recorded=0,
            alerts=tuple(Alert.from_dict(a) for a in stored["alerts"]),
            notices=tuple(
                DetectionNotice(**n) for n in stored.get("notices", [])
            ),
            already_ran=True,
        )

    policy = load_policy(config.policy_file)
    judge_spec = load_judge_spec(config.judge_file)
    log = read_traffic_log(config.traffic_log)
    day_spec = StrataSpec(
        dimensions=config.strata.dimensions,
        total_sample_size=config.strata.total_sample_size,
        seed=_day_seed(config.strata.seed, day),
        upweight_tail=config.strata.upweight_tail,
    )
    sample = stratified_sample(log, day_spec)
    report = evaluate_results(
        judge_spec,
        policy,
        served_results_of(sample),
        EvalConfig(k=config.k),
        config.slice_dimensions,
        parallelism=config.parallelism,
        transport=transport,
    )
    points = points_from_report(report, day, judge_spec.judge_id)

    # commit phase: identical values re-record as no-ops on roll-forward.
    # A long-lived caller (the service) passes its own single-writer stores.
    owns_store, owns_alert_log = store is None, alert_log is None
    if store is None:
        store = TimeSeriesStore(data_dir)
    if alert_log is None:
        alert_log = AlertLog(data_dir)
    try:
        recorded = store.record_points(points)
        alerts: list[Alert] = []
        notices: list[DetectionNotice] = []
        as_of = day + timedelta(days=1)
        for metric, threshold in sorted(config.thresholds.items()):
            try:
                result = detect_regression(
                    store,
                    metric,
                    config.k,
                    ALL_SLICE,
                    as_of=as_of,
                    window_days=config.window_days,
                    threshold=threshold,
                )
            except SageError:
                continue
            alerts.extend(result.alerts)
            notices.extend(result.notices)
        for alert in alerts:
            alert_log.record(alert)
        run = DailyRunResult(
            day=day.isoformat(),
            report=report,
            points_recorded=recorded,
            alerts=tuple(alerts),
            notices=tuple(notices),
        )
        with open(marker, "w", encoding="utf-8") as fh:
            json.dump(run.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return run
    finally:
        if owns_store:
            store.close()
        if owns_alert_log:
            alert_log.close()
