"""Metric time-series store and windowed week-over-week regression detection.

Each daily point is immutable once recorded; the detector is a pure function
over a store snapshot, so the same store and parameters always produce the
same alerts.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .errors import ImmutableHistoryError, InsufficientHistoryError, UndefinedBaselineError
from .jsonl import AppendLog

# metric polarity: the harmful direction for each metric
HIGHER_IS_WORSE = {"pmr": True, "gr": False, "ndcg": False}

DEFAULT_THRESHOLDS = {"pmr": 0.20, "gr": 0.10, "ndcg": 0.05}

MAX_MISSING_DAYS = 2


class Direction(str, Enum):
    DEGRADATION = "degradation"
    IMPROVEMENT = "improvement"


@dataclass(frozen=True)
class MetricPoint:
    day: date
    metric: str  # gr | pmr | ndcg
    k: int
    slice_name: str
    value: float
    n_queries: int
    policy_version: str
    judge_id: str

    def __post_init__(self):
        if self.metric not in HIGHER_IS_WORSE:
            raise ValueError(f"unknown metric {self.metric!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")

    @property
    def key(self) -> tuple:
        return (
            self.day.isoformat(),
            self.metric,
            self.k,
            self.slice_name,
            self.policy_version,
            self.judge_id,
        )

    def to_dict(self) -> dict:
        return {
            "date": self.day.isoformat(),
            "metric": self.metric,
            "k": self.k,
            "slice": self.slice_name,
            "value": self.value,
            "n_queries": self.n_queries,
            "policy_version": self.policy_version,
            "judge_id": self.judge_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricPoint":
        return cls(
            day=date.fromisoformat(data["date"]),
            metric=data["metric"],
            k=int(data["k"]),
            slice_name=data["slice"],
            value=float(data["value"]),
            n_queries=int(data.get("n_queries", 0)),
            policy_version=data.get("policy_version", ""),
            judge_id=data.get("judge_id", ""),
        )


@dataclass(frozen=True)
class Alert:
    alert_id: str
    metric: str
    k: int
    slice_name: str
    window_prior: tuple[str, str]  # [start, end) ISO dates
    window_current: tuple[str, str]
    prior_mean: float
    current_mean: float
    relative_change: float
    direction: Direction
    fired_at: str
    policy_version: str
    threshold: float

    def to_dict(self) -> dict:
        return {
            "alert_id": self.alert_id,
            "metric": self.metric,
            "k": self.k,
            "slice": self.slice_name,
            "window_prior": list(self.window_prior),
            "window_current": list(self.window_current),
            "prior_mean": self.prior_mean,
            "current_mean": self.current_mean,
            "relative_change": self.relative_change,
            "direction": self.direction.value,
            "fired_at": self.fired_at,
            "policy_version": self.policy_version,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Alert":
        return cls(
            alert_id=data["alert_id"],
            metric=data["metric"],
            k=int(data["k"]),
            slice_name=data["slice"],
            window_prior=tuple(data["window_prior"]),
            window_current=tuple(data["window_current"]),
            prior_mean=float(data["prior_mean"]),
            current_mean=float(data["current_mean"]),
            relative_change=float(data["relative_change"]),
            direction=Direction(data["direction"]),
            fired_at=data.get("fired_at", ""),
            policy_version=data.get("policy_version", ""),
            threshold=float(data.get("threshold", 0)),
        )


@dataclass(frozen=True)
class DetectionNotice:
    """Why a window was examined but did not produce an alert."""

    metric: str
    k: int
    slice_name: str
    as_of: str
    reason: str

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "k": self.k,
            "slice": self.slice_name,
            "as_of": self.as_of,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class DetectionResult:
    alerts: tuple[Alert, ...]
    notices: tuple[DetectionNotice, ...] = ()


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class TimeSeriesStore:
    """Append-only daily metric store, one log file per (metric, k)."""

    def __init__(self, root: str | Path, clock: Callable[[], str] = _now_iso):
        self.root = Path(root) / "timeseries"
        self.root.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self._write_lock = threading.Lock()
        self._logs: dict[tuple[str, int], AppendLog] = {}
        self._points: dict[tuple, MetricPoint] = {}
        for path in sorted(self.root.glob("*.jsonl")):
            metric, k = path.stem.rsplit("_k", 1)
            log = AppendLog(path)
            self._logs[(metric, int(k))] = log
            for record in log.replay():
                point = MetricPoint.from_dict(record)
                self._points[point.key] = point

    def close(self) -> None:
        for log in self._logs.values():
            log.close()

    def _log_for(self, metric: str, k: int) -> AppendLog:
        key = (metric, k)
        if key not in self._logs:
            self._logs[key] = AppendLog(self.root / f"{metric}_k{k}.jsonl")
        return self._logs[key]

    def record_point(self, point: MetricPoint) -> bool:
        """Idempotent insert: re-recording an identical point is a no-op;
        recording a different value under the same key is an error.

        Returns True when the point was newly written.
        """
        with self._write_lock:
            existing = self._points.get(point.key)
            if existing is not None:
                if existing.to_dict() == point.to_dict():
                    return False
                raise ImmutableHistoryError(
                    f"history is immutable: {point.key} already recorded with value "
                    f"{existing.value}, refusing {point.value}"
                )
            self._points[point.key] = point
            self._log_for(point.metric, point.k).append(point.to_dict())
            return True

    def record_points(self, points: Iterable[MetricPoint]) -> int:
        return sum(self.record_point(p) for p in points)

    def series(
        self, metric: str, k: int, slice_name: str, policy_version: str | None = None
    ) -> list[MetricPoint]:
        """Points for one (metric, k, slice), date-ordered. Multiple policy
        versions may appear; filter with policy_version if needed."""
        points = [
            p
            for p in self._points.values()
            if p.metric == metric
            and p.k == k
            and p.slice_name == slice_name
            and (policy_version is None or p.policy_version == policy_version)
        ]
        return sorted(points, key=lambda p: (p.day, p.policy_version, p.judge_id))

    def has_points_for_day(self, day: date) -> bool:
        return any(p.day == day for p in self._points.values())


def _window_points(
    points: list[MetricPoint], start: date, end: date
) -> list[MetricPoint]:
    return [p for p in points if start <= p.day < end]


def _window_mean(
    points: list[MetricPoint], start: date, end: date, window_days: int
) -> tuple[float, list[MetricPoint]]:
    member_points = _window_points(points, start, end)
    days = {p.day for p in member_points}
    missing = window_days - len(days)
    if missing > MAX_MISSING_DAYS:
        raise InsufficientHistoryError(
            f"window [{start}, {end}) has {len(days)} of {window_days} days; "
            f"at most {MAX_MISSING_DAYS} may be missing"
        )
    by_day: dict[date, list[float]] = {}
    for p in member_points:
        by_day.setdefault(p.day, []).append(p.value)
    daily = [sum(vals) / len(vals) for _, vals in sorted(by_day.items())]
    return sum(daily) / len(daily), member_points


def detect_regression(
    store: TimeSeriesStore,
    metric: str,
    k: int,
    slice_name: str,
    as_of: date,
    window_days: int = 7,
    threshold: float | None = None,
) -> DetectionResult:
    """Compare the trailing window mean against the preceding window.

    prior = [as_of - 2w, as_of - w), current = [as_of - w, as_of). An alert
    fires only in the harmful direction for the metric and only when
    |relative change| reaches the threshold. A policy version change inside
    either window suppresses the alert with a version-confounded notice.
    """
    if threshold is None:
        threshold = DEFAULT_THRESHOLDS[metric]
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    points = store.series(metric, k, slice_name)
    if not points:
        raise InsufficientHistoryError(f"no points for {metric}@{k} slice {slice_name!r}")
    window = timedelta(days=window_days)
    prior_start, mid = as_of - 2 * window, as_of - window
    prior_mean, prior_points = _window_mean(points, prior_start, mid, window_days)
    current_mean, current_points = _window_mean(points, mid, as_of, window_days)

    versions = {p.policy_version for p in prior_points + current_points}
    if len(versions) > 1:
        return DetectionResult(
            alerts=(),
            notices=(
                DetectionNotice(
                    metric,
                    k,
                    slice_name,
                    as_of.isoformat(),
                    f"version-confounded: policy versions {sorted(versions)} inside the "
                    "detection window; metric shifts may be definitional",
                ),
            ),
        )
    if prior_mean == 0:
        raise UndefinedBaselineError(
            f"prior-window mean for {metric}@{k} slice {slice_name!r} is 0"
        )
    relative = (current_mean - prior_mean) / prior_mean
    worse = relative > 0 if HIGHER_IS_WORSE[metric] else relative < 0
    direction = Direction.DEGRADATION if worse else Direction.IMPROVEMENT
    if direction is not Direction.DEGRADATION or abs(relative) < threshold:
        return DetectionResult(alerts=())
    alert_id = "alert-" + hashlib.sha1(
        f"{metric}|{k}|{slice_name}|{as_of.isoformat()}".encode("utf-8")
    ).hexdigest()[:10]
    alert = Alert(
        alert_id=alert_id,
        metric=metric,
        k=k,
        slice_name=slice_name,
        window_prior=(prior_start.isoformat(), mid.isoformat()),
        window_current=(mid.isoformat(), as_of.isoformat()),
        prior_mean=prior_mean,
        current_mean=current_mean,
        relative_change=relative,
        direction=direction,
        fired_at=store.clock(),
        policy_version=versions.pop() if versions else "",
        threshold=threshold,
    )
    return DetectionResult(alerts=(alert,))


def scan_regressions(
    store: TimeSeriesStore,
    metric: str,
    k: int,
    slice_name: str,
    start: date,
    end: date,
    window_days: int = 7,
    threshold: float | None = None,
) -> DetectionResult:
    """Run the detector for every as_of day in [start, end], skipping days
    with insufficient history."""
    alerts: list[Alert] = []
    notices: list[DetectionNotice] = []
    day = start
    while day <= end:
        try:
            result = detect_regression(
                store, metric, k, slice_name, day, window_days, threshold
            )
        except (InsufficientHistoryError, UndefinedBaselineError):
            day += timedelta(days=1)
            continue
        alerts.extend(result.alerts)
        notices.extend(result.notices)
        day += timedelta(days=1)
    return DetectionResult(alerts=tuple(alerts), notices=tuple(notices))


class AlertLog:
    """Append-only alert sink with optional webhook fan-out."""

    def __init__(self, root: str | Path, webhook_url: str | None = None, transport=None):
        self._log = AppendLog(Path(root) / "alerts.jsonl")
        self._lock = threading.Lock()
        self.webhook_url = webhook_url
        self._transport = transport
        self._seen = {record["alert_id"] for record in self._log.replay()}

    def replay(self) -> list[Alert]:
        return [Alert.from_dict(r) for r in self._log.replay()]

    def record(self, alert: Alert) -> None:
        with self._lock:
            if alert.alert_id in self._seen:
                return
            self._seen.add(alert.alert_id)
            self._log.append(alert.to_dict())
        if self.webhook_url:
            import httpx

            try:
                with httpx.Client(timeout=10.0, transport=self._transport) as client:
                    client.post(self.webhook_url, json=alert.to_dict())
            except httpx.HTTPError:
                pass  # alert is durable locally; webhook delivery is best effort

    def close(self) -> None:
        self._log.close()
