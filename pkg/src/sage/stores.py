"""Append-only record logs for policies, judgments, and recorded agreement
reports. Together with the precedent and time-series stores these are the
only durable state; replaying the logs reconstructs everything."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .core import Judgment, Policy, validate_policy, version_key
from .errors import ConflictError, StoreError
from .jsonl import AppendLog
from .metrics import AgreementReport


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class PolicyStore:
    """Registered policy versions, append-only, monotone per policy name."""

    def __init__(self, root: str | Path):
        self._log = AppendLog(Path(root) / "policies.jsonl")
        self._lock = threading.Lock()
        self._by_name: dict[str, dict[str, Policy]] = {}
        for record in self._log.replay():
            policy = Policy.from_dict(record)
            self._by_name.setdefault(policy.name, {})[policy.policy_version] = policy

    def close(self) -> None:
        self._log.close()

    def register(self, policy: Policy) -> None:
        violations = validate_policy(policy)
        if violations:
            raise StoreError(f"policy is invalid: {'; '.join(violations)}")
        with self._lock:
            versions = self._by_name.setdefault(policy.name, {})
            if policy.policy_version in versions:
                existing = versions[policy.policy_version]
                if existing.content_hash == policy.content_hash:
                    return  # idempotent re-registration
                raise ConflictError(
                    f"policy {policy.name} v{policy.policy_version} already registered "
                    "with different content"
                )
            newest = self.latest(policy.name)
            if newest is not None and version_key(policy.policy_version) <= version_key(
                newest.policy_version
            ):
                raise StoreError(
                    f"version must increase: {policy.name} is at "
                    f"{newest.policy_version}, got {policy.policy_version}"
                )
            versions[policy.policy_version] = policy
            self._log.append(policy.to_dict())

    def names(self) -> list[str]:
        return sorted(self._by_name)

    def versions(self, name: str) -> list[str]:
        return sorted(self._by_name.get(name, {}), key=version_key)

    def get(self, name: str, version: str) -> Policy:
        try:
            return self._by_name[name][version]
        except KeyError:
            raise StoreError(f"unknown policy {name!r} version {version!r}") from None

    def latest(self, name: str) -> Policy | None:
        versions = self.versions(name)
        return self._by_name[name][versions[-1]] if versions else None


class JudgmentLog:
    """Per-policy-name log of judgments produced by any judge."""

    def __init__(self, root: str | Path, policy_name: str):
        self._log = AppendLog(Path(root) / policy_name / "judgments.jsonl")
        self._lock = threading.Lock()
        self._judgments: list[Judgment] = [
            Judgment.from_dict(record) for record in self._log.replay()
        ]

    def close(self) -> None:
        self._log.close()

    def append(self, judgments: Sequence[Judgment]) -> int:
        with self._lock:
            self._log.append_many([j.to_dict() for j in judgments])
            self._judgments.extend(judgments)
        return len(judgments)

    def all(self) -> list[Judgment]:
        return list(self._judgments)

    def filtered(
        self, policy_version: str | None = None, judge_id: str | None = None
    ) -> list[Judgment]:
        return [
            j
            for j in self._judgments
            if (policy_version is None or j.policy_version == policy_version)
            and (judge_id is None or j.judge_id == judge_id)
        ]


@dataclass(frozen=True)
class RecordedReport:
    report: AgreementReport
    label: str
    recorded_at: str

    def to_dict(self) -> dict:
        return {
            "report": self.report.to_dict(),
            "label": self.label,
            "recorded_at": self.recorded_at,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RecordedReport":
        return cls(
            report=AgreementReport.from_dict(data["report"]),
            label=data.get("label", ""),
            recorded_at=data.get("recorded_at", ""),
        )


class ReportLog:
    """Calibration-report history per policy name (the kappa trend the
    dashboards draw)."""

    def __init__(
        self, root: str | Path, policy_name: str, clock: Callable[[], str] = _now_iso
    ):
        self._log = AppendLog(Path(root) / policy_name / "reports.jsonl")
        self._lock = threading.Lock()
        self.clock = clock
        self._reports: list[RecordedReport] = [
            RecordedReport.from_dict(record) for record in self._log.replay()
        ]

    def close(self) -> None:
        self._log.close()

    def record(self, report: AgreementReport, label: str = "") -> RecordedReport:
        with self._lock:
            recorded = RecordedReport(report=report, label=label, recorded_at=self.clock())
            self._log.append(recorded.to_dict())
            self._reports.append(recorded)
            return recorded

    def all(self) -> list[RecordedReport]:
        return list(self._reports)
