"""Precedent store and the calibration loop around it: expert-labeled cases,
judge-vs-precedent disagreement detection, adjudication into the four
feedback vectors, and agreement reporting.

Stores are append-only record logs under a directory per policy name; all
mutations serialize through one writer and replaying the log from the start
reproduces the current state exactly.
"""

from __future__ import annotations

import hashlib
import math
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import IO, Callable, Iterable, Mapping, Sequence

from .core import Document, Judgment, Query, validate_grade
from .errors import ConflictError, DegenerateMarginalsError, SageError, StoreError
from .jsonl import AppendLog, iter_jsonl_lines
from .metrics import AgreementReport, KappaWeighting, agreement_report, weighted_kappa


class ConsensusRule(str, Enum):
    MAJORITY = "majority"
    STRICTEST = "strictest"
    MEAN_ROUNDED = "mean_rounded"


class CaseStatus(str, Enum):
    ACTIVE = "active"
    SUPERSEDED = "superseded"


class DisagreementStatus(str, Enum):
    OPEN = "open"
    RESOLVED = "resolved"


class ResolutionVector(str, Enum):
    CORRECT_PRECEDENT = "CORRECT_PRECEDENT"
    UPDATE_POLICY = "UPDATE_POLICY"
    JUDGE_ERROR = "JUDGE_ERROR"
    POLICY_AMBIGUITY = "POLICY_AMBIGUITY"


class FeedbackVector(str, Enum):
    """The four calibration feedback edges between humans, judge, policy and
    precedent."""

    HUMAN_TO_POLICY = "HUMAN_TO_POLICY"
    HUMAN_TO_HUMAN = "HUMAN_TO_HUMAN"
    JUDGE_TO_PRECEDENT = "JUDGE_TO_PRECEDENT"
    JUDGE_TO_POLICY = "JUDGE_TO_POLICY"


# Which feedback edge a resolution's policy issue originates from.
_ISSUE_VECTOR = {
    ResolutionVector.UPDATE_POLICY: FeedbackVector.JUDGE_TO_POLICY,
    ResolutionVector.POLICY_AMBIGUITY: FeedbackVector.JUDGE_TO_POLICY,
}


class IssueStatus(str, Enum):
    OPEN = "open"
    CODIFIED = "codified"


@dataclass(frozen=True)
class ExpertGrade:
    annotator_id: str
    grade: int
    intuition_flag: bool = False
    note: str = ""
    adjudication: bool = False  # set for grades recorded by disagreement resolution

    def __post_init__(self):
        validate_grade(self.grade)

    def to_dict(self) -> dict:
        return {
            "annotator_id": self.annotator_id,
            "grade": self.grade,
            "intuition_flag": self.intuition_flag,
            "note": self.note,
            "adjudication": self.adjudication,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExpertGrade":
        return cls(
            annotator_id=data["annotator_id"],
            grade=int(data["grade"]),
            intuition_flag=data.get("intuition_flag", False),
            note=data.get("note", ""),
            adjudication=data.get("adjudication", False),
        )


@dataclass(frozen=True)
class RevisionEntry:
    revision_id: str
    actor: str
    change: str
    timestamp: str
    prior_consensus: int

    def to_dict(self) -> dict:
        return {
            "revision_id": self.revision_id,
            "actor": self.actor,
            "change": self.change,
            "timestamp": self.timestamp,
            "prior_consensus": self.prior_consensus,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RevisionEntry":
        return cls(
            revision_id=data["revision_id"],
            actor=data["actor"],
            change=data["change"],
            timestamp=data["timestamp"],
            prior_consensus=int(data["prior_consensus"]),
        )


@dataclass(frozen=True)
class PrecedentCase:
    """One curated (query, document) pair with expert grades: the observable
    sample of the product judgment the policy formalizes."""

    case_id: str
    query: Query
    document: Document
    expert_grades: tuple[ExpertGrade, ...]
    consensus_grade: int
    policy_version_at_label: str
    status: CaseStatus = CaseStatus.ACTIVE
    tags: tuple[str, ...] = ()
    revision_history: tuple[RevisionEntry, ...] = ()
    superseded_by: str | None = None

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "query": self.query.to_dict(),
            "document": self.document.to_dict(),
            "expert_grades": [g.to_dict() for g in self.expert_grades],
            "consensus_grade": self.consensus_grade,
            "policy_version_at_label": self.policy_version_at_label,
            "status": self.status.value,
            "tags": list(self.tags),
            "revision_history": [r.to_dict() for r in self.revision_history],
            "superseded_by": self.superseded_by,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PrecedentCase":
        return cls(
            case_id=data["case_id"],
            query=Query.from_dict(data["query"]),
            document=Document.from_dict(data["document"]),
            expert_grades=tuple(ExpertGrade.from_dict(g) for g in data["expert_grades"]),
            consensus_grade=int(data["consensus_grade"]),
            policy_version_at_label=data.get("policy_version_at_label", ""),
            status=CaseStatus(data.get("status", "active")),
            tags=tuple(data.get("tags", ())),
            revision_history=tuple(
                RevisionEntry.from_dict(r) for r in data.get("revision_history", ())
            ),
            superseded_by=data.get("superseded_by"),
        )


def compute_consensus(grades: Sequence[ExpertGrade], rule: ConsensusRule) -> int:
    """Consensus grade under the configured rule.

    An adjudication grade (recorded by a CORRECT_PRECEDENT resolution)
    overrides the rule: the latest one is the consensus. Majority ties break
    to the lower grade.
    """
    if not grades:
        raise SageError("cannot compute consensus over zero expert grades")
    adjudications = [g for g in grades if g.adjudication]
    if adjudications:
        return adjudications[-1].grade
    values = [g.grade for g in grades]
    if rule is ConsensusRule.STRICTEST:
        return min(values)
    if rule is ConsensusRule.MEAN_ROUNDED:
        mean = Fraction(sum(values), len(values))
        return math.floor(mean + Fraction(1, 2))
    counts = Counter(values)
    top = max(counts.values())
    return min(grade for grade, count in counts.items() if count == top)


@dataclass(frozen=True)
class Disagreement:
    disagreement_id: str
    case_id: str
    judgment: Judgment
    delta: int
    status: DisagreementStatus = DisagreementStatus.OPEN
    suggested_vector: ResolutionVector | None = None

    def to_dict(self) -> dict:
        return {
            "disagreement_id": self.disagreement_id,
            "case_id": self.case_id,
            "judgment": self.judgment.to_dict(),
            "delta": self.delta,
            "status": self.status.value,
            "suggested_vector": self.suggested_vector.value if self.suggested_vector else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Disagreement":
        vector = data.get("suggested_vector")
        return cls(
            disagreement_id=data["disagreement_id"],
            case_id=data["case_id"],
            judgment=Judgment.from_dict(data["judgment"]),
            delta=int(data["delta"]),
            status=DisagreementStatus(data.get("status", "open")),
            suggested_vector=ResolutionVector(vector) if vector else None,
        )


@dataclass(frozen=True)
class Resolution:
    resolution_id: str
    disagreement_id: str
    vector: ResolutionVector
    note: str
    actor: str
    timestamp: str
    resulting_artifacts: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "resulting_artifacts", dict(self.resulting_artifacts))

    def to_dict(self) -> dict:
        return {
            "resolution_id": self.resolution_id,
            "disagreement_id": self.disagreement_id,
            "vector": self.vector.value,
            "note": self.note,
            "actor": self.actor,
            "timestamp": self.timestamp,
            "resulting_artifacts": dict(self.resulting_artifacts),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Resolution":
        return cls(
            resolution_id=data["resolution_id"],
            disagreement_id=data["disagreement_id"],
            vector=ResolutionVector(data["vector"]),
            note=data.get("note", ""),
            actor=data.get("actor", ""),
            timestamp=data.get("timestamp", ""),
            resulting_artifacts=data.get("resulting_artifacts", {}),
        )


@dataclass(frozen=True)
class PolicyIssue:
    issue_id: str
    source_vector: FeedbackVector
    description: str
    affected_query_pattern: str = ""
    status: IssueStatus = IssueStatus.OPEN
    codified_in_version: str | None = None

    def to_dict(self) -> dict:
        return {
            "issue_id": self.issue_id,
            "source_vector": self.source_vector.value,
            "description": self.description,
            "affected_query_pattern": self.affected_query_pattern,
            "status": self.status.value,
            "codified_in_version": self.codified_in_version,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PolicyIssue":
        return cls(
            issue_id=data["issue_id"],
            source_vector=FeedbackVector(data["source_vector"]),
            description=data.get("description", ""),
            affected_query_pattern=data.get("affected_query_pattern", ""),
            status=IssueStatus(data.get("status", "open")),
            codified_in_version=data.get("codified_in_version"),
        )


@dataclass(frozen=True)
class ImportSummary:
    accepted: int
    rejected: tuple[tuple[int, str], ...]  # (line number, reason)

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "rejected": [{"line": line, "reason": reason} for line, reason in self.rejected],
        }


def _short_hash(*parts: str) -> str:
    return hashlib.sha1("|".join(parts).encode("utf-8")).hexdigest()[:10]


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _single_writer(method):
    """Serialize a mutating store method through the store's write lock, so
    check-then-append transitions are atomic under concurrent callers."""
    import functools

    @functools.wraps(method)
    def wrapper(self, *args, **kwargs):
        with self._write_lock:
            return method(self, *args, **kwargs)

    return wrapper


class PrecedentStore:
    """Single-writer, append-only store for one policy name's precedent,
    disagreements, resolutions and policy issues."""

    def __init__(
        self,
        root: str | Path,
        policy_name: str,
        consensus_rule: ConsensusRule = ConsensusRule.MAJORITY,
        clock: Callable[[], str] = _now_iso,
    ):
        self.policy_name = policy_name
        self.consensus_rule = consensus_rule
        self.clock = clock
        self.directory = Path(root) / policy_name
        self._write_lock = threading.Lock()  # single-writer discipline
        self._log = AppendLog(self.directory / "precedent.jsonl")
        self.cases: dict[str, PrecedentCase] = {}
        self.disagreements: dict[str, Disagreement] = {}
        self.resolutions: dict[str, Resolution] = {}
        self.issues: dict[str, PolicyIssue] = {}
        self._dg_counts: Counter[str] = Counter()
        for record in self._log.replay():
            self._apply(record)

    def close(self) -> None:
        self._log.close()

    # -- record application (used both live and during replay) --------------

    def _apply(self, record: dict) -> None:
        kind = record["record"]
        if kind == "case":
            case = PrecedentCase.from_dict(record["case"])
            self.cases[case.case_id] = case
        elif kind == "revision":
            case = self.cases[record["case_id"]]
            entry = RevisionEntry.from_dict(record["entry"])
            grades = case.expert_grades + (ExpertGrade.from_dict(record["adjudication"]),)
            self.cases[case.case_id] = replace(
                case,
                expert_grades=grades,
                consensus_grade=compute_consensus(grades, self.consensus_rule),
                revision_history=case.revision_history + (entry,),
            )
        elif kind == "supersede":
            case = self.cases[record["case_id"]]
            self.cases[case.case_id] = replace(
                case, status=CaseStatus.SUPERSEDED, superseded_by=record["successor_id"]
            )
        elif kind == "disagreement":
            dg = Disagreement.from_dict(record["disagreement"])
            self.disagreements[dg.disagreement_id] = dg
            self._dg_counts[record["key"]] += 1
        elif kind == "resolution":
            resolution = Resolution.from_dict(record["resolution"])
            self.resolutions[resolution.resolution_id] = resolution
            dg = self.disagreements[resolution.disagreement_id]
            self.disagreements[dg.disagreement_id] = replace(
                dg, status=DisagreementStatus.RESOLVED
            )
        elif kind == "issue":
            issue = PolicyIssue.from_dict(record["issue"])
            self.issues[issue.issue_id] = issue
        elif kind == "issue_codified":
            issue = self.issues[record["issue_id"]]
            self.issues[issue.issue_id] = replace(
                issue,
                status=IssueStatus.CODIFIED,
                codified_in_version=record["policy_version"],
            )
        else:
            raise StoreError(f"unknown record kind {kind!r} in {self._log.path}")

    def _commit(self, records: list[dict]) -> None:
        # Apply first so an invalid transition never reaches the log.
        for record in records:
            self._apply(record)
        self._log.append_many(records)

    # -- imports -------------------------------------------------------------

    @_single_writer
    def import_cases(
        self,
        stream: IO[str] | Iterable[str],
        policy_version: str,
        consensus_rule: ConsensusRule | None = None,
    ) -> ImportSummary:
        """Import a JSONL stream of precedent records.

        Malformed records and duplicate (query_id, doc_id) pairs are rejected
        with their line number; accepted cases append to the store.
        """
        rule = consensus_rule or self.consensus_rule
        if consensus_rule is not None and consensus_rule is not self.consensus_rule:
            raise StoreError(
                f"store for {self.policy_name} is configured with consensus rule "
                f"{self.consensus_rule.value}; reopen it to change rules"
            )
        seen_pairs = {
            (case.query.query_id, case.document.doc_id) for case in self.cases.values()
        }
        accepted: list[dict] = []
        rejected: list[tuple[int, str]] = []
        for lineno, record, error in iter_jsonl_lines(stream):
            if error is not None:
                rejected.append((lineno, f"malformed record: {error}"))
                continue
            try:
                case = self._case_from_import(record, policy_version, rule)
            except (KeyError, ValueError, TypeError, SageError) as exc:
                rejected.append((lineno, str(exc)))
                continue
            pair = (case.query.query_id, case.document.doc_id)
            if pair in seen_pairs:
                rejected.append((lineno, f"duplicate (query_id, doc_id) pair {pair}"))
                continue
            if case.case_id in self.cases:
                rejected.append((lineno, f"duplicate case_id {case.case_id!r}"))
                continue
            seen_pairs.add(pair)
            accepted.append({"record": "case", "case": case.to_dict()})
            self._apply(accepted[-1])
        if accepted:
            self._log.append_many(accepted)
        return ImportSummary(accepted=len(accepted), rejected=tuple(rejected))

    def _case_from_import(
        self, record: Mapping, policy_version: str, rule: ConsensusRule
    ) -> PrecedentCase:
        if "query" not in record or "document" not in record:
            raise ValueError("record must carry query and document")
        grades_raw = record.get("expert_grades") or []
        if not grades_raw:
            raise ValueError("record must carry at least one expert grade")
        grades = tuple(ExpertGrade.from_dict(g) for g in grades_raw)
        query = Query.from_dict(record["query"])
        document = Document.from_dict(record["document"])
        case_id = record.get("case_id") or "case-" + _short_hash(query.query_id, document.doc_id)
        return PrecedentCase(
            case_id=case_id,
            query=query,
            document=document,
            expert_grades=grades,
            consensus_grade=compute_consensus(grades, rule),
            policy_version_at_label=policy_version,
            tags=tuple(record.get("tags", ())),
        )

    # -- disagreement lifecycle ----------------------------------------------

    @_single_writer
    def detect_disagreements(
        self, judgments: Sequence[Judgment], threshold: int = 1
    ) -> "DetectionSummary":
        """Open a disagreement for every judgment whose grade differs from the
        matched case consensus by at least `threshold`.

        Judgments whose (query_id, doc_id) matches no active case are skipped
        and reported. At most one disagreement is open per (case,
        policy_version, judge_id).
        """
        if threshold < 1:
            raise SageError(f"disagreement threshold must be >= 1, got {threshold}")
        by_pair = {
            (case.query.query_id, case.document.doc_id): case
            for case in self.cases.values()
            if case.status is CaseStatus.ACTIVE
        }
        open_keys = {
            self._dg_key(dg.case_id, dg.judgment.policy_version, dg.judgment.judge_id)
            for dg in self.disagreements.values()
            if dg.status is DisagreementStatus.OPEN
        }
        opened: list[Disagreement] = []
        skipped: list[tuple[Judgment, str]] = []
        records: list[dict] = []
        for judgment in judgments:
            case = by_pair.get((judgment.query_id, judgment.doc_id))
            if case is None:
                skipped.append((judgment, "no active precedent case for this pair"))
                continue
            delta = abs(judgment.final_grade - case.consensus_grade)
            if delta < threshold:
                continue
            key = self._dg_key(case.case_id, judgment.policy_version, judgment.judge_id)
            if key in open_keys:
                skipped.append((judgment, "open disagreement already exists for this key"))
                continue
            seq = self._dg_counts[key] + sum(1 for r in records if r["key"] == key)
            dg = Disagreement(
                disagreement_id=f"dg-{_short_hash(key)}-{seq + 1}",
                case_id=case.case_id,
                judgment=judgment,
                delta=delta,
                suggested_vector=_suggest_vector(judgment, case),
            )
            open_keys.add(key)
            opened.append(dg)
            records.append({"record": "disagreement", "disagreement": dg.to_dict(), "key": key})
        if records:
            self._commit(records)
        return DetectionSummary(opened=tuple(opened), skipped=tuple(skipped))

    @staticmethod
    def _dg_key(case_id: str, policy_version: str, judge_id: str) -> str:
        return f"{case_id}|{policy_version}|{judge_id}"

    @_single_writer
    def resolve_disagreement(
        self,
        disagreement_id: str,
        vector: ResolutionVector | str,
        actor: str,
        note: str = "",
        new_grade: int | None = None,
    ) -> Resolution:
        """Adjudicate an open disagreement.

        CORRECT_PRECEDENT records the corrected grade as an adjudication
        entry (prior consensus preserved in the revision history);
        UPDATE_POLICY and POLICY_AMBIGUITY open a policy issue; JUDGE_ERROR
        closes the disagreement without touching the case. The whole
        transition commits atomically.
        """
        vector = ResolutionVector(vector)
        dg = self.disagreements.get(disagreement_id)
        if dg is None:
            raise StoreError(f"unknown disagreement {disagreement_id!r}")
        if dg.status is not DisagreementStatus.OPEN:
            raise ConflictError(f"disagreement {disagreement_id} is already resolved")
        if vector is ResolutionVector.CORRECT_PRECEDENT and new_grade is None:
            raise SageError("CORRECT_PRECEDENT requires the corrected grade")
        if vector in (ResolutionVector.UPDATE_POLICY, ResolutionVector.POLICY_AMBIGUITY):
            if not note.strip():
                raise SageError(f"{vector.value} requires a note describing the policy gap")

        timestamp = self.clock()
        records: list[dict] = []
        artifacts: dict[str, str] = {}
        if vector is ResolutionVector.CORRECT_PRECEDENT:
            case = self.cases[dg.case_id]
            validate_grade(new_grade)  # type: ignore[arg-type]
            revision_id = f"rev-{case.case_id}-{len(case.revision_history) + 1}"
            entry = RevisionEntry(
                revision_id=revision_id,
                actor=actor,
                change=(
                    f"consensus {case.consensus_grade} -> {new_grade} via {disagreement_id}"
                    + (f": {note}" if note else "")
                ),
                timestamp=timestamp,
                prior_consensus=case.consensus_grade,
            )
            adjudication = ExpertGrade(
                annotator_id=actor, grade=int(new_grade), note=note, adjudication=True  # type: ignore[arg-type]
            )
            records.append(
                {
                    "record": "revision",
                    "case_id": case.case_id,
                    "entry": entry.to_dict(),
                    "adjudication": adjudication.to_dict(),
                }
            )
            artifacts["precedent_revision_id"] = revision_id
        elif vector in _ISSUE_VECTOR:
            issue = PolicyIssue(
                issue_id=f"issue-{disagreement_id}",
                source_vector=_ISSUE_VECTOR[vector],
                description=note,
                affected_query_pattern=";".join(self.cases[dg.case_id].tags),
            )
            records.append({"record": "issue", "issue": issue.to_dict()})
            artifacts["policy_issue_id"] = issue.issue_id

        resolution = Resolution(
            resolution_id=f"res-{disagreement_id}",
            disagreement_id=disagreement_id,
            vector=vector,
            note=note,
            actor=actor,
            timestamp=timestamp,
            resulting_artifacts=artifacts,
        )
        records.append({"record": "resolution", "resolution": resolution.to_dict()})
        self._commit(records)
        return resolution

    @_single_writer
    def supersede_case(self, case_id: str, successor: PrecedentCase) -> None:
        """Retire a case in favor of a successor; the retired case is never
        edited again."""
        case = self.cases.get(case_id)
        if case is None:
            raise StoreError(f"unknown case {case_id!r}")
        if case.status is CaseStatus.SUPERSEDED:
            raise ConflictError(f"case {case_id} is already superseded")
        if successor.case_id in self.cases:
            raise StoreError(f"successor case_id {successor.case_id!r} already exists")
        self._commit(
            [
                {"record": "case", "case": successor.to_dict()},
                {"record": "supersede", "case_id": case_id, "successor_id": successor.case_id},
            ]
        )

    @_single_writer
    def add_issue(self, issue: PolicyIssue) -> None:
        if issue.issue_id in self.issues:
            raise ConflictError(f"issue {issue.issue_id!r} already exists")
        self._commit([{"record": "issue", "issue": issue.to_dict()}])

    @_single_writer
    def codify_issue(self, issue_id: str, policy) -> None:
        """Mark an issue codified into a policy revision. The revision must
        acknowledge the issue: its changelog has to mention the issue_id."""
        from .core import Policy

        issue = self.issues.get(issue_id)
        if issue is None:
            raise StoreError(f"unknown issue {issue_id!r}")
        if issue.status is IssueStatus.CODIFIED:
            raise ConflictError(f"issue {issue_id} is already codified")
        if not isinstance(policy, Policy):
            raise StoreError("codify_issue requires the codifying Policy")
        if issue_id not in policy.changelog:
            raise StoreError(
                f"policy {policy.name} v{policy.policy_version} changelog does not "
                f"mention {issue_id}; codification must be acknowledged there"
            )
        self._commit(
            [
                {
                    "record": "issue_codified",
                    "issue_id": issue_id,
                    "policy_version": policy.policy_version,
                }
            ]
        )

    # -- views ----------------------------------------------------------------

    def active_cases(self) -> list[PrecedentCase]:
        return [c for c in self.cases.values() if c.status is CaseStatus.ACTIVE]

    def open_disagreements(self) -> list[Disagreement]:
        return [
            dg for dg in self.disagreements.values() if dg.status is DisagreementStatus.OPEN
        ]

    def snapshot(self) -> dict:
        """Full store state as one canonical dict (for diffing and export)."""
        return {
            "policy_name": self.policy_name,
            "cases": {cid: c.to_dict() for cid, c in sorted(self.cases.items())},
            "disagreements": {
                did: d.to_dict() for did, d in sorted(self.disagreements.items())
            },
            "resolutions": {rid: r.to_dict() for rid, r in sorted(self.resolutions.items())},
            "issues": {iid: i.to_dict() for iid, i in sorted(self.issues.items())},
        }


@dataclass(frozen=True)
class DetectionSummary:
    opened: tuple[Disagreement, ...]
    skipped: tuple[tuple[Judgment, str], ...]

    def to_dict(self) -> dict:
        return {
            "opened": [d.to_dict() for d in self.opened],
            "skipped": [
                {"query_id": j.query_id, "doc_id": j.doc_id, "reason": reason}
                for j, reason in self.skipped
            ],
        }


def _suggest_vector(judgment: Judgment, case: PrecedentCase) -> ResolutionVector | None:
    """Advisory hint only: suggest CORRECT_PRECEDENT when the judgment cites
    a document field no annotator note mentions (evidence the annotators may
    have overlooked). Humans assign the final vector."""
    notes = " ".join(g.note for g in case.expert_grades).lower()
    for score in judgment.attribute_scores:
        if not score.evidence:
            continue
        field_name = score.evidence.split(":", 1)[0].strip().lower()
        if field_name and field_name not in notes:
            return ResolutionVector.CORRECT_PRECEDENT
    return None


def match_judgments(
    store: PrecedentStore, judgments: Sequence[Judgment], policy_version: str
) -> list[tuple[Judgment, PrecedentCase]]:
    by_pair = {
        (case.query.query_id, case.document.doc_id): case
        for case in store.cases.values()
        if case.status is CaseStatus.ACTIVE
    }
    return [
        (j, by_pair[(j.query_id, j.doc_id)])
        for j in judgments
        if j.policy_version == policy_version and (j.query_id, j.doc_id) in by_pair
    ]


def calibration_report(
    store: PrecedentStore,
    judgments: Sequence[Judgment],
    policy_version: str,
    judge_id: str | None = None,
) -> AgreementReport:
    """Judge-vs-precedent agreement over the matched cases, pinned to one
    policy version and one judge."""
    matched = match_judgments(store, judgments, policy_version)
    if judge_id is not None:
        matched = [(j, c) for j, c in matched if j.judge_id == judge_id]
    if not matched:
        raise SageError(
            f"no judgments matched precedent cases under policy version {policy_version!r}"
        )
    judge_ids = {j.judge_id for j, _ in matched}
    if len(judge_ids) > 1:
        raise SageError(
            f"judgments span multiple judges {sorted(judge_ids)}; pass judge_id to pick one"
        )
    predicted = [j.final_grade for j, _ in matched]
    truth = [c.consensus_grade for _, c in matched]
    return agreement_report(
        predicted, truth, policy_version=policy_version, judge_id=judge_ids.pop()
    )


@dataclass(frozen=True)
class AnnotatorPairAgreement:
    annotator_a: str
    annotator_b: str
    kappa: float | None
    n_shared: int

    def to_dict(self) -> dict:
        return {
            "annotator_a": self.annotator_a,
            "annotator_b": self.annotator_b,
            "kappa": self.kappa,
            "n_shared": self.n_shared,
        }


@dataclass(frozen=True)
class SliceAgreement:
    slice_tag: str
    kappa: float | None
    n_pairs: int
    flagged: bool

    def to_dict(self) -> dict:
        return {
            "slice": self.slice_tag,
            "kappa": self.kappa,
            "n_pairs": self.n_pairs,
            "flagged": self.flagged,
        }


@dataclass(frozen=True)
class InterraterReport:
    pairs: tuple[AnnotatorPairAgreement, ...]
    slices: tuple[SliceAgreement, ...]
    draft_issues: tuple[PolicyIssue, ...]
    agreement_floor: float
    n_intuition_flags: int

    def to_dict(self) -> dict:
        return {
            "pairs": [p.to_dict() for p in self.pairs],
            "slices": [s.to_dict() for s in self.slices],
            "draft_issues": [i.to_dict() for i in self.draft_issues],
            "agreement_floor": self.agreement_floor,
            "n_intuition_flags": self.n_intuition_flags,
        }


def interrater_report(
    store: PrecedentStore, agreement_floor: float = 0.5
) -> InterraterReport:
    """Pairwise annotator agreement plus per-tag slices.

    A slice whose pooled linear kappa falls below the floor is flagged as a
    policy-ambiguity candidate with a draft issue (not persisted here).
    Non-adjudication grades only: corrections are judge output, not
    annotator opinion.
    """
    by_annotator: dict[str, dict[str, int]] = {}
    case_tags: dict[str, tuple[str, ...]] = {}
    n_flags = 0
    for case in store.active_cases():
        case_tags[case.case_id] = case.tags
        for grade in case.expert_grades:
            if grade.adjudication:
                continue
            by_annotator.setdefault(grade.annotator_id, {})[case.case_id] = grade.grade
            n_flags += grade.intuition_flag

    annotators = sorted(by_annotator)
    pairs: list[AnnotatorPairAgreement] = []
    pooled_by_tag: dict[str, list[tuple[int, int]]] = {}
    for i, a in enumerate(annotators):
        for b in annotators[i + 1 :]:
            shared = sorted(by_annotator[a].keys() & by_annotator[b].keys())
            if not shared:
                continue
            grades_a = [by_annotator[a][cid] for cid in shared]
            grades_b = [by_annotator[b][cid] for cid in shared]
            try:
                kappa = weighted_kappa(grades_a, grades_b, KappaWeighting.LINEAR)
            except DegenerateMarginalsError:
                kappa = None
            pairs.append(AnnotatorPairAgreement(a, b, kappa, len(shared)))
            for cid, ga, gb in zip(shared, grades_a, grades_b):
                for tag in case_tags[cid]:
                    pooled_by_tag.setdefault(tag, []).append((ga, gb))
    if not pairs:
        raise SageError("no overlapping annotations: need >= 2 annotators sharing >= 1 case")

    slices: list[SliceAgreement] = []
    drafts: list[PolicyIssue] = []
    for tag in sorted(pooled_by_tag):
        pooled = pooled_by_tag[tag]
        try:
            kappa = weighted_kappa(
                [a for a, _ in pooled], [b for _, b in pooled], KappaWeighting.LINEAR
            )
        except DegenerateMarginalsError:
            kappa = None
        flagged = kappa is not None and kappa < agreement_floor
        slices.append(SliceAgreement(tag, kappa, len(pooled), flagged))
        if flagged:
            drafts.append(
                PolicyIssue(
                    issue_id=f"issue-interrater-{_short_hash(store.policy_name, tag)}",
                    source_vector=FeedbackVector.HUMAN_TO_HUMAN,
                    description=(
                        f"annotator agreement on slice {tag!r} is {kappa:.3f}, below the "
                        f"{agreement_floor:g} floor; the policy likely underspecifies it"
                    ),
                    affected_query_pattern=tag,
                )
            )
    return InterraterReport(
        pairs=tuple(pairs),
        slices=tuple(slices),
        draft_issues=tuple(drafts),
        agreement_floor=agreement_floor,
        n_intuition_flags=n_flags,
    )
