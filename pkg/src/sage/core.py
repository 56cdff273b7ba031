"""Core domain model: queries, documents, grades, judgments, and the
versioned grading policy with deterministic attribute-score aggregation.

All types are immutable after construction; every operation here is a pure
function, safe to call concurrently.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Mapping, Sequence

from .errors import AggregationError, PolicyMismatchError

GRADE_MIN = 0
GRADE_MAX = 4
GRADES = tuple(range(GRADE_MIN, GRADE_MAX + 1))

GOOD_THRESHOLD = 3
POOR_THRESHOLD = 1


class Band(str, Enum):
    POOR = "Poor"
    FAIR = "Fair"
    GOOD = "Good"


class Channel(str, Enum):
    EMAIL = "email"
    JOBS_HOME = "jobs_home"
    FEED = "feed"
    SEARCH_BOX = "search_box"
    OTHER = "other"


class FrequencyBucket(str, Enum):
    HEAD = "head"
    TORSO = "torso"
    TAIL = "tail"


def validate_grade(value: int) -> int:
    """Check that a grade is an integer ordinal in [0, 4] and return it."""
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValueError(f"grade must be an integer, got {value!r}")
    if not GRADE_MIN <= value <= GRADE_MAX:
        raise ValueError(f"grade {value} outside [{GRADE_MIN}, {GRADE_MAX}]")
    return value


def classify_band(grade: int) -> Band:
    """Map a grade to its band: 0,1 -> Poor; 2 -> Fair; 3,4 -> Good."""
    validate_grade(grade)
    if grade <= POOR_THRESHOLD:
        return Band.POOR
    if grade >= GOOD_THRESHOLD:
        return Band.GOOD
    return Band.FAIR


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str
    facets: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    channel: Channel = Channel.OTHER
    locale: str = "en_US"
    frequency_bucket: FrequencyBucket = FrequencyBucket.TORSO

    def __post_init__(self):
        if not self.query_id:
            raise ValueError("query_id must be non-empty")
        if not self.text:
            raise ValueError("query text must be non-empty")
        object.__setattr__(
            self,
            "facets",
            {name: tuple(values) for name, values in dict(self.facets).items()},
        )

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "text": self.text,
            "facets": {name: list(vals) for name, vals in self.facets.items()},
            "channel": self.channel.value,
            "locale": self.locale,
            "frequency_bucket": self.frequency_bucket.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Query":
        return cls(
            query_id=data["query_id"],
            text=data["text"],
            facets={k: tuple(v) for k, v in data.get("facets", {}).items()},
            channel=Channel(data.get("channel", "other")),
            locale=data.get("locale", "en_US"),
            frequency_bucket=FrequencyBucket(data.get("frequency_bucket", "torso")),
        )


@dataclass(frozen=True)
class Document:
    doc_id: str
    fields: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        object.__setattr__(
            self,
            "fields",
            {name: tuple(values) for name, values in dict(self.fields).items()},
        )

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "fields": {name: list(vals) for name, vals in self.fields.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Document":
        return cls(
            doc_id=data["doc_id"],
            fields={k: tuple(v) for k, v in data.get("fields", {}).items()},
        )


@dataclass(frozen=True)
class AttributeRubric:
    """Rubric for one relevance attribute: what it means, how each grade is
    earned, and how heavily it weighs in the final judgment."""

    name: str
    description: str
    grade_guidance: Mapping[int, str]
    weight: float = 1.0
    critical: bool = False

    def __post_init__(self):
        object.__setattr__(
            self, "grade_guidance", {int(k): v for k, v in dict(self.grade_guidance).items()}
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "grade_guidance": {str(k): v for k, v in sorted(self.grade_guidance.items())},
            "weight": self.weight,
            "critical": self.critical,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttributeRubric":
        return cls(
            name=data["name"],
            description=data.get("description", ""),
            grade_guidance={int(k): v for k, v in data.get("grade_guidance", {}).items()},
            weight=data.get("weight", 1.0),
            critical=data.get("critical", False),
        )


class RuleKind(str, Enum):
    CRITICAL_GATE = "critical_gate"
    WEIGHTED_MEAN = "weighted_mean"
    CLAMP = "clamp"


@dataclass(frozen=True)
class AggregationRule:
    """One step of the aggregation pipeline.

    critical_gate: params {"cap": g} — when any critical attribute scores <= 1,
        the running aggregate is capped at g.
    weighted_mean: params {"rounding": "half_up"} — rounds the running
        aggregate to the nearest integer, halves up.
    clamp: params {"lo": a, "hi": b} — clamps the running aggregate to [a, b].
    """

    kind: RuleKind
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "AggregationRule":
        return cls(kind=RuleKind(data["kind"]), params=data.get("params", {}))


DEFAULT_AGGREGATION = (
    AggregationRule(RuleKind.CRITICAL_GATE, {"cap": 1}),
    AggregationRule(RuleKind.WEIGHTED_MEAN, {"rounding": "half_up"}),
    AggregationRule(RuleKind.CLAMP, {"lo": 0, "hi": 4}),
)


@dataclass(frozen=True)
class Policy:
    """Versioned grading rubric: attributes, per-grade guidance, weights, and
    the ordered aggregation rule pipeline."""

    name: str
    policy_version: str
    attributes: tuple[AttributeRubric, ...]
    aggregation: tuple[AggregationRule, ...] = DEFAULT_AGGREGATION
    changelog: str = ""

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "aggregation", tuple(self.aggregation))

    def attribute(self, name: str) -> AttributeRubric:
        for rubric in self.attributes:
            if rubric.name == name:
                return rubric
        raise KeyError(name)

    def attribute_names(self) -> tuple[str, ...]:
        return tuple(rubric.name for rubric in self.attributes)

    def body_dict(self) -> dict:
        """Canonical body used for serialization and content hashing."""
        return {
            "name": self.name,
            "version": self.policy_version,
            "changelog": self.changelog,
            "attributes": [rubric.to_dict() for rubric in self.attributes],
            "aggregation": [rule.to_dict() for rule in self.aggregation],
        }

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.body_dict()).encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return self.body_dict()

    @classmethod
    def from_dict(cls, data: Mapping) -> "Policy":
        return cls(
            name=data["name"],
            policy_version=str(data["version"]),
            attributes=tuple(AttributeRubric.from_dict(a) for a in data.get("attributes", [])),
            aggregation=tuple(AggregationRule.from_dict(r) for r in data.get("aggregation", []))
            or DEFAULT_AGGREGATION,
            changelog=data.get("changelog", ""),
        )


@dataclass(frozen=True)
class AttributeScore:
    attribute: str
    score: int
    rationale: str = ""
    evidence: str | None = None

    def __post_init__(self):
        validate_grade(self.score)

    def to_dict(self) -> dict:
        out = {"attribute": self.attribute, "score": self.score, "rationale": self.rationale}
        if self.evidence is not None:
            out["evidence"] = self.evidence
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttributeScore":
        return cls(
            attribute=data["attribute"],
            score=int(data["score"]),
            rationale=data.get("rationale", ""),
            evidence=data.get("evidence"),
        )


@dataclass(frozen=True)
class Judgment:
    """A graded (query, document) pair under one policy version.

    final_grade is always recomputable: aggregate_attributes(policy,
    attribute_scores) must reproduce it exactly.
    """

    query_id: str
    doc_id: str
    policy_version: str
    judge_id: str
    attribute_scores: tuple[AttributeScore, ...]
    final_grade: int
    rationale: str = ""
    created_at: str = ""

    def __post_init__(self):
        object.__setattr__(self, "attribute_scores", tuple(self.attribute_scores))
        validate_grade(self.final_grade)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "doc_id": self.doc_id,
            "policy_version": self.policy_version,
            "judge_id": self.judge_id,
            "attribute_scores": [s.to_dict() for s in self.attribute_scores],
            "final_grade": self.final_grade,
            "rationale": self.rationale,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Judgment":
        return cls(
            query_id=data["query_id"],
            doc_id=data["doc_id"],
            policy_version=data["policy_version"],
            judge_id=data["judge_id"],
            attribute_scores=tuple(
                AttributeScore.from_dict(s) for s in data.get("attribute_scores", [])
            ),
            final_grade=int(data["final_grade"]),
            rationale=data.get("rationale", ""),
            created_at=data.get("created_at", ""),
        )


def canonical_json(obj) -> str:
    """Canonical serialization: sorted keys, no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def version_key(version: str) -> tuple[int, ...]:
    """Ordering key for integer-dotted version strings such as "3.1"."""
    try:
        return tuple(int(part) for part in version.split("."))
    except ValueError:
        raise ValueError(f"version {version!r} is not integer-dotted (e.g. '3.1')") from None


def validate_policy(policy: Policy) -> list[str]:
    """Check policy invariants; returns a list of violations (empty means ok).

    Violations are data, not failures: a malformed policy is reported, never
    raised.
    """
    violations: list[str] = []
    if not policy.name:
        violations.append("policy name is empty")
    try:
        version_key(policy.policy_version)
    except ValueError:
        violations.append(f"version {policy.policy_version!r} is not integer-dotted")
    if not policy.attributes:
        violations.append("policy has no attributes")

    seen: set[str] = set()
    for rubric in policy.attributes:
        if rubric.name in seen:
            violations.append(f"duplicate attribute name: {rubric.name}")
        seen.add(rubric.name)
        if rubric.weight <= 0:
            violations.append(f"non-positive weight on attribute {rubric.name}: {rubric.weight}")
        if sorted(rubric.grade_guidance.keys()) != list(GRADES):
            violations.append(
                f"grade_guidance for attribute {rubric.name} must cover grades 0..4 exactly"
            )

    mean_rules = [r for r in policy.aggregation if r.kind is RuleKind.WEIGHTED_MEAN]
    if len(mean_rules) != 1:
        violations.append(
            f"policy must have exactly one weighted_mean rule, found {len(mean_rules)}"
        )
    for rule in policy.aggregation:
        if rule.kind is RuleKind.CRITICAL_GATE:
            cap = rule.params.get("cap")
            if not isinstance(cap, int) or not GRADE_MIN <= cap <= GRADE_MAX:
                violations.append(f"critical_gate cap must be a grade in 0..4, got {cap!r}")
        elif rule.kind is RuleKind.CLAMP:
            lo, hi = rule.params.get("lo", GRADE_MIN), rule.params.get("hi", GRADE_MAX)
            if not (isinstance(lo, int) and isinstance(hi, int) and lo <= hi):
                violations.append(f"clamp bounds invalid: lo={lo!r} hi={hi!r}")
    return violations


def _round_half_up(value: Fraction) -> int:
    return math.floor(value + Fraction(1, 2))


def weighted_mean(policy: Policy, scores: Sequence[AttributeScore]) -> Fraction:
    """Exact weighted mean of the scored attributes.

    Attributes present in the policy but absent from the scores are treated
    as not assessed: weights renormalize over the attributes actually scored.
    """
    num = Fraction(0)
    den = Fraction(0)
    for score in scores:
        w = Fraction(policy.attribute(score.attribute).weight)
        num += w * score.score
        den += w
    return num / den


def aggregate_attributes(policy: Policy, scores: Sequence[AttributeScore]) -> int:
    """Fold the policy's aggregation rules, in listed order, into a final grade.

    The running aggregate starts at the exact weighted mean of the scored
    attributes; critical_gate caps it, weighted_mean applies the configured
    rounding, clamp bounds it. The result is deterministic and lies in [0, 4].
    """
    if not scores:
        raise AggregationError("cannot aggregate an empty score list")
    seen: set[str] = set()
    names = set(policy.attribute_names())
    for score in scores:
        if score.attribute not in names:
            raise AggregationError(
                f"unknown attribute {score.attribute!r} (policy {policy.name} "
                f"v{policy.policy_version} defines {sorted(names)})"
            )
        if score.attribute in seen:
            raise AggregationError(f"duplicate score for attribute {score.attribute!r}")
        seen.add(score.attribute)

    gate_tripped = any(
        score.score <= POOR_THRESHOLD and policy.attribute(score.attribute).critical
        for score in scores
    )
    aggregate: Fraction = weighted_mean(policy, scores)
    for rule in policy.aggregation:
        if rule.kind is RuleKind.CRITICAL_GATE:
            if gate_tripped:
                aggregate = min(aggregate, Fraction(int(rule.params.get("cap", 1))))
        elif rule.kind is RuleKind.WEIGHTED_MEAN:
            aggregate = Fraction(_round_half_up(aggregate))
        elif rule.kind is RuleKind.CLAMP:
            lo = Fraction(int(rule.params.get("lo", GRADE_MIN)))
            hi = Fraction(int(rule.params.get("hi", GRADE_MAX)))
            aggregate = min(max(aggregate, lo), hi)
    final = int(aggregate)
    if aggregate != final or not GRADE_MIN <= final <= GRADE_MAX:
        raise AggregationError(
            f"aggregation pipeline produced {aggregate}, not a grade in 0..4; "
            "check the policy's weighted_mean/clamp rules"
        )
    return final


@dataclass(frozen=True)
class PolicyChange:
    change: str  # added_attribute | removed_attribute | modified_weight | ...
    subject: str
    old: object = None
    new: object = None

    def to_dict(self) -> dict:
        return {"change": self.change, "subject": self.subject, "old": self.old, "new": self.new}


def policy_diff(old: Policy, new: Policy) -> list[PolicyChange]:
    """Structured change list between two revisions of the same policy.

    The diff is empty iff the two content hashes are equal.
    """
    if old.name != new.name:
        raise PolicyMismatchError(
            f"cannot diff policies with different names: {old.name!r} vs {new.name!r}"
        )
    changes: list[PolicyChange] = []
    if old.policy_version != new.policy_version:
        changes.append(
            PolicyChange("modified_version", old.name, old.policy_version, new.policy_version)
        )
    if old.changelog != new.changelog:
        changes.append(PolicyChange("modified_changelog", old.name, old.changelog, new.changelog))

    old_attrs = {a.name: a for a in old.attributes}
    new_attrs = {a.name: a for a in new.attributes}
    for name in sorted(new_attrs.keys() - old_attrs.keys()):
        changes.append(PolicyChange("added_attribute", name, None, new_attrs[name].to_dict()))
    for name in sorted(old_attrs.keys() - new_attrs.keys()):
        changes.append(PolicyChange("removed_attribute", name, old_attrs[name].to_dict(), None))
    for name in sorted(old_attrs.keys() & new_attrs.keys()):
        before, after = old_attrs[name], new_attrs[name]
        if before.weight != after.weight:
            changes.append(PolicyChange("modified_weight", name, before.weight, after.weight))
        if before.critical != after.critical:
            changes.append(PolicyChange("modified_critical", name, before.critical, after.critical))
        if before.description != after.description:
            changes.append(
                PolicyChange("modified_description", name, before.description, after.description)
            )
        if before.grade_guidance != after.grade_guidance:
            changes.append(
                PolicyChange(
                    "modified_guidance",
                    name,
                    dict(sorted(before.grade_guidance.items())),
                    dict(sorted(after.grade_guidance.items())),
                )
            )
    if [r.to_dict() for r in old.aggregation] != [r.to_dict() for r in new.aggregation]:
        changes.append(
            PolicyChange(
                "modified_aggregation",
                old.name,
                [r.to_dict() for r in old.aggregation],
                [r.to_dict() for r in new.aggregation],
            )
        )
    # Attribute order is part of the canonical body: a pure reorder must
    # still surface as a change or the hash/diff contract breaks.
    if not changes and old.content_hash != new.content_hash:
        changes.append(
            PolicyChange(
                "modified_attribute_order",
                old.name,
                list(old.attribute_names()),
                list(new.attribute_names()),
            )
        )
    return changes


def render_policy_rubric(policy: Policy) -> str:
    """Human/LLM-readable rendering of the policy rubric, deterministic."""
    lines = [f"Grading policy {policy.name} v{policy.policy_version}", ""]
    for rubric in policy.attributes:
        flags = " (critical)" if rubric.critical else ""
        lines.append(f"Attribute: {rubric.name}{flags} [weight {rubric.weight:g}]")
        if rubric.description:
            lines.append(f"  {rubric.description}")
        for grade in GRADES:
            guidance = rubric.grade_guidance.get(grade, "")
            lines.append(f"  grade {grade}: {guidance}")
        lines.append("")
    lines.append("Final grade = weighted mean of attribute scores (half-up), ")
    lines.append("capped when a critical attribute scores 1 or below, clamped to 0..4.")
    return "\n".join(lines)


def load_policy(path) -> Policy:
    with open(path, encoding="utf-8") as fh:
        return Policy.from_dict(json.load(fh))


def dump_policy(policy: Policy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy.body_dict(), fh, indent=2, ensure_ascii=False)
        fh.write("\n")
