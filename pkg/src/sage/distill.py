"""Training-corpus construction for judge distillation: grade-class
rebalancing toward a near-uniform distribution, hydrated prompt/response
export, and relative cost reporting."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import Document, Judgment, Policy, Query, canonical_json
from .errors import DistillError
from .judge import hydrate_prompt, load_prompt_template
from .jsonl import read_jsonl

GRADE_CLASSES = (0, 1, 2, 3, 4)


class ExampleSource(str, Enum):
    TRAFFIC = "traffic"
    ASPIRATIONAL = "aspirational"


@dataclass(frozen=True)
class TrainingExample:
    """One supervised pair: the hydrated judge prompt and the teacher's
    serialized judgment. The class label always equals the grade inside the
    response."""

    prompt: str
    response: str
    grade_class: int
    source: ExampleSource
    strata: tuple[str, ...] = ()
    template_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "source", ExampleSource(self.source))
        object.__setattr__(self, "strata", tuple(self.strata))
        try:
            stated = json.loads(self.response).get("final_grade")
        except (json.JSONDecodeError, AttributeError):
            stated = None
        if stated is not None and stated != self.grade_class:
            raise DistillError(
                f"example class {self.grade_class} contradicts the grade {stated} "
                "inside its response"
            )

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "response": self.response,
            "class": self.grade_class,
            "source": self.source.value,
            "strata": list(self.strata),
            "template_id": self.template_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainingExample":
        return cls(
            prompt=data["prompt"],
            response=data["response"],
            grade_class=int(data["class"]),
            source=ExampleSource(data.get("source", "traffic")),
            strata=tuple(data.get("strata", ())),
            template_id=data.get("template_id", ""),
        )


@dataclass(frozen=True)
class CorpusStats:
    class_histogram: Mapping[int, int]
    total: int
    per_source: Mapping[str, int]
    per_stratum: Mapping[str, int]

    def __post_init__(self):
        object.__setattr__(self, "class_histogram", dict(self.class_histogram))
        object.__setattr__(self, "per_source", dict(self.per_source))
        object.__setattr__(self, "per_stratum", dict(self.per_stratum))
        if sum(self.class_histogram.values()) != self.total:
            raise DistillError("class histogram does not sum to total")

    def to_dict(self) -> dict:
        return {
            "class_histogram": {str(k): v for k, v in sorted(self.class_histogram.items())},
            "total": self.total,
            "per_source": dict(sorted(self.per_source.items())),
            "per_stratum": dict(sorted(self.per_stratum.items())),
        }


def corpus_stats(examples: Sequence[TrainingExample]) -> CorpusStats:
    histogram = {c: 0 for c in GRADE_CLASSES}
    per_source: dict[str, int] = {}
    per_stratum: dict[str, int] = {}
    for example in examples:
        histogram[example.grade_class] += 1
        per_source[example.source.value] = per_source.get(example.source.value, 0) + 1
        for stratum in example.strata:
            per_stratum[stratum] = per_stratum.get(stratum, 0) + 1
    return CorpusStats(
        class_histogram=histogram,
        total=len(examples),
        per_source=per_source,
        per_stratum=per_stratum,
    )


def _seeded_rng(seed: int, salt: str) -> random.Random:
    import hashlib

    digest = hashlib.sha256(f"{seed}|{salt}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def rebalance_classes(
    examples: Sequence[TrainingExample],
    total_target: int,
    seed: int = 0,
    target_fractions: Mapping[int, float] | None = None,
) -> list[TrainingExample]:
    """Resample toward a near-uniform class distribution.

    Default per-class target is round(total_target / 5); an explicit
    fraction map reshapes it. Overrepresented classes are downsampled
    without replacement, underrepresented ones upsampled by seeded
    duplication. Every output example is one of the input examples; only
    multiplicity changes.
    """
    if total_target < 1:
        raise DistillError("total_target must be >= 1")
    by_class: dict[int, list[TrainingExample]] = {c: [] for c in GRADE_CLASSES}
    for example in examples:
        by_class[example.grade_class].append(example)

    targets: dict[int, int] = {}
    for cls in GRADE_CLASSES:
        if target_fractions is not None:
            share = target_fractions.get(cls, 0.0)
            targets[cls] = round(total_target * share)
        else:
            targets[cls] = round(total_target / len(GRADE_CLASSES))
    for cls, want in targets.items():
        if want > 0 and not by_class[cls]:
            raise DistillError(
                f"class {cls} has no examples but a target count of {want}"
            )

    output: list[TrainingExample] = []
    for cls in GRADE_CLASSES:
        pool = by_class[cls]
        want = targets[cls]
        if want == 0:
            continue
        rng = _seeded_rng(seed, f"class-{cls}")
        if want <= len(pool):
            chosen = [pool[i] for i in sorted(rng.sample(range(len(pool)), want))]
        else:
            chosen = list(pool)
            chosen.extend(pool[rng.randrange(len(pool))] for _ in range(want - len(pool)))
        output.extend(chosen)
    return output


@dataclass(frozen=True)
class ExportRecord:
    """Everything needed to hydrate one training example."""

    query: Query
    document: Document
    judgment: Judgment
    source: ExampleSource = ExampleSource.TRAFFIC
    strata: tuple[str, ...] = ()


def serialize_teacher_response(judgment: Judgment) -> str:
    """Teacher output in the same wire schema the remote judge emits, so the
    student trains on exactly the format it must produce."""
    attributes = []
    for score in judgment.attribute_scores:
        entry: dict = {
            "name": score.attribute,
            "score": score.score,
            "rationale": score.rationale,
        }
        if score.evidence is not None:
            entry["evidence"] = score.evidence
        attributes.append(entry)
    return canonical_json(
        {
            "attributes": attributes,
            "final_grade": judgment.final_grade,
            "rationale": judgment.rationale,
        }
    )


def build_examples(
    records: Iterable[ExportRecord],
    policies: Mapping[str, Policy],
    template_id: str,
    templates_dir: str | Path | None = None,
) -> list[TrainingExample]:
    """Hydrate prompt/response training pairs from judged traffic.

    Every judgment's policy_version must resolve to a policy; the prompt is
    hydrated with that policy's rubric so the student sees exactly what the
    teacher saw.
    """
    template = load_prompt_template(template_id, templates_dir)
    examples: list[TrainingExample] = []
    for record in records:
        policy = policies.get(record.judgment.policy_version)
        if policy is None:
            raise DistillError(
                f"judgment for ({record.judgment.query_id}, {record.judgment.doc_id}) "
                f"references unresolvable policy version "
                f"{record.judgment.policy_version!r}"
            )
        prompt = hydrate_prompt(template, policy, record.query, record.document)
        examples.append(
            TrainingExample(
                prompt=prompt,
                response=serialize_teacher_response(record.judgment),
                grade_class=record.judgment.final_grade,
                source=record.source,
                strata=record.strata,
                template_id=template_id,
            )
        )
    return examples


def export_corpus(
    examples: Sequence[TrainingExample], out_path: str | Path
) -> CorpusStats:
    """Write the corpus JSONL plus a stats JSON alongside; byte-deterministic
    for identical inputs."""
    out_path = Path(out_path)
    stats = corpus_stats(examples)
    with open(out_path, "w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(canonical_json(example.to_dict()))
            fh.write("\n")
    stats_path = out_path.with_suffix(out_path.suffix + ".stats.json")
    with open(stats_path, "w", encoding="utf-8") as fh:
        json.dump(stats.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return stats


def read_corpus(path: str | Path) -> list[TrainingExample]:
    return [TrainingExample.from_dict(record) for record in read_jsonl(path)]


@dataclass(frozen=True)
class CostRow:
    tier: str
    count: int
    relative_unit_cost: float
    relative_spend: float

    def to_dict(self) -> dict:
        return {
            "tier": self.tier,
            "count": self.count,
            "relative_unit_cost": self.relative_unit_cost,
            "relative_spend": self.relative_spend,
        }


@dataclass(frozen=True)
class CostReport:
    rows: tuple[CostRow, ...]
    normalized_to: str = "student"

    def row(self, tier: str) -> CostRow:
        for row in self.rows:
            if row.tier == tier:
                return row
        raise KeyError(tier)

    def to_dict(self) -> dict:
        return {"normalized_to": self.normalized_to, "rows": [r.to_dict() for r in self.rows]}

    def render_text(self) -> str:
        """Aligned-column rendering with unit costs as multipliers."""
        header = ("tier", "count", "unit cost", "spend")
        lines = [
            (row.tier, str(row.count), f"{row.relative_unit_cost:g}×", f"{row.relative_spend:g}")
            for row in self.rows
        ]
        widths = [max(len(r[i]) for r in [header, *lines]) for i in range(4)]
        out = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
        for line in lines:
            out.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(line)))
        return "\n".join(out)


def cost_report(
    counts: Mapping[str, int],
    unit_costs: Mapping[str, float],
    student_tier: str = "student",
) -> CostReport:
    """Cost table with every tier normalized to the student tier = 1.0."""
    if student_tier not in unit_costs:
        raise DistillError(f"unit_costs must include the student tier {student_tier!r}")
    student_cost = unit_costs[student_tier]
    if student_cost <= 0:
        raise DistillError("student tier unit cost must be positive")
    rows = []
    for tier in sorted(unit_costs, key=lambda t: -unit_costs[t] / student_cost):
        relative = unit_costs[tier] / student_cost
        count = counts.get(tier, 0)
        rows.append(
            CostRow(
                tier=tier,
                count=count,
                relative_unit_cost=relative,
                relative_spend=count * relative,
            )
        )
    return CostReport(rows=tuple(rows), normalized_to=student_tier)
