import json
from collections import Counter

import pytest

from sage.core import AttributeScore, Document, Judgment, Query
from sage.distill import (
    ExampleSource,
    ExportRecord,
    TrainingExample,
    build_examples,
    corpus_stats,
    cost_report,
    export_corpus,
    read_corpus,
    rebalance_classes,
    serialize_teacher_response,
)
from sage.errors import DistillError

from .conftest import make_policy


def example(grade, tag="", source=ExampleSource.TRAFFIC):
    return TrainingExample(
        prompt=f"prompt for a grade-{grade} pair {tag}",
        response=json.dumps({"final_grade": grade}),
        grade_class=grade,
        source=source,
        strata=("channel=email",),
        template_id="rubric_v1",
    )


def skewed_corpus():
    examples = []
    for grade in range(4):
        examples.extend(example(grade, tag=str(i)) for i in range(5))
    examples.extend(example(4, tag=str(i)) for i in range(80))
    return examples


class TestRebalance:
    def test_skewed_histogram_becomes_uniform(self):
        out = rebalance_classes(skewed_corpus(), total_target=100, seed=11)
        histogram = Counter(e.grade_class for e in out)
        assert histogram == {0: 20, 1: 20, 2: 20, 3: 20, 4: 20}

    def test_near_uniformity_within_one(self):
        for total in (37, 50, 99, 101):
            out = rebalance_classes(skewed_corpus(), total_target=total, seed=2)
            histogram = Counter(e.grade_class for e in out)
            for cls in range(5):
                assert abs(histogram[cls] - total / 5) <= 1

    def test_uniform_input_subsamples_uniformly(self):
        uniform = [example(g, tag=str(i)) for g in range(5) for i in range(10)]
        out = rebalance_classes(uniform, total_target=25, seed=3)
        histogram = Counter(e.grade_class for e in out)
        assert histogram == {0: 5, 1: 5, 2: 5, 3: 5, 4: 5}

    def test_empty_class_with_target_errors(self):
        missing_zero = [e for e in skewed_corpus() if e.grade_class != 0]
        with pytest.raises(DistillError, match="class 0"):
            rebalance_classes(missing_zero, total_target=100)

    def test_explicit_target_fractions(self):
        out = rebalance_classes(
            skewed_corpus(),
            total_target=100,
            seed=5,
            target_fractions={4: 0.5, 3: 0.5},
        )
        histogram = Counter(e.grade_class for e in out)
        assert histogram == {3: 50, 4: 50}

    def test_outputs_are_byte_copies_of_inputs(self):
        corpus = skewed_corpus()
        originals = {json.dumps(e.to_dict(), sort_keys=True) for e in corpus}
        out = rebalance_classes(corpus, total_target=100, seed=13)
        for e in out:
            assert json.dumps(e.to_dict(), sort_keys=True) in originals

    def test_seeded_determinism(self):
        a = rebalance_classes(skewed_corpus(), total_target=60, seed=21)
        b = rebalance_classes(skewed_corpus(), total_target=60, seed=21)
        assert [e.to_dict() for e in a] == [e.to_dict() for e in b]


def judged_record(i, grade, policy):
    query = Query(query_id=f"q{i}", text=f"query {i}", facets={"Title": ("data analyst",)})
    document = Document(doc_id=f"d{i}", fields={"Title": ("Data Analyst",)})
    judgment = Judgment(
        query_id=query.query_id,
        doc_id=document.doc_id,
        policy_version=policy.policy_version,
        judge_id="teacher-1",
        attribute_scores=(AttributeScore("Title", grade, rationale="because"),),
        final_grade=grade,
        rationale="teacher rationale",
        created_at="2026-01-15T00:00:00+00:00",
    )
    return ExportRecord(query=query, document=document, judgment=judgment, strata=("channel=email",))


class TestExport:
    def test_line_per_example_and_stats(self, policy, tmp_path):
        records = [judged_record(i, i % 5, policy) for i in range(10)]
        examples = build_examples(records, {policy.policy_version: policy}, "rubric_v1")
        out = tmp_path / "corpus.jsonl"
        stats = export_corpus(examples, out)
        assert stats.total == 10
        assert sum(stats.class_histogram.values()) == 10
        lines = out.read_text(encoding="utf-8").strip().split("\n")
        assert len(lines) == 10
        stats_file = tmp_path / "corpus.jsonl.stats.json"
        assert json.loads(stats_file.read_text())["total"] == 10

    def test_stats_match_recount_of_emitted_file(self, policy, tmp_path):
        records = [judged_record(i, (i * 3) % 5, policy) for i in range(25)]
        examples = build_examples(records, {policy.policy_version: policy}, "rubric_v1")
        out = tmp_path / "corpus.jsonl"
        stats = export_corpus(examples, out)
        recounted = corpus_stats(read_corpus(out))
        assert recounted.to_dict() == stats.to_dict()

    def test_reruns_byte_identical(self, policy, tmp_path):
        records = [judged_record(i, i % 5, policy) for i in range(8)]
        examples = build_examples(records, {policy.policy_version: policy}, "rubric_v1")
        first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        export_corpus(examples, first)
        export_corpus(examples, second)
        assert first.read_bytes() == second.read_bytes()

    def test_prompt_contains_rubric_and_pair(self, policy):
        records = [judged_record(1, 4, policy)]
        (e,) = build_examples(records, {policy.policy_version: policy}, "rubric_v1")
        assert "Grading policy job_search" in e.prompt
        assert "query 1" in e.prompt
        assert e.grade_class == 4
        assert json.loads(e.response)["final_grade"] == 4

    def test_unresolvable_policy_version_errors(self, policy):
        records = [judged_record(1, 4, policy)]
        with pytest.raises(DistillError, match="unresolvable"):
            build_examples(records, {"9.9": policy}, "rubric_v1")

    def test_unknown_template_errors(self, policy):
        records = [judged_record(1, 4, policy)]
        with pytest.raises(Exception, match="missing_v0"):
            build_examples(records, {policy.policy_version: policy}, "missing_v0")

    def test_response_schema_matches_remote_judge(self, policy):
        record = judged_record(1, 3, policy)
        body = json.loads(serialize_teacher_response(record.judgment))
        assert body["attributes"][0]["name"] == "Title"
        assert body["final_grade"] == 3


class TestCostReport:
    UNIT_COSTS = {"human": 154.0, "teacher": 92.0, "student": 1.0}

    def test_table_three_normalization(self):
        report = cost_report({"human": 0, "teacher": 0, "student": 0}, self.UNIT_COSTS)
        assert report.row("human").relative_unit_cost == 154.0
        assert report.row("teacher").relative_unit_cost == 92.0
        assert report.row("student").relative_unit_cost == 1.0

    def test_single_tier_identity(self):
        report = cost_report({"student": 10}, {"student": 0.37})
        assert report.row("student").relative_unit_cost == 1.0

    def test_spend_is_count_times_relative(self):
        report = cost_report({"student": 1_000_000, "teacher": 10_000}, self.UNIT_COSTS)
        assert report.row("teacher").relative_spend == pytest.approx(92e4)
        assert report.row("student").relative_spend == pytest.approx(1e6)

    def test_missing_student_tier_errors(self):
        with pytest.raises(DistillError, match="student"):
            cost_report({}, {"human": 154.0})

    def test_text_rendering_multipliers(self):
        text = cost_report({"human": 1, "teacher": 2, "student": 3}, self.UNIT_COSTS).render_text()
        assert "154×" in text and "92×" in text and "1×" in text
