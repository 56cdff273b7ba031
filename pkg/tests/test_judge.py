import json

import httpx
import pytest

from sage.core import Document, Query, aggregate_attributes
from sage.errors import JudgeError, JudgeParseError, RemoteJudgeError
from sage.judge import (
    BatchProgress,
    JudgeKind,
    JudgeSpec,
    MatcherConfig,
    ParseStatus,
    RemoteConfig,
    RubricConfig,
    annotate_batch,
    hydrate_prompt,
    judge_pair,
    load_prompt_template,
    parse_remote_judgment,
)

from .conftest import make_policy


def rubric_spec(judge_id="rubric-judge", synonyms=None, per_attribute=None):
    return JudgeSpec(
        judge_id=judge_id,
        kind=JudgeKind.RUBRIC,
        rubric_config=RubricConfig(
            default=MatcherConfig(synonyms=synonyms or {}),
            per_attribute=per_attribute or {},
        ),
    )


def query(facets, query_id="q1", text="data analyst in berlin"):
    return Query(query_id=query_id, text=text, facets=facets)


def doc(fields, doc_id="d1"):
    return Document(doc_id=doc_id, fields=fields)


class TestRubricJudge:
    def test_exact_match_is_case_insensitive(self, policy):
        judgment = judge_pair(
            rubric_spec(),
            policy,
            query({"Title": ("data analyst",)}),
            doc({"Title": ("Data Analyst",)}),
        )
        (score,) = [s for s in judgment.attribute_scores if s.attribute == "Title"]
        assert score.score == 4
        assert "exact match" in score.rationale

    def test_critical_mismatch_gated(self):
        policy = make_policy(weights={"Title": 1.0}, critical={"Title"}, cap=1)
        judgment = judge_pair(
            rubric_spec(),
            policy,
            query({"Title": ("data analyst",)}),
            doc({"Title": ("barista",)}),
        )
        assert judgment.final_grade <= 1

    def test_weighted_mix(self, policy):
        # Title exact (4) at weight 3, Location mismatch (0) at weight 1
        judgment = judge_pair(
            rubric_spec(),
            policy,
            query({"Title": ("data analyst",), "Location": ("berlin",)}),
            doc({"Title": ("data analyst",), "Location": ("tokyo",)}),
        )
        assert judgment.final_grade == 3

    def test_synonym_and_partial_grades(self, policy):
        spec = rubric_spec(synonyms={"data analyst": ("business analyst",)})
        j_syn = judge_pair(
            spec, policy, query({"Title": ("data analyst",)}), doc({"Title": ("Business Analyst",)})
        )
        assert j_syn.attribute_scores[0].score == 3
        j_partial = judge_pair(
            spec,
            policy,
            query({"Title": ("senior data analyst",)}),
            doc({"Title": ("data analyst",)}),
        )
        assert j_partial.attribute_scores[0].score == 2  # jaccard 2/3

    def test_missing_field_is_neutral(self, policy):
        judgment = judge_pair(
            rubric_spec(), policy, query({"Location": ("berlin",)}), doc({"Title": ("x",)})
        )
        assert judgment.attribute_scores[0].score == 2
        assert judgment.attribute_scores[0].evidence is None

    def test_unknown_facet_errors(self, policy):
        with pytest.raises(JudgeError, match="Salary"):
            judge_pair(rubric_spec(), policy, query({"Salary": ("100k",)}), doc({}))

    def test_judgment_recomputable(self, policy):
        judgment = judge_pair(
            rubric_spec(),
            policy,
            query({"Title": ("data analyst",), "Location": ("berlin",)}),
            doc({"Title": ("Data Analyst",), "Location": ("Berlin",)}),
        )
        assert judgment.final_grade == aggregate_attributes(policy, judgment.attribute_scores)

    def test_deterministic_across_runs(self, policy):
        q = query({"Title": ("data analyst",), "Location": ("berlin",)})
        d = doc({"Title": ("Data Analyst",), "Location": ("remote",)})
        a = judge_pair(rubric_spec(), policy, q, d)
        b = judge_pair(rubric_spec(), policy, q, d)
        assert a.attribute_scores == b.attribute_scores
        assert a.final_grade == b.final_grade


class TestParseRemoteJudgment:
    def test_happy_path(self, policy):
        raw = json.dumps(
            {"attributes": [{"name": "Title", "score": 4, "rationale": "explicit title match"}]}
        )
        response = parse_remote_judgment(raw, policy)
        assert response.parse_status is ParseStatus.OK
        assert response.parsed[0].attribute == "Title"

    def test_score_out_of_range(self, policy):
        raw = json.dumps({"attributes": [{"name": "Title", "score": 7}]})
        assert parse_remote_judgment(raw, policy).parse_status is ParseStatus.MALFORMED

    def test_unknown_attribute(self, policy):
        raw = json.dumps({"attributes": [{"name": "Salary", "score": 3}]})
        response = parse_remote_judgment(raw, policy)
        assert response.parse_status is ParseStatus.MISSING_ATTRIBUTE
        assert "Salary" in response.detail

    def test_non_json_body(self, policy):
        assert parse_remote_judgment("not json at all", policy).parse_status is (
            ParseStatus.MALFORMED
        )


def remote_spec(judge_id="remote-judge", **overrides):
    config = dict(
        endpoint="https://judge.example/v1/chat/completions",
        model="teacher-1",
        max_retries=2,
        max_parallel_requests=4,
    )
    config.update(overrides)
    return JudgeSpec(judge_id=judge_id, kind=JudgeKind.REMOTE, remote_config=RemoteConfig(**config))


def chat_envelope(content: dict) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": json.dumps(content)}}]}


class TestRemoteJudge:
    def test_scores_come_from_endpoint_but_grade_is_local(self, policy):
        def handler(request):
            payload = json.loads(request.content)
            assert payload["model"] == "teacher-1"
            assert payload["response_format"] == {"type": "json_object"}
            return httpx.Response(
                200,
                json=chat_envelope(
                    {
                        "attributes": [
                            {"name": "Title", "score": 4, "rationale": "matches"},
                            {"name": "Location", "score": 0, "rationale": "wrong city"},
                        ],
                        "final_grade": 0,  # remote's own verdict is ignored
                    }
                ),
            )

        judgment = judge_pair(
            remote_spec(),
            policy,
            query({"Title": ("data analyst",), "Location": ("berlin",)}),
            doc({"Title": ("Data Analyst",)}),
            transport=httpx.MockTransport(handler),
        )
        # locally recomputed: (4*3 + 0*1)/4 = 3, not the remote final_grade
        assert judgment.final_grade == 3

    def test_retries_5xx_then_succeeds(self, policy):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] < 3:
                return httpx.Response(503, text="overloaded")
            return httpx.Response(
                200, json=chat_envelope({"attributes": [{"name": "Title", "score": 2}]})
            )

        judgment = judge_pair(
            remote_spec(),
            policy,
            query({"Title": ("data analyst",)}),
            doc({"Title": ("Data Analyst",)}),
            transport=httpx.MockTransport(handler),
            backoff_base_s=0.0,
        )
        assert calls["n"] == 3
        assert judgment.final_grade == 2

    def test_transport_failure_after_retries(self, policy):
        def handler(request):
            raise httpx.ConnectError("unreachable")

        with pytest.raises(RemoteJudgeError, match="after 3 attempts"):
            judge_pair(
                remote_spec(),
                policy,
                query({"Title": ("data analyst",)}),
                doc({}),
                transport=httpx.MockTransport(handler),
                backoff_base_s=0.0,
            )

    def test_malformed_response_carries_raw_text(self, policy):
        def handler(request):
            return httpx.Response(200, json=chat_envelope({"attributes": "garbage"}))

        with pytest.raises(JudgeParseError) as excinfo:
            judge_pair(
                remote_spec(),
                policy,
                query({"Title": ("data analyst",)}),
                doc({}),
                transport=httpx.MockTransport(handler),
            )
        assert "garbage" in excinfo.value.raw_text

    def test_ok_response_must_cover_every_facet(self, policy):
        def handler(request):
            # scores Title only; the query also expresses Location
            return httpx.Response(
                200, json=chat_envelope({"attributes": [{"name": "Title", "score": 4}]})
            )

        with pytest.raises(JudgeParseError, match="Location"):
            judge_pair(
                remote_spec(),
                policy,
                query({"Title": ("data analyst",), "Location": ("berlin",)}),
                doc({}),
                transport=httpx.MockTransport(handler),
            )

    def test_bearer_token_from_env(self, policy, monkeypatch):
        monkeypatch.setenv("SAGE_JUDGE_TOKEN", "sekrit")
        seen = {}

        def handler(request):
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(
                200, json=chat_envelope({"attributes": [{"name": "Title", "score": 1}]})
            )

        judge_pair(
            remote_spec(),
            policy,
            query({"Title": ("data analyst",)}),
            doc({}),
            transport=httpx.MockTransport(handler),
        )
        assert seen["auth"] == "Bearer sekrit"


class TestPromptTemplate:
    def test_default_template_hydrates(self, policy):
        template = load_prompt_template("rubric_v1")
        prompt = hydrate_prompt(
            template, policy, query({"Title": ("data analyst",)}), doc({"Title": ("DA",)})
        )
        assert "data analyst in berlin" in prompt
        assert "Title: DA" in prompt
        assert "{policy_rubric}" not in prompt

    def test_unknown_placeholder_errors(self, policy):
        with pytest.raises(JudgeError, match="few_shot_examples"):
            hydrate_prompt(
                "grade this: {few_shot_examples}", policy, query({"Title": ("x",)}), doc({})
            )

    def test_unknown_template_id_errors(self):
        with pytest.raises(JudgeError, match="nope_v9"):
            load_prompt_template("nope_v9")

    def test_templates_dir_override(self, policy, tmp_path):
        (tmp_path / "custom_v2.txt").write_text("Q={query_text}", encoding="utf-8")
        template = load_prompt_template("custom_v2", templates_dir=tmp_path)
        assert hydrate_prompt(template, policy, query({"Title": ("x",)}), doc({})).startswith("Q=")


class TestAnnotateBatch:
    def pairs(self, n, policy):
        out = []
        for i in range(n):
            out.append(
                (
                    query({"Title": ("data analyst",)}, query_id=f"q{i}"),
                    doc({"Title": ("Data Analyst" if i % 2 else "barista",)}, doc_id=f"d{i}"),
                )
            )
        return out

    def test_order_stable_under_parallelism(self, policy):
        pairs = self.pairs(100, policy)
        result = annotate_batch(rubric_spec(), policy, pairs, parallelism=8)
        assert len(result.judgments) == 100
        assert not result.failures
        for i, judgment in enumerate(result.results):
            assert judgment is not None
            assert judgment.query_id == f"q{i}"
            assert judgment.doc_id == f"d{i}"

    def test_failure_isolation(self, policy):
        def handler(request):
            return httpx.Response(200, text="not json { definitely")

        pairs = [(query({"Title": ("x",)}), doc({}))]
        result = annotate_batch(
            remote_spec(), policy, pairs, parallelism=1, transport=httpx.MockTransport(handler)
        )
        assert len(result.judgments) == 0
        assert len(result.failures) == 1
        assert result.failures[0].index == 0

    def test_mixed_failures_keep_other_pairs(self, policy):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            body = json.loads(request.content)
            if "q1" in body["messages"][1]["content"]:
                return httpx.Response(400, text="bad request")
            return httpx.Response(
                200, json=chat_envelope({"attributes": [{"name": "Title", "score": 3}]})
            )

        pairs = [
            (query({"Title": ("x",)}, query_id="q0", text="q0 text"), doc({}, doc_id="d0")),
            (query({"Title": ("x",)}, query_id="q1", text="q1 text"), doc({}, doc_id="d1")),
            (query({"Title": ("x",)}, query_id="q2", text="q2 text"), doc({}, doc_id="d2")),
        ]
        result = annotate_batch(
            remote_spec(), policy, pairs, parallelism=3, transport=httpx.MockTransport(handler)
        )
        assert [j.query_id for j in result.judgments] == ["q0", "q2"]
        assert [f.query_id for f in result.failures] == ["q1"]

    def test_rerun_identical_modulo_timestamps(self, policy):
        pairs = self.pairs(20, policy)
        fixed = lambda: "2026-01-01T00:00:00+00:00"  # noqa: E731
        a = annotate_batch(rubric_spec(), policy, pairs, parallelism=4, clock=fixed)
        b = annotate_batch(rubric_spec(), policy, pairs, parallelism=2, clock=fixed)
        assert [j.to_dict() for j in a.judgments] == [j.to_dict() for j in b.judgments]

    def test_progress_counters(self, policy):
        pairs = self.pairs(10, policy)
        progress = BatchProgress(len(pairs))
        annotate_batch(rubric_spec(), policy, pairs, parallelism=2, progress=progress)
        snap = progress.snapshot()
        assert snap["completed"] == 10
        assert snap["failed"] == 0
        assert snap["in_flight"] == 0

    def test_parallelism_must_be_positive(self, policy):
        with pytest.raises(JudgeError):
            annotate_batch(rubric_spec(), policy, [], parallelism=0)
