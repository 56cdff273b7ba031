"""Pluggable surrogate judges.

Two backends behind one JudgeSpec: a deterministic rubric judge (string
matching against query facets) for desk-scale runs and tests, and a remote
chat-completions-style LLM judge for production-style runs. Both emit
attribute scores only; the final grade is always recomputed locally through
the policy's aggregation pipeline so the audit trail stays deterministic.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx

from .core import AttributeScore, Document, Judgment, Policy, Query, aggregate_attributes
from .core import render_policy_rubric
from .errors import JudgeError, JudgeParseError, RemoteJudgeError

TOKEN_ENV_VAR = "SAGE_JUDGE_TOKEN"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _tokens(text: str) -> frozenset[str]:
    return frozenset(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class MatcherConfig:
    """Grades the rubric judge assigns per match outcome for one attribute.

    missing_grade applies when the document has no value for the attribute
    (neutral: the facet can be neither confirmed nor contradicted).
    """

    exact_grade: int = 4
    synonym_grade: int = 3
    partial_grade: int = 2
    mismatch_grade: int = 0
    missing_grade: int = 2
    overlap_threshold: float = 0.5
    synonyms: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self,
            "synonyms",
            {k.lower(): tuple(v.lower() for v in vals) for k, vals in dict(self.synonyms).items()},
        )

    def synonym_hit(self, a: str, b: str) -> bool:
        a, b = a.lower(), b.lower()
        return b in self.synonyms.get(a, ()) or a in self.synonyms.get(b, ())

    def to_dict(self) -> dict:
        return {
            "exact_grade": self.exact_grade,
            "synonym_grade": self.synonym_grade,
            "partial_grade": self.partial_grade,
            "mismatch_grade": self.mismatch_grade,
            "missing_grade": self.missing_grade,
            "overlap_threshold": self.overlap_threshold,
            "synonyms": {k: list(v) for k, v in self.synonyms.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MatcherConfig":
        return cls(
            exact_grade=data.get("exact_grade", 4),
            synonym_grade=data.get("synonym_grade", 3),
            partial_grade=data.get("partial_grade", 2),
            mismatch_grade=data.get("mismatch_grade", 0),
            missing_grade=data.get("missing_grade", 2),
            overlap_threshold=data.get("overlap_threshold", 0.5),
            synonyms={k: tuple(v) for k, v in data.get("synonyms", {}).items()},
        )


@dataclass(frozen=True)
class RubricConfig:
    default: MatcherConfig = field(default_factory=MatcherConfig)
    per_attribute: Mapping[str, MatcherConfig] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "per_attribute", dict(self.per_attribute))

    def matcher(self, attribute: str) -> MatcherConfig:
        return self.per_attribute.get(attribute, self.default)

    def to_dict(self) -> dict:
        return {
            "default": self.default.to_dict(),
            "per_attribute": {k: v.to_dict() for k, v in self.per_attribute.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RubricConfig":
        return cls(
            default=MatcherConfig.from_dict(data.get("default", {})),
            per_attribute={
                k: MatcherConfig.from_dict(v) for k, v in data.get("per_attribute", {}).items()
            },
        )


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str
    model: str
    prompt_template_id: str = "rubric_v1"
    timeout_ms: int = 30_000
    max_retries: int = 3
    max_parallel_requests: int = 8

    def to_dict(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "model": self.model,
            "prompt_template_id": self.prompt_template_id,
            "timeout_ms": self.timeout_ms,
            "max_retries": self.max_retries,
            "max_parallel_requests": self.max_parallel_requests,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RemoteConfig":
        return cls(
            endpoint=data["endpoint"],
            model=data["model"],
            prompt_template_id=data.get("prompt_template_id", "rubric_v1"),
            timeout_ms=data.get("timeout_ms", 30_000),
            max_retries=data.get("max_retries", 3),
            max_parallel_requests=data.get("max_parallel_requests", 8),
        )


class JudgeKind(str, Enum):
    RUBRIC = "rubric"
    REMOTE = "remote"


@dataclass(frozen=True)
class JudgeSpec:
    judge_id: str
    kind: JudgeKind
    rubric_config: RubricConfig | None = None
    remote_config: RemoteConfig | None = None

    def __post_init__(self):
        if self.kind is JudgeKind.RUBRIC:
            if self.rubric_config is None or self.remote_config is not None:
                raise JudgeError("rubric judge requires rubric_config and no remote_config")
        else:
            if self.remote_config is None or self.rubric_config is not None:
                raise JudgeError("remote judge requires remote_config and no rubric_config")

    def to_dict(self) -> dict:
        out: dict = {"judge_id": self.judge_id, "kind": self.kind.value}
        if self.rubric_config is not None:
            out["rubric_config"] = self.rubric_config.to_dict()
        if self.remote_config is not None:
            out["remote_config"] = self.remote_config.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "JudgeSpec":
        kind = JudgeKind(data["kind"])
        return cls(
            judge_id=data["judge_id"],
            kind=kind,
            rubric_config=(
                RubricConfig.from_dict(data["rubric_config"]) if kind is JudgeKind.RUBRIC else None
            ),
            remote_config=(
                RemoteConfig.from_dict(data["remote_config"]) if kind is JudgeKind.REMOTE else None
            ),
        )


def load_judge_spec(path: str | Path) -> JudgeSpec:
    with open(path, encoding="utf-8") as fh:
        return JudgeSpec.from_dict(json.load(fh))


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _match_attribute(
    matcher: MatcherConfig, facet_values: Sequence[str], doc_values: Sequence[str]
) -> tuple[int, str, str | None]:
    """Best achievable (grade, rationale, evidence) for one attribute."""
    if not doc_values:
        return matcher.missing_grade, "document does not state this attribute", None
    facet_norm = [v.strip().lower() for v in facet_values]
    doc_norm = [v.strip().lower() for v in doc_values]
    for fv, fn in zip(facet_values, facet_norm):
        for dv, dn in zip(doc_values, doc_norm):
            if fn == dn:
                return matcher.exact_grade, f"exact match on {fv!r}", dv
    for fv, fn in zip(facet_values, facet_norm):
        for dv, dn in zip(doc_values, doc_norm):
            if matcher.synonym_hit(fn, dn):
                return matcher.synonym_grade, f"synonym match: {fv!r} ~ {dv!r}", dv
    best = None
    for fv, fn in zip(facet_values, facet_norm):
        ft = _tokens(fn)
        if not ft:
            continue
        for dv, dn in zip(doc_values, doc_norm):
            dt = _tokens(dn)
            union = ft | dt
            if not union:
                continue
            jaccard = len(ft & dt) / len(union)
            if jaccard >= matcher.overlap_threshold and (best is None or jaccard > best[0]):
                best = (jaccard, fv, dv)
    if best is not None:
        _, fv, dv = best
        return matcher.partial_grade, f"partial token overlap: {fv!r} ~ {dv!r}", dv
    return matcher.mismatch_grade, "no match among stated values", doc_values[0]


def _rubric_scores(
    config: RubricConfig, policy: Policy, query: Query, document: Document
) -> list[AttributeScore]:
    names = set(policy.attribute_names())
    scores: list[AttributeScore] = []
    for attribute, facet_values in query.facets.items():
        if attribute not in names:
            raise JudgeError(
                f"query {query.query_id} facet {attribute!r} names no attribute of "
                f"policy {policy.name} v{policy.policy_version}"
            )
        grade, rationale, evidence = _match_attribute(
            config.matcher(attribute), facet_values, document.fields.get(attribute, ())
        )
        scores.append(
            AttributeScore(
                attribute=attribute,
                score=grade,
                rationale=rationale,
                evidence=f"{attribute}: {evidence}" if evidence is not None else None,
            )
        )
    if not scores:
        raise JudgeError(f"query {query.query_id} has no facets; nothing to assess")
    return scores


class ParseStatus(str, Enum):
    OK = "ok"
    MALFORMED = "malformed"
    MISSING_ATTRIBUTE = "missing_attribute"


@dataclass(frozen=True)
class RemoteJudgeResponse:
    raw_text: str
    parsed: tuple[AttributeScore, ...]
    parse_status: ParseStatus
    detail: str = ""


def parse_remote_judgment(raw: str, policy: Policy) -> RemoteJudgeResponse:
    """Parse a remote judge response body.

    Expected schema: {"attributes": [{"name", "score", "rationale",
    "evidence"?}, ...]}. Scores outside 0..4 or a non-JSON body are
    malformed; attribute names the policy does not define yield
    missing_attribute.
    """
    try:
        body = json.loads(raw)
    except json.JSONDecodeError as exc:
        return RemoteJudgeResponse(raw, (), ParseStatus.MALFORMED, f"not JSON: {exc}")
    if not isinstance(body, dict) or not isinstance(body.get("attributes"), list):
        return RemoteJudgeResponse(
            raw, (), ParseStatus.MALFORMED, 'missing "attributes" list in response body'
        )
    names = set(policy.attribute_names())
    scores: list[AttributeScore] = []
    for entry in body["attributes"]:
        if not isinstance(entry, dict) or "name" not in entry or "score" not in entry:
            return RemoteJudgeResponse(
                raw, (), ParseStatus.MALFORMED, f"attribute entry malformed: {entry!r}"
            )
        name, score = entry["name"], entry["score"]
        if not isinstance(score, int) or isinstance(score, bool) or not 0 <= score <= 4:
            return RemoteJudgeResponse(
                raw, (), ParseStatus.MALFORMED, f"score out of range for {name!r}: {score!r}"
            )
        if name not in names:
            return RemoteJudgeResponse(
                raw,
                (),
                ParseStatus.MISSING_ATTRIBUTE,
                f"attribute {name!r} not defined by policy {policy.name}",
            )
        scores.append(
            AttributeScore(
                attribute=name,
                score=score,
                rationale=entry.get("rationale", ""),
                evidence=entry.get("evidence"),
            )
        )
    if not scores:
        return RemoteJudgeResponse(raw, (), ParseStatus.MALFORMED, "empty attributes list")
    return RemoteJudgeResponse(raw, tuple(scores), ParseStatus.OK)


_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


def load_prompt_template(template_id: str, templates_dir: str | Path | None = None) -> str:
    """Resolve a template id to its text: templates_dir first, then the
    templates packaged with this module."""
    if templates_dir is not None:
        candidate = Path(templates_dir) / f"{template_id}.txt"
        if candidate.exists():
            return candidate.read_text(encoding="utf-8")
    try:
        return (
            resources.files("sage").joinpath(f"templates/{template_id}.txt").read_text("utf-8")
        )
    except FileNotFoundError:
        raise JudgeError(f"unknown prompt template id {template_id!r}") from None


def render_document_fields(document: Document) -> str:
    lines = [f"{name}: {'; '.join(values)}" for name, values in document.fields.items()]
    return "\n".join(lines) if lines else "(no fields)"


def hydrate_prompt(template: str, policy: Policy, query: Query, document: Document) -> str:
    """Fill the named placeholders; a placeholder this module does not know
    how to fill is an error naming it."""
    values = {
        "policy_rubric": render_policy_rubric(policy),
        "query_text": query.text,
        "document_fields": render_document_fields(document),
    }
    for match in _PLACEHOLDER_RE.finditer(template):
        if match.group(1) not in values:
            raise JudgeError(f"prompt template placeholder unfilled: {match.group(1)!r}")
    filled = template
    for name, value in values.items():
        filled = filled.replace("{" + name + "}", value)
    return filled


class RemoteJudgeClient:
    """HTTP client for a chat-completions-style judge endpoint.

    Retries transport failures and 5xx responses with exponential backoff
    (base 250 ms); 4xx responses and unparseable bodies are not retried.
    A custom transport can be injected for tests.
    """

    def __init__(
        self,
        config: RemoteConfig,
        templates_dir: str | Path | None = None,
        transport: httpx.BaseTransport | None = None,
        backoff_base_s: float = 0.25,
    ):
        self.config = config
        self.template = load_prompt_template(config.prompt_template_id, templates_dir)
        self._backoff = backoff_base_s
        headers = {}
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            timeout=config.timeout_ms / 1000.0, transport=transport, headers=headers
        )
        self._semaphore = threading.BoundedSemaphore(config.max_parallel_requests)

    def close(self) -> None:
        self._client.close()

    def score_pair(self, policy: Policy, query: Query, document: Document) -> RemoteJudgeResponse:
        prompt = hydrate_prompt(self.template, policy, query, document)
        payload = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": "You grade search relevance. Respond in JSON."},
                {"role": "user", "content": prompt},
            ],
            "response_format": {"type": "json_object"},
        }
        body = self._post_with_retries(payload)
        content = _completion_content(body)
        response = parse_remote_judgment(content, policy)
        if response.parse_status is not ParseStatus.OK:
            raise JudgeParseError(
                f"remote judge response unusable ({response.parse_status.value}): "
                f"{response.detail}",
                raw_text=response.raw_text,
            )
        # an OK response must cover every attribute the query expresses
        scored = {score.attribute for score in response.parsed}
        unscored = [name for name in query.facets if name not in scored]
        if unscored:
            raise JudgeParseError(
                f"remote judge scored no faceted attribute(s) {unscored} for "
                f"query {query.query_id}",
                raw_text=response.raw_text,
            )
        return response

    def _post_with_retries(self, payload: dict) -> str:
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self._backoff * 2 ** (attempt - 1))
            try:
                with self._semaphore:
                    response = self._client.post(self.config.endpoint, json=payload)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = RemoteJudgeError(
                    f"endpoint returned {response.status_code}: {response.text[:200]}"
                )
                continue
            if response.status_code >= 400:
                raise RemoteJudgeError(
                    f"endpoint rejected request ({response.status_code}): {response.text[:200]}"
                )
            return response.text
        raise RemoteJudgeError(
            f"remote judge unreachable after {self.config.max_retries + 1} attempts: {last_error}"
        )


def _completion_content(body_text: str) -> str:
    """Accept either a chat-completions envelope or a bare judgment body."""
    try:
        body = json.loads(body_text)
    except json.JSONDecodeError:
        return body_text
    if isinstance(body, dict) and isinstance(body.get("choices"), list) and body["choices"]:
        message = body["choices"][0].get("message", {})
        content = message.get("content")
        if isinstance(content, str):
            return content
    return body_text


class Judge:
    """Judge facade: grades (query, document) pairs under one policy."""

    def __init__(
        self,
        spec: JudgeSpec,
        policy: Policy,
        templates_dir: str | Path | None = None,
        transport: httpx.BaseTransport | None = None,
        backoff_base_s: float = 0.25,
        clock: Callable[[], str] = _now_iso,
    ):
        self.spec = spec
        self.policy = policy
        self._clock = clock
        self._remote: RemoteJudgeClient | None = None
        if spec.kind is JudgeKind.REMOTE:
            assert spec.remote_config is not None
            self._remote = RemoteJudgeClient(
                spec.remote_config, templates_dir, transport, backoff_base_s
            )

    def close(self) -> None:
        if self._remote is not None:
            self._remote.close()

    def judge_pair(self, query: Query, document: Document) -> Judgment:
        if self.spec.kind is JudgeKind.RUBRIC:
            assert self.spec.rubric_config is not None
            scores = _rubric_scores(self.spec.rubric_config, self.policy, query, document)
        else:
            assert self._remote is not None
            scores = list(self._remote.score_pair(self.policy, query, document).parsed)
        final = aggregate_attributes(self.policy, scores)
        rationale = "; ".join(f"{s.attribute}: {s.rationale}" for s in scores)
        return Judgment(
            query_id=query.query_id,
            doc_id=document.doc_id,
            policy_version=self.policy.policy_version,
            judge_id=self.spec.judge_id,
            attribute_scores=tuple(scores),
            final_grade=final,
            rationale=rationale,
            created_at=self._clock(),
        )


def judge_pair(
    spec: JudgeSpec,
    policy: Policy,
    query: Query,
    document: Document,
    **judge_kwargs,
) -> Judgment:
    """One-shot convenience wrapper around Judge for single pairs."""
    judge = Judge(spec, policy, **judge_kwargs)
    try:
        return judge.judge_pair(query, document)
    finally:
        judge.close()


class BatchProgress:
    """Atomic progress counters for a running batch."""

    def __init__(self, total: int):
        self.total = total
        self._lock = threading.Lock()
        self._completed = 0
        self._failed = 0
        self._in_flight = 0

    def _start(self) -> None:
        with self._lock:
            self._in_flight += 1

    def _finish(self, ok: bool) -> None:
        with self._lock:
            self._in_flight -= 1
            if ok:
                self._completed += 1
            else:
                self._failed += 1

    @property
    def completed(self) -> int:
        with self._lock:
            return self._completed

    @property
    def failed(self) -> int:
        with self._lock:
            return self._failed

    @property
    def in_flight(self) -> int:
        with self._lock:
            return self._in_flight

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "total": self.total,
                "completed": self._completed,
                "failed": self._failed,
                "in_flight": self._in_flight,
            }


@dataclass(frozen=True)
class BatchFailure:
    index: int
    query_id: str
    doc_id: str
    reason: str

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "query_id": self.query_id,
            "doc_id": self.doc_id,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class BatchResult:
    """Batch output aligned to input order: results[i] is the judgment for
    pair i, or None when that pair failed."""

    results: tuple[Judgment | None, ...]
    failures: tuple[BatchFailure, ...]

    @property
    def judgments(self) -> tuple[Judgment, ...]:
        return tuple(j for j in self.results if j is not None)


def annotate_batch(
    spec: JudgeSpec,
    policy: Policy,
    pairs: Sequence[tuple[Query, Document]],
    parallelism: int = 1,
    progress: BatchProgress | None = None,
    **judge_kwargs,
) -> BatchResult:
    """Grade a batch of pairs with a bounded worker pool.

    Output order matches input order regardless of completion order; a
    failing pair is recorded with its reason and never aborts the batch.
    """
    if parallelism < 1:
        raise JudgeError(f"parallelism must be >= 1, got {parallelism}")
    judge = Judge(spec, policy, **judge_kwargs)
    if progress is None:
        progress = BatchProgress(len(pairs))
    results: list[Judgment | None] = [None] * len(pairs)
    failures: list[BatchFailure] = []
    failures_lock = threading.Lock()

    def work(index: int) -> None:
        query, document = pairs[index]
        progress._start()
        try:
            results[index] = judge.judge_pair(query, document)
        except Exception as exc:  # per-pair isolation: collect, never propagate
            with failures_lock:
                failures.append(
                    BatchFailure(index, query.query_id, document.doc_id, str(exc))
                )
            progress._finish(ok=False)
            return
        progress._finish(ok=True)

    try:
        if parallelism == 1 or len(pairs) <= 1:
            for i in range(len(pairs)):
                work(i)
        else:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                list(pool.map(work, range(len(pairs))))
    finally:
        judge.close()
    failures.sort(key=lambda f: f.index)
    return BatchResult(results=tuple(results), failures=tuple(failures))


def read_pairs_jsonl(path: str | Path) -> list[tuple[Query, Document]]:
    """Input pairs file: one {"query": {...}, "document": {...}} per line."""
    pairs: list[tuple[Query, Document]] = []
    from .jsonl import read_jsonl

    for record in read_jsonl(path):
        pairs.append((Query.from_dict(record["query"]), Document.from_dict(record["document"])))
    return pairs


def write_judgments_jsonl(path: str | Path, judgments: Sequence[Judgment]) -> int:
    from .jsonl import write_jsonl

    return write_jsonl(path, (j.to_dict() for j in judgments))
