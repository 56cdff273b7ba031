"""Traffic-replay harness for offline candidate selection: stratified
sampling of logged traffic, replay against candidate systems, report
comparison, and release gating."""

from __future__ import annotations

import hashlib
import json
import random
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .core import Document, FrequencyBucket, Query
from .errors import GateConfigError, PolicyMismatchError, SamplingError
from .jsonl import read_jsonl, write_jsonl
from .metrics import EvalReport

TAIL_UPWEIGHT_PROPORTIONS = {"head": 0.2, "torso": 0.3, "tail": 0.5}


@dataclass(frozen=True)
class TrafficRecord:
    """One logged serving event: the query and the documents served, with
    fields frozen as they were at log time."""

    query: Query
    served_results: tuple[tuple[str, Document, int], ...]  # (doc_id, snapshot, position)
    timestamp: str = ""

    def __post_init__(self):
        results = tuple(self.served_results)
        object.__setattr__(self, "served_results", results)
        positions = [pos for _, _, pos in results]
        if positions != list(range(1, len(positions) + 1)):
            raise ValueError(
                f"positions must be contiguous from 1, got {positions} "
                f"for query {self.query.query_id}"
            )

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "served_results": [
                {"doc_id": doc_id, "document": doc.to_dict(), "position": pos}
                for doc_id, doc, pos in self.served_results
            ],
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrafficRecord":
        return cls(
            query=Query.from_dict(data["query"]),
            served_results=tuple(
                (r["doc_id"], Document.from_dict(r["document"]), int(r["position"]))
                for r in data.get("served_results", [])
            ),
            timestamp=data.get("timestamp", ""),
        )


@dataclass(frozen=True)
class StrataSpec:
    """Sampling plan: per-dimension target proportions over query properties
    (channel, locale, frequency_bucket), a total size, and a seed.

    upweight_tail adds frequency_bucket targets of head 0.2 / torso 0.3 /
    tail 0.5 unless the spec already constrains that dimension.
    """

    dimensions: tuple[tuple[str, Mapping[str, float]], ...]
    total_sample_size: int
    seed: int = 0
    upweight_tail: bool = False

    def __post_init__(self):
        if self.total_sample_size < 1:
            raise ValueError("total_sample_size must be >= 1")
        dims = [(name, dict(props)) for name, props in self.dimensions]
        if self.upweight_tail and not any(name == "frequency_bucket" for name, _ in dims):
            dims.append(("frequency_bucket", dict(TAIL_UPWEIGHT_PROPORTIONS)))
        for name, props in dims:
            if not props:
                raise ValueError(f"dimension {name!r} has no target proportions")
            total = sum(props.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"proportions for {name!r} sum to {total}, expected 1")
        object.__setattr__(self, "dimensions", tuple((n, p) for n, p in dims))

    def to_dict(self) -> dict:
        return {
            "dimensions": [
                {"name": name, "proportions": dict(props)} for name, props in self.dimensions
            ],
            "total_sample_size": self.total_sample_size,
            "seed": self.seed,
            "upweight_tail": self.upweight_tail,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "StrataSpec":
        return cls(
            dimensions=tuple(
                (d["name"], d["proportions"]) for d in data.get("dimensions", [])
            ),
            total_sample_size=int(data["total_sample_size"]),
            seed=int(data.get("seed", 0)),
            upweight_tail=data.get("upweight_tail", False),
        )


def _query_dimension(query: Query, dimension: str) -> str:
    if dimension == "channel":
        return query.channel.value
    if dimension == "locale":
        return query.locale
    if dimension == "frequency_bucket":
        return query.frequency_bucket.value
    raise SamplingError(f"unknown stratification dimension {dimension!r}")


def _stratum_key(values: Sequence[tuple[str, str]]) -> str:
    return ";".join(f"{dim}={val}" for dim, val in values)


def _seeded_rng(seed: int, stratum: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}|{stratum}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _largest_remainder(targets: Mapping[str, float], total: int) -> dict[str, int]:
    """Apportion `total` across strata proportionally to `targets`."""
    weight = sum(targets.values())
    quotas = {key: total * share / weight for key, share in targets.items()}
    counts = {key: int(q) for key, q in quotas.items()}
    leftover = total - sum(counts.values())
    by_remainder = sorted(
        targets.keys(), key=lambda key: (-(quotas[key] - counts[key]), key)
    )
    for key in by_remainder[:leftover]:
        counts[key] += 1
    return counts


@dataclass(frozen=True)
class SampleSet:
    records: tuple[tuple[str, TrafficRecord], ...]  # (stratum key, record)
    spec: StrataSpec
    shortfalls: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "shortfalls", dict(self.shortfalls))

    @property
    def queries(self) -> tuple[Query, ...]:
        return tuple(record.query for _, record in self.records)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for stratum, _ in self.records:
            out[stratum] = out.get(stratum, 0) + 1
        return out

    def to_jsonl(self, path: str | Path) -> int:
        return write_jsonl(
            path,
            ({"stratum": stratum, **record.to_dict()} for stratum, record in self.records),
        )

    @classmethod
    def from_jsonl(cls, path: str | Path, spec: StrataSpec | None = None) -> "SampleSet":
        records = tuple(
            (record.pop("stratum"), TrafficRecord.from_dict(record))
            for record in read_jsonl(path)
        )
        if spec is None:
            spec = StrataSpec(dimensions=(), total_sample_size=max(len(records), 1))
        return cls(records=records, spec=spec)


def stratified_sample(log: Iterable[TrafficRecord], spec: StrataSpec) -> SampleSet:
    """Deterministic stratified sample of the traffic log.

    Strata are the crossed cells of the spec's dimensions with cell targets
    as the product of per-dimension proportions, apportioned by largest
    remainder. A stratum short of its quota contributes everything it has;
    the shortfall is redistributed proportionally across strata with spare
    capacity and reported per stratum.
    """
    records = list(log)
    if not records:
        raise SamplingError("traffic log is empty")

    targets: dict[str, float] = {}
    cells: dict[str, list[TrafficRecord]] = {}

    def build(dim_index: int, prefix: tuple[tuple[str, str], ...], share: float):
        if dim_index == len(spec.dimensions):
            key = _stratum_key(prefix)
            targets[key] = share
            cells[key] = []
            return
        name, props = spec.dimensions[dim_index]
        for value, proportion in sorted(props.items()):
            build(dim_index + 1, prefix + ((name, value),), share * proportion)

    build(0, (), 1.0)

    for record in records:
        values = tuple(
            (name, _query_dimension(record.query, name)) for name, _ in spec.dimensions
        )
        key = _stratum_key(values)
        if key in cells:
            cells[key].append(record)

    total = min(spec.total_sample_size, sum(len(v) for v in cells.values()))
    quotas = _largest_remainder(targets, spec.total_sample_size)
    shortfalls: dict[str, int] = {}
    taken: dict[str, int] = {}
    for key, quota in quotas.items():
        available = len(cells[key])
        taken[key] = min(quota, available)
        if available < quota:
            shortfalls[key] = quota - available

    # redistribute shortfall into strata with spare capacity, proportional to
    # their original targets, until the sample is full or capacity runs out
    while True:
        need = total - sum(taken.values())
        if need <= 0:
            break
        spare = {
            key: targets[key]
            for key in cells
            if len(cells[key]) > taken[key] and targets[key] > 0
        }
        if not spare:
            spare = {key: 1.0 for key in cells if len(cells[key]) > taken[key]}
        if not spare:
            break
        for key, add in _largest_remainder(spare, need).items():
            grant = min(add, len(cells[key]) - taken[key])
            taken[key] += grant

    sampled: list[tuple[str, TrafficRecord]] = []
    for key in sorted(cells.keys()):
        want = taken.get(key, 0)
        members = cells[key]
        if want >= len(members):
            chosen = list(members)
        else:
            rng = _seeded_rng(spec.seed, key)
            chosen = [members[i] for i in sorted(rng.sample(range(len(members)), want))]
        sampled.extend((key, record) for record in chosen)
    return SampleSet(records=tuple(sampled), spec=spec, shortfalls=shortfalls)


class SutKind(str, Enum):
    HTTP_ENDPOINT = "http_endpoint"
    RECORDED_RUN = "recorded_run"


@dataclass(frozen=True)
class SystemUnderTest:
    """A ranking system to replay against: a live HTTP endpoint or a
    recorded-run results file that replays byte-deterministically."""

    sut_id: str
    kind: SutKind
    endpoint: str = ""
    timeout_ms: int = 30_000
    max_parallel: int = 8
    max_retries: int = 2
    results_file: str = ""

    def to_dict(self) -> dict:
        out: dict = {"sut_id": self.sut_id, "kind": self.kind.value}
        if self.kind is SutKind.HTTP_ENDPOINT:
            out.update(
                endpoint=self.endpoint,
                timeout_ms=self.timeout_ms,
                max_parallel=self.max_parallel,
                max_retries=self.max_retries,
            )
        else:
            out["results_file"] = self.results_file
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "SystemUnderTest":
        return cls(
            sut_id=data["sut_id"],
            kind=SutKind(data["kind"]),
            endpoint=data.get("endpoint", ""),
            timeout_ms=data.get("timeout_ms", 30_000),
            max_parallel=data.get("max_parallel", 8),
            max_retries=data.get("max_retries", 2),
            results_file=data.get("results_file", ""),
        )


@dataclass(frozen=True)
class RankedResults:
    """Ordered documents one SUT returned for one query."""

    query: Query
    results: tuple[tuple[str, Document], ...]
    sut_id: str
    captured_at: str = ""

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "results": [
                {"doc_id": doc_id, "document": document.to_dict(), "position": i}
                for i, (doc_id, document) in enumerate(self.results, start=1)
            ],
            "sut_id": self.sut_id,
            "captured_at": self.captured_at,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RankedResults":
        results = sorted(data.get("results", []), key=lambda r: r["position"])
        return cls(
            query=Query.from_dict(data["query"]),
            results=tuple(
                (r["doc_id"], Document.from_dict(r["document"])) for r in results
            ),
            sut_id=data.get("sut_id", ""),
            captured_at=data.get("captured_at", ""),
        )


@dataclass(frozen=True)
class ReplayFailure:
    query_id: str
    reason: str

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "reason": self.reason}


@dataclass(frozen=True)
class ReplayResult:
    results: tuple[RankedResults, ...]
    failures: tuple[ReplayFailure, ...]

    def to_jsonl(self, path: str | Path) -> int:
        return write_jsonl(path, (r.to_dict() for r in self.results))


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def replay(
    sut: SystemUnderTest,
    sample: SampleSet,
    parallelism: int = 1,
    transport: httpx.BaseTransport | None = None,
    clock: Callable[[], str] = _now_iso,
    backoff_base_s: float = 0.25,
) -> ReplayResult:
    """Run every sampled query against the SUT, isolating per-query failures.

    recorded_run SUTs reproduce their results file exactly; http_endpoint
    SUTs POST {"query": {...}} and expect {"results": [{doc_id, fields,
    position}]}.
    """
    queries = list(sample.queries)
    if sut.kind is SutKind.RECORDED_RUN:
        by_query: dict[str, RankedResults] = {}
        for record in read_jsonl(sut.results_file):
            parsed = RankedResults.from_dict({**record, "sut_id": sut.sut_id})
            by_query[parsed.query.query_id] = parsed
        results = []
        failures = []
        for query in queries:
            hit = by_query.get(query.query_id)
            if hit is None:
                failures.append(ReplayFailure(query.query_id, "not present in recorded run"))
            else:
                results.append(hit)
        return ReplayResult(results=tuple(results), failures=tuple(failures))

    client = httpx.Client(timeout=sut.timeout_ms / 1000.0, transport=transport)
    out: list[RankedResults | None] = [None] * len(queries)
    failures_list: list[ReplayFailure] = []

    def fetch(index: int) -> None:
        query = queries[index]
        last_error: Exception | None = None
        for attempt in range(sut.max_retries + 1):
            if attempt:
                time.sleep(backoff_base_s * 2 ** (attempt - 1))
            try:
                response = client.post(sut.endpoint, json={"query": query.to_dict()})
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = RuntimeError(f"status {response.status_code}")
                continue
            if response.status_code >= 400:
                failures_list.append(
                    ReplayFailure(query.query_id, f"endpoint rejected request: {response.status_code}")
                )
                return
            try:
                body = response.json()
                ranked = sorted(body["results"], key=lambda r: r["position"])
                out[index] = RankedResults(
                    query=query,
                    results=tuple(
                        (
                            r["doc_id"],
                            Document(doc_id=r["doc_id"], fields={
                                k: tuple(v) for k, v in r.get("fields", {}).items()
                            }),
                        )
                        for r in ranked
                    ),
                    sut_id=sut.sut_id,
                    captured_at=clock(),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                failures_list.append(
                    ReplayFailure(query.query_id, f"unparseable endpoint response: {exc}")
                )
            return
        failures_list.append(
            ReplayFailure(query.query_id, f"unreachable after retries: {last_error}")
        )

    try:
        if parallelism <= 1 or len(queries) <= 1:
            for i in range(len(queries)):
                fetch(i)
        else:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=min(parallelism, sut.max_parallel)) as pool:
                list(pool.map(fetch, range(len(queries))))
    finally:
        client.close()
    return ReplayResult(
        results=tuple(r for r in out if r is not None),
        failures=tuple(sorted(failures_list, key=lambda f: f.query_id)),
    )


METRIC_NAMES = ("gr", "pmr", "ndcg")


@dataclass(frozen=True)
class MetricDelta:
    metric: str
    slice_name: str
    baseline: float | None
    candidate: float | None
    absolute: float | None
    relative: float | None  # None when the baseline is 0 or missing

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "slice": self.slice_name,
            "baseline": self.baseline,
            "candidate": self.candidate,
            "absolute": self.absolute,
            "relative": self.relative,
        }


@dataclass(frozen=True)
class ComparisonReport:
    baseline_policy_version: str
    k: int
    deltas: tuple[MetricDelta, ...]
    uncomparable_slices: tuple[str, ...] = ()

    def delta(self, metric: str, slice_name: str) -> MetricDelta:
        for d in self.deltas:
            if d.metric == metric and d.slice_name == slice_name:
                return d
        raise KeyError((metric, slice_name))

    def to_dict(self) -> dict:
        return {
            "policy_version": self.baseline_policy_version,
            "k": self.k,
            "deltas": [d.to_dict() for d in self.deltas],
            "uncomparable_slices": list(self.uncomparable_slices),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ComparisonReport":
        return cls(
            baseline_policy_version=data.get("policy_version", ""),
            k=int(data["k"]),
            deltas=tuple(
                MetricDelta(
                    metric=d["metric"],
                    slice_name=d["slice"],
                    baseline=d.get("baseline"),
                    candidate=d.get("candidate"),
                    absolute=d.get("absolute"),
                    relative=d.get("relative"),
                )
                for d in data.get("deltas", [])
            ),
            uncomparable_slices=tuple(data.get("uncomparable_slices", ())),
        )


def compare_candidates(
    baseline: EvalReport, candidate: EvalReport, allow_cross_version: bool = False
) -> ComparisonReport:
    """Per-slice absolute and relative metric deltas, candidate vs baseline.

    Both reports must share K, and must share a policy version unless the
    caller explicitly opts into a cross-version comparison.
    """
    if baseline.config.k != candidate.config.k:
        raise PolicyMismatchError(
            f"reports use different K: baseline {baseline.config.k}, "
            f"candidate {candidate.config.k}"
        )
    if baseline.policy_version != candidate.policy_version and not allow_cross_version:
        raise PolicyMismatchError(
            f"policy versions differ (baseline {baseline.policy_version!r}, candidate "
            f"{candidate.policy_version!r}); pass allow_cross_version to override"
        )
    shared = sorted(baseline.slices.keys() & candidate.slices.keys())
    uncomparable = sorted(baseline.slices.keys() ^ candidate.slices.keys())
    deltas: list[MetricDelta] = []
    for slice_name in shared:
        base_stats = baseline.slices[slice_name]
        cand_stats = candidate.slices[slice_name]
        for metric in METRIC_NAMES:
            base = getattr(base_stats, f"{metric}_mean")
            cand = getattr(cand_stats, f"{metric}_mean")
            absolute = relative = None
            if base is not None and cand is not None:
                absolute = cand - base
                relative = absolute / base if base != 0 else None
            deltas.append(MetricDelta(metric, slice_name, base, cand, absolute, relative))
    return ComparisonReport(
        baseline_policy_version=baseline.policy_version,
        k=baseline.config.k,
        deltas=tuple(deltas),
        uncomparable_slices=tuple(uncomparable),
    )


@dataclass(frozen=True)
class GateThresholds:
    """Relative degradation bounds, all expressed as positive fractions."""

    max_pmr_increase: float | None = None
    max_gr_decrease: float | None = None
    max_ndcg_decrease: float | None = None

    def bound(self, metric: str) -> float | None:
        return {
            "pmr": self.max_pmr_increase,
            "gr": self.max_gr_decrease,
            "ndcg": self.max_ndcg_decrease,
        }[metric]

    def to_dict(self) -> dict:
        return {
            "max_pmr_increase": self.max_pmr_increase,
            "max_gr_decrease": self.max_gr_decrease,
            "max_ndcg_decrease": self.max_ndcg_decrease,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "GateThresholds":
        return cls(
            max_pmr_increase=data.get("max_pmr_increase"),
            max_gr_decrease=data.get("max_gr_decrease"),
            max_ndcg_decrease=data.get("max_ndcg_decrease"),
        )


@dataclass(frozen=True)
class GateConfig:
    default: GateThresholds
    per_slice: Mapping[str, GateThresholds] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "per_slice", dict(self.per_slice))
        for thresholds in [self.default, *self.per_slice.values()]:
            for metric in METRIC_NAMES:
                bound = thresholds.bound(metric)
                if bound is not None and (not _finite(bound) or bound <= 0):
                    raise GateConfigError(
                        f"{metric} bound must be a positive finite fraction, got {bound!r}"
                    )

    def thresholds_for(self, slice_name: str) -> GateThresholds:
        return self.per_slice.get(slice_name, self.default)

    def to_dict(self) -> dict:
        return {
            "default": self.default.to_dict(),
            "per_slice": {name: t.to_dict() for name, t in self.per_slice.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "GateConfig":
        return cls(
            default=GateThresholds.from_dict(data.get("default", {})),
            per_slice={
                name: GateThresholds.from_dict(t)
                for name, t in data.get("per_slice", {}).items()
            },
        )


def _finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")


@dataclass(frozen=True)
class GateBreach:
    metric: str
    slice_name: str
    baseline: float | None
    candidate: float | None
    relative: float | None
    bound: float

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "slice": self.slice_name,
            "baseline": self.baseline,
            "candidate": self.candidate,
            "relative": self.relative,
            "bound": self.bound,
        }


@dataclass(frozen=True)
class GateVerdict:
    passed: bool
    breaches: tuple[GateBreach, ...]
    comparison: ComparisonReport

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "breaches": [b.to_dict() for b in self.breaches],
            "comparison": self.comparison.to_dict(),
        }


def gate(comparison: ComparisonReport, config: GateConfig) -> GateVerdict:
    """PASS/FAIL verdict: FAIL iff any slice breaches any configured bound.

    Polarity: PMR may not rise more than its bound; GR and NDCG may not fall
    more than theirs. Improvements never breach. A delta whose baseline is 0
    breaches an increase-bounded metric only when the candidate is positive.
    """
    breaches: list[GateBreach] = []
    for delta in comparison.deltas:
        bound = config.thresholds_for(delta.slice_name).bound(delta.metric)
        if bound is None:
            continue
        breached = False
        if delta.relative is not None:
            if delta.metric == "pmr":
                breached = delta.relative >= bound
            else:
                breached = delta.relative <= -bound
        elif (
            delta.metric == "pmr"
            and delta.baseline == 0
            and delta.candidate is not None
            and delta.candidate > 0
        ):
            # undefined relative increase from a zero baseline: conservative fail
            breached = True
        if breached:
            breaches.append(
                GateBreach(
                    metric=delta.metric,
                    slice_name=delta.slice_name,
                    baseline=delta.baseline,
                    candidate=delta.candidate,
                    relative=delta.relative,
                    bound=bound,
                )
            )
    return GateVerdict(passed=not breaches, breaches=tuple(breaches), comparison=comparison)


def read_traffic_log(path: str | Path) -> list[TrafficRecord]:
    return [TrafficRecord.from_dict(record) for record in read_jsonl(path)]
