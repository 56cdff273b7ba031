"""Graded-relevance ranking metrics (GR@K, PMR@K, NDCG@K), agreement metrics
(weighted Cohen's kappa, banded F1), and per-slice report aggregation.

A metric that has no defined value for a list (no good documents retrieved,
empty list, all-zero gains) returns None rather than raising; report
aggregation excludes undefined values and counts them separately.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .core import GOOD_THRESHOLD, GRADES, POOR_THRESHOLD, Band, classify_band, validate_grade
from .errors import DegenerateMarginalsError, LengthMismatchError, PolicyMismatchError

N_CLASSES = len(GRADES)

ALL_SLICE = "ALL"


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    good_threshold: int = GOOD_THRESHOLD
    poor_threshold: int = POOR_THRESHOLD

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.poor_threshold < self.good_threshold:
            raise ValueError("poor_threshold must be below good_threshold")


@dataclass(frozen=True)
class RankedList:
    """Graded results for one query in served rank order (rank 1 first)."""

    query_id: str
    entries: tuple[tuple[str, int], ...]
    slice_tags: Mapping[str, str] = field(default_factory=dict)
    policy_version: str | None = None

    def __post_init__(self):
        entries = tuple((doc_id, validate_grade(grade)) for doc_id, grade in self.entries)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "slice_tags", dict(self.slice_tags))
        doc_ids = [doc_id for doc_id, _ in entries]
        if len(set(doc_ids)) != len(doc_ids):
            raise ValueError(f"duplicate doc_ids in ranked list for query {self.query_id}")

    @property
    def grades(self) -> tuple[int, ...]:
        return tuple(grade for _, grade in self.entries)

    def to_dict(self) -> dict:
        out = {
            "query_id": self.query_id,
            "entries": [[doc_id, grade] for doc_id, grade in self.entries],
            "slice_tags": dict(self.slice_tags),
        }
        if self.policy_version is not None:
            out["policy_version"] = self.policy_version
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "RankedList":
        return cls(
            query_id=data["query_id"],
            entries=tuple((e[0], int(e[1])) for e in data["entries"]),
            slice_tags=data.get("slice_tags", {}),
            policy_version=data.get("policy_version"),
        )


def gr_at_k(ranked: RankedList, config: EvalConfig) -> float | None:
    """Good recall at K: good documents in the top min(K, N) positions over
    min(K, G), where G counts good documents anywhere in the list.

    Returns None when the list retrieved no good documents (G = 0).
    """
    grades = ranked.grades
    good = config.good_threshold
    g_total = sum(1 for s in grades if s >= good)
    if g_total == 0:
        return None
    cutoff = min(config.k, len(grades))
    hits = sum(1 for s in grades[:cutoff] if s >= good)
    return hits / min(config.k, g_total)


def pmr_at_k(ranked: RankedList, config: EvalConfig) -> float | None:
    """Poor match rate at K: fraction of the top min(K, N) positions holding
    poor documents. Returns None for an empty list."""
    grades = ranked.grades
    if not grades:
        return None
    cutoff = min(config.k, len(grades))
    poor = sum(1 for s in grades[:cutoff] if s <= config.poor_threshold)
    return poor / cutoff


def _dcg(grades: Sequence[int], cutoff: int) -> float:
    return sum(
        (2**s - 1) / math.log2(i + 1) for i, s in enumerate(grades[:cutoff], start=1)
    )


def ndcg_at_k(ranked: RankedList, config: EvalConfig) -> float | None:
    """NDCG at K with gain 2^s - 1 and discount log2(rank + 1), normalized by
    the ideal reordering of the same retrieved grades.

    Returns None when the ideal DCG is zero (empty list or all grades 0).
    """
    grades = ranked.grades
    cutoff = min(config.k, len(grades))
    ideal = _dcg(sorted(grades, reverse=True), cutoff)
    if ideal == 0.0:
        return None
    return _dcg(grades, cutoff) / ideal


class KappaWeighting(str, Enum):
    LINEAR = "linear"
    QUADRATIC = "quadratic"


def _kappa_weight(i: int, j: int, weighting: KappaWeighting) -> Fraction:
    span = N_CLASSES - 1
    if weighting is KappaWeighting.LINEAR:
        return 1 - Fraction(abs(i - j), span)
    return 1 - Fraction((i - j) ** 2, span**2)


def weighted_kappa(
    labels_a: Sequence[int],
    labels_b: Sequence[int],
    weighting: KappaWeighting | str = KappaWeighting.LINEAR,
) -> float:
    """Weighted Cohen's kappa over the fixed 5-class grade scale.

    Agreement weights are w_ij = 1 - |i-j|/4 (linear) or 1 - (i-j)^2/16
    (quadratic); kappa = (p_o - p_e) / (1 - p_e) with observed and expected
    weighted agreement computed exactly over rationals.

    Constant, identical label sequences return 1.0; other degenerate
    marginals (expected agreement of 1 without perfect agreement) raise
    DegenerateMarginalsError.
    """
    weighting = KappaWeighting(weighting)
    if len(labels_a) != len(labels_b):
        raise LengthMismatchError(
            f"label sequences differ in length: {len(labels_a)} vs {len(labels_b)}"
        )
    if not labels_a:
        raise LengthMismatchError("label sequences are empty")
    n = len(labels_a)
    counts = [[0] * N_CLASSES for _ in range(N_CLASSES)]
    for a, b in zip(labels_a, labels_b):
        counts[validate_grade(a)][validate_grade(b)] += 1

    marg_a = [sum(counts[i][j] for j in range(N_CLASSES)) for i in range(N_CLASSES)]
    marg_b = [sum(counts[i][j] for i in range(N_CLASSES)) for j in range(N_CLASSES)]

    p_o = Fraction(0)
    p_e = Fraction(0)
    for i in range(N_CLASSES):
        for j in range(N_CLASSES):
            w = _kappa_weight(i, j, weighting)
            p_o += w * Fraction(counts[i][j], n)
            p_e += w * Fraction(marg_a[i] * marg_b[j], n * n)

    if 1 - p_e < Fraction(1, 10**12):
        if p_o == 1:
            return 1.0
        raise DegenerateMarginalsError(
            "kappa undefined: expected agreement is 1 but observed agreement is not"
        )
    return float((p_o - p_e) / (1 - p_e))


def confusion_matrix(labels_a: Sequence[int], labels_b: Sequence[int]) -> list[list[int]]:
    """5x5 count matrix; rows index labels_a, columns labels_b."""
    if len(labels_a) != len(labels_b):
        raise LengthMismatchError(
            f"label sequences differ in length: {len(labels_a)} vs {len(labels_b)}"
        )
    counts = [[0] * N_CLASSES for _ in range(N_CLASSES)]
    for a, b in zip(labels_a, labels_b):
        counts[validate_grade(a)][validate_grade(b)] += 1
    return counts


@dataclass(frozen=True)
class F1Result:
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def f1_band(predicted: Sequence[int], truth: Sequence[int], band: Band | str) -> F1Result:
    """Precision/recall/F1 after binarizing both sequences by band membership.

    Positive = grade in the requested band; empty precision or recall
    denominators contribute 0, and F1 is 0 when precision + recall = 0.
    """
    band = Band(band)
    if len(predicted) != len(truth):
        raise LengthMismatchError(
            f"label sequences differ in length: {len(predicted)} vs {len(truth)}"
        )
    tp = fp = fn = 0
    for p, t in zip(predicted, truth):
        p_in = classify_band(p) is band
        t_in = classify_band(t) is band
        if p_in and t_in:
            tp += 1
        elif p_in:
            fp += 1
        elif t_in:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return F1Result(precision, recall, f1)


@dataclass(frozen=True)
class AgreementReport:
    """Judge-vs-reference agreement: kappas, banded F1, and the confusion
    matrix. A kappa is None when its computation was degenerate; flags carry
    the diagnosis (e.g. judge_collapse)."""

    linear_kappa: float | None
    quadratic_kappa: float | None
    f1_good: float
    f1_poor: float
    confusion: tuple[tuple[int, ...], ...]
    n_items: int
    policy_version: str = ""
    judge_id: str = ""
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "linear_kappa": self.linear_kappa,
            "quadratic_kappa": self.quadratic_kappa,
            "f1_good": self.f1_good,
            "f1_poor": self.f1_poor,
            "confusion": [list(row) for row in self.confusion],
            "n_items": self.n_items,
            "policy_version": self.policy_version,
            "judge_id": self.judge_id,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AgreementReport":
        return cls(
            linear_kappa=data.get("linear_kappa"),
            quadratic_kappa=data.get("quadratic_kappa"),
            f1_good=data["f1_good"],
            f1_poor=data["f1_poor"],
            confusion=tuple(tuple(row) for row in data["confusion"]),
            n_items=data["n_items"],
            policy_version=data.get("policy_version", ""),
            judge_id=data.get("judge_id", ""),
            flags=tuple(data.get("flags", ())),
        )


def agreement_report(
    predicted: Sequence[int],
    truth: Sequence[int],
    policy_version: str = "",
    judge_id: str = "",
) -> AgreementReport:
    """Full agreement report for predicted grades against reference grades."""
    if not predicted:
        raise LengthMismatchError("cannot build an agreement report from zero items")
    flags: list[str] = []
    if len(set(predicted)) == 1:
        flags.append("judge_collapse")
    kappas: dict[KappaWeighting, float | None] = {}
    for weighting in KappaWeighting:
        try:
            kappas[weighting] = weighted_kappa(predicted, truth, weighting)
        except DegenerateMarginalsError:
            kappas[weighting] = None
            if "degenerate_marginals" not in flags:
                flags.append("degenerate_marginals")
    return AgreementReport(
        linear_kappa=kappas[KappaWeighting.LINEAR],
        quadratic_kappa=kappas[KappaWeighting.QUADRATIC],
        f1_good=f1_band(predicted, truth, Band.GOOD).f1,
        f1_poor=f1_band(predicted, truth, Band.POOR).f1,
        confusion=tuple(tuple(row) for row in confusion_matrix(predicted, truth)),
        n_items=len(predicted),
        policy_version=policy_version,
        judge_id=judge_id,
        flags=tuple(flags),
    )


@dataclass(frozen=True)
class SliceStats:
    gr_mean: float | None
    pmr_mean: float | None
    ndcg_mean: float | None
    n_queries: int
    n_gr_undefined: int
    n_ndcg_undefined: int

    def to_dict(self) -> dict:
        return {
            "gr_mean": _round6(self.gr_mean),
            "pmr_mean": _round6(self.pmr_mean),
            "ndcg_mean": _round6(self.ndcg_mean),
            "n_queries": self.n_queries,
            "n_gr_undefined": self.n_gr_undefined,
            "n_ndcg_undefined": self.n_ndcg_undefined,
        }


@dataclass(frozen=True)
class EvalReport:
    policy_version: str
    config: EvalConfig
    slices: Mapping[str, SliceStats]

    def to_dict(self) -> dict:
        return {
            "policy_version": self.policy_version,
            "k": self.config.k,
            "slices": {name: stats.to_dict() for name, stats in sorted(self.slices.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalReport":
        slices = {
            name: SliceStats(
                gr_mean=s.get("gr_mean"),
                pmr_mean=s.get("pmr_mean"),
                ndcg_mean=s.get("ndcg_mean"),
                n_queries=s["n_queries"],
                n_gr_undefined=s.get("n_gr_undefined", 0),
                n_ndcg_undefined=s.get("n_ndcg_undefined", 0),
            )
            for name, s in data["slices"].items()
        }
        return cls(
            policy_version=data["policy_version"],
            config=EvalConfig(k=data["k"]),
            slices=slices,
        )


def _round6(value: float | None) -> float | None:
    return None if value is None else round(value, 6)


def slice_key(tags: Mapping[str, str], dimensions: Sequence[str]) -> str | None:
    """Slice key for a list under the requested dimensions: sorted
    "dimension=value" parts joined with ";". None when no dimension applies."""
    parts = sorted(f"{dim}={tags[dim]}" for dim in dimensions if dim in tags)
    return ";".join(parts) if parts else None


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def aggregate_eval(
    lists: Iterable[RankedList],
    config: EvalConfig,
    slice_dimensions: Sequence[str] = (),
    policy_version: str | None = None,
) -> EvalReport:
    """Per-slice means of the per-query metrics, excluding undefined values.

    Every report carries exactly one policy version: mixing lists graded
    under different versions is an error. The reduction is ordered by
    query_id, so results are independent of input ordering or any parallel
    fan-out used to produce the lists.
    """
    ordered = sorted(lists, key=lambda rl: rl.query_id)
    versions = {rl.policy_version for rl in ordered if rl.policy_version is not None}
    if policy_version is not None:
        versions.add(policy_version)
    if len(versions) > 1:
        raise PolicyMismatchError(
            f"lists graded under mixed policy versions {sorted(versions)}; "
            "one report covers exactly one version"
        )
    version = versions.pop() if versions else ""

    groups: dict[str, list[RankedList]] = {ALL_SLICE: list(ordered)}
    for ranked in ordered:
        key = slice_key(ranked.slice_tags, slice_dimensions)
        if key is not None:
            groups.setdefault(key, []).append(ranked)

    slices: dict[str, SliceStats] = {}
    for name, members in groups.items():
        gr_vals: list[float] = []
        pmr_vals: list[float] = []
        ndcg_vals: list[float] = []
        n_gr_undef = n_ndcg_undef = 0
        for ranked in members:
            gr = gr_at_k(ranked, config)
            if gr is None:
                n_gr_undef += 1
            else:
                gr_vals.append(gr)
            pmr = pmr_at_k(ranked, config)
            if pmr is not None:
                pmr_vals.append(pmr)
            ndcg = ndcg_at_k(ranked, config)
            if ndcg is None:
                n_ndcg_undef += 1
            else:
                ndcg_vals.append(ndcg)
        slices[name] = SliceStats(
            gr_mean=_mean(gr_vals),
            pmr_mean=_mean(pmr_vals),
            ndcg_mean=_mean(ndcg_vals),
            n_queries=len(members),
            n_gr_undefined=n_gr_undef,
            n_ndcg_undefined=n_ndcg_undef,
        )
    return EvalReport(policy_version=version, config=config, slices=slices)
