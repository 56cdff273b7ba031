"""Relevance governance and evaluation toolkit: versioned grading policies,
expert precedent, pluggable judges, ranking metrics, replay gating, and
regression monitoring."""

__version__ = "0.1.0"

from .core import (
    AggregationRule,
    AttributeRubric,
    AttributeScore,
    Band,
    Document,
    Judgment,
    Policy,
    Query,
    aggregate_attributes,
    classify_band,
    policy_diff,
    validate_policy,
)
from .metrics import (
    AgreementReport,
    EvalConfig,
    EvalReport,
    RankedList,
    aggregate_eval,
    f1_band,
    gr_at_k,
    ndcg_at_k,
    pmr_at_k,
    weighted_kappa,
)

__all__ = [
    "AggregationRule",
    "AgreementReport",
    "AttributeRubric",
    "AttributeScore",
    "Band",
    "Document",
    "EvalConfig",
    "EvalReport",
    "Judgment",
    "Policy",
    "Query",
    "RankedList",
    "aggregate_attributes",
    "aggregate_eval",
    "classify_band",
    "f1_band",
    "gr_at_k",
    "ndcg_at_k",
    "pmr_at_k",
    "policy_diff",
    "validate_policy",
    "weighted_kappa",
]
