import pytest

from sage.core import AggregationRule, AttributeRubric, Policy, RuleKind

GUIDANCE = {
    0: "contradicts the requested value",
    1: "mostly off, weak signal",
    2: "plausible but unconfirmed",
    3: "close or equivalent value",
    4: "explicitly matches the requested value",
}


def make_rubric(name, weight=1.0, critical=False):
    return AttributeRubric(
        name=name,
        description=f"How well the document's {name} satisfies the query's {name} intent.",
        grade_guidance=GUIDANCE,
        weight=weight,
        critical=critical,
    )


def make_policy(
    weights=None,
    critical=(),
    name="job_search",
    version="1.0",
    cap=1,
    changelog="initial version",
):
    weights = weights or {"Title": 3.0, "Location": 1.0}
    return Policy(
        name=name,
        policy_version=version,
        attributes=tuple(
            make_rubric(attr, weight=w, critical=attr in critical)
            for attr, w in weights.items()
        ),
        aggregation=(
            AggregationRule(RuleKind.CRITICAL_GATE, {"cap": cap}),
            AggregationRule(RuleKind.WEIGHTED_MEAN, {"rounding": "half_up"}),
            AggregationRule(RuleKind.CLAMP, {"lo": 0, "hi": 4}),
        ),
        changelog=changelog,
    )


@pytest.fixture
def policy():
    return make_policy()
