"""Command-line interface.

Exit codes: 0 for success or PASS verdicts, 1 for FAIL verdicts (gate,
policy validate), 2 for operational errors.
"""

from __future__ import annotations

import json
import sys
from datetime import date as date_type
from pathlib import Path

import click

from .calibration import (
    ConsensusRule,
    PrecedentStore,
    calibration_report,
    interrater_report,
)
from .core import Judgment, load_policy, policy_diff, validate_policy
from .distill import (
    ExampleSource,
    ExportRecord,
    build_examples,
    cost_report,
    export_corpus,
    read_corpus,
    rebalance_classes,
)
from .errors import SageError
from .judge import annotate_batch, load_judge_spec, read_pairs_jsonl, write_judgments_jsonl
from .jsonl import read_jsonl, write_jsonl
from .metrics import EvalConfig, EvalReport
from .monitor import AlertLog, MetricPoint, TimeSeriesStore, detect_regression
from .pipeline import DailyConfig, evaluate_results, run_daily_pipeline
from .simulation import (
    GateConfig,
    SampleSet,
    StrataSpec,
    SystemUnderTest,
    compare_candidates,
    gate as run_gate,
    read_traffic_log,
    replay as run_replay,
    stratified_sample,
)

PASS_EXIT, FAIL_EXIT, ERROR_EXIT = 0, 1, 2


def _load_json(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _dump(data, path: str | None) -> None:
    text = json.dumps(data, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        click.echo(text)


@click.group()
@click.option("--data-dir", default="./sage-data", show_default=True, help="Store root.")
@click.option("--policy", "policy_file", default=None, help="Policy JSON file.")
@click.option("--judge", "judge_file", default=None, help="Judge spec JSON file.")
@click.option("--seed", default=None, type=int, help="Override seeds in specs.")
@click.option("--config", "config_file", default=None, help="Service/daily config JSON.")
@click.pass_context
def cli(ctx, data_dir, policy_file, judge_file, seed, config_file):
    """Relevance governance and evaluation toolkit."""
    ctx.ensure_object(dict)
    ctx.obj.update(
        data_dir=data_dir,
        policy_file=policy_file,
        judge_file=judge_file,
        seed=seed,
        config_file=config_file,
    )


def _require(ctx, key: str, flag: str) -> str:
    value = ctx.obj.get(key)
    if not value:
        raise SageError(f"this command requires {flag}")
    return value


# -- policy --------------------------------------------------------------------


@cli.group()
def policy():
    """Validate and diff policy files."""


@policy.command("validate")
@click.argument("policy_path", required=False)
@click.pass_context
def policy_validate(ctx, policy_path):
    path = policy_path or _require(ctx, "policy_file", "--policy")
    violations = validate_policy(load_policy(path))
    if violations:
        for violation in violations:
            click.echo(f"violation: {violation}")
        sys.exit(FAIL_EXIT)
    click.echo("ok")


@policy.command("diff")
@click.argument("old_path")
@click.argument("new_path")
@click.option("--out", default=None)
def policy_diff_cmd(old_path, new_path, out):
    changes = policy_diff(load_policy(old_path), load_policy(new_path))
    _dump([c.to_dict() for c in changes], out)


# -- precedent -------------------------------------------------------------------


@cli.group()
def precedent():
    """Manage the expert precedent store."""


@precedent.command("import")
@click.argument("records_path")
@click.option("--policy-name", required=True)
@click.option("--policy-version", required=True)
@click.option(
    "--consensus-rule",
    type=click.Choice([r.value for r in ConsensusRule]),
    default=ConsensusRule.MAJORITY.value,
    show_default=True,
)
@click.pass_context
def precedent_import(ctx, records_path, policy_name, policy_version, consensus_rule):
    store = PrecedentStore(
        ctx.obj["data_dir"], policy_name, consensus_rule=ConsensusRule(consensus_rule)
    )
    with open(records_path, encoding="utf-8") as fh:
        summary = store.import_cases(fh, policy_version=policy_version)
    store.close()
    _dump(summary.to_dict(), None)
    if summary.rejected and not summary.accepted:
        sys.exit(ERROR_EXIT)


# -- judge -----------------------------------------------------------------------


@cli.group()
def judge():
    """Run judges over query/document pairs."""


@judge.command("run")
@click.option("--pairs", "pairs_path", required=True, help="JSONL of {query, document}.")
@click.option("--out", "out_path", required=True, help="Output judgments JSONL.")
@click.option("--parallelism", default=4, show_default=True)
@click.pass_context
def judge_run(ctx, pairs_path, out_path, parallelism):
    policy = load_policy(_require(ctx, "policy_file", "--policy"))
    spec = load_judge_spec(_require(ctx, "judge_file", "--judge"))
    pairs = read_pairs_jsonl(pairs_path)
    result = annotate_batch(spec, policy, pairs, parallelism=parallelism)
    write_judgments_jsonl(out_path, result.judgments)
    click.echo(
        json.dumps(
            {
                "judged": len(result.judgments),
                "failed": len(result.failures),
                "failures": [f.to_dict() for f in result.failures],
            },
            indent=2,
        )
    )
    if result.failures and not result.judgments:
        sys.exit(ERROR_EXIT)


# -- calibration --------------------------------------------------------------------


def _read_judgments(path: str) -> list[Judgment]:
    return [Judgment.from_dict(r) for r in read_jsonl(path)]


@cli.group()
def calibrate():
    """Judge-vs-precedent and annotator agreement reports."""


@calibrate.command("report")
@click.option("--judgments", "judgments_path", required=True)
@click.option("--policy-name", required=True)
@click.option("--policy-version", required=True)
@click.option("--judge-id", default=None)
@click.option("--out", default=None)
@click.pass_context
def calibrate_report(ctx, judgments_path, policy_name, policy_version, judge_id, out):
    store = PrecedentStore(ctx.obj["data_dir"], policy_name)
    report = calibration_report(
        store, _read_judgments(judgments_path), policy_version, judge_id=judge_id
    )
    store.close()
    _dump(report.to_dict(), out)


@calibrate.command("interrater")
@click.option("--policy-name", required=True)
@click.option("--floor", default=0.5, show_default=True)
@click.option("--out", default=None)
@click.pass_context
def calibrate_interrater(ctx, policy_name, floor, out):
    store = PrecedentStore(ctx.obj["data_dir"], policy_name)
    report = interrater_report(store, agreement_floor=floor)
    store.close()
    _dump(report.to_dict(), out)


# -- disagreements ---------------------------------------------------------------------


@cli.group()
def disagreements():
    """Detect and resolve judge-vs-precedent disagreements."""


@disagreements.command("detect")
@click.option("--judgments", "judgments_path", required=True)
@click.option("--policy-name", required=True)
@click.option("--threshold", default=1, show_default=True)
@click.pass_context
def disagreements_detect(ctx, judgments_path, policy_name, threshold):
    store = PrecedentStore(ctx.obj["data_dir"], policy_name)
    summary = store.detect_disagreements(_read_judgments(judgments_path), threshold=threshold)
    store.close()
    _dump(summary.to_dict(), None)


@disagreements.command("resolve")
@click.argument("disagreement_id")
@click.option("--policy-name", required=True)
@click.option("--vector", required=True)
@click.option("--actor", default="cli")
@click.option("--note", default="")
@click.option("--new-grade", type=int, default=None)
@click.pass_context
def disagreements_resolve(ctx, disagreement_id, policy_name, vector, actor, note, new_grade):
    store = PrecedentStore(ctx.obj["data_dir"], policy_name)
    resolution = store.resolve_disagreement(
        disagreement_id, vector, actor=actor, note=note, new_grade=new_grade
    )
    store.close()
    _dump(resolution.to_dict(), None)


@disagreements.command("export")
@click.option("--policy-name", required=True)
@click.option("--out", "out_path", required=True, help="Resolutions JSONL audit log.")
@click.pass_context
def disagreements_export(ctx, policy_name, out_path):
    store = PrecedentStore(ctx.obj["data_dir"], policy_name)
    resolutions = sorted(store.resolutions.values(), key=lambda r: r.resolution_id)
    count = write_jsonl(out_path, (r.to_dict() for r in resolutions))
    store.close()
    _dump({"exported": count}, None)


# -- simulation -----------------------------------------------------------------------


@cli.command("sample")
@click.option("--log", "log_path", required=True, help="Traffic log JSONL.")
@click.option("--spec", "spec_path", required=True, help="StrataSpec JSON.")
@click.option("--out", "out_path", required=True)
@click.pass_context
def sample_cmd(ctx, log_path, spec_path, out_path):
    spec_data = _load_json(spec_path)
    if ctx.obj.get("seed") is not None:
        spec_data["seed"] = ctx.obj["seed"]
    spec = StrataSpec.from_dict(spec_data)
    sample = stratified_sample(read_traffic_log(log_path), spec)
    sample.to_jsonl(out_path)
    _dump({"counts": sample.counts(), "shortfalls": dict(sample.shortfalls)}, None)


@cli.command("replay")
@click.option("--sut", "sut_path", required=True, help="SystemUnderTest JSON.")
@click.option("--sample", "sample_path", required=True, help="SampleSet JSONL.")
@click.option("--out", "out_path", required=True)
@click.option("--parallelism", default=4, show_default=True)
def replay_cmd(sut_path, sample_path, out_path, parallelism):
    sut = SystemUnderTest.from_dict(_load_json(sut_path))
    sample = SampleSet.from_jsonl(sample_path)
    result = run_replay(sut, sample, parallelism=parallelism)
    result.to_jsonl(out_path)
    _dump({"replayed": len(result.results), "failures": [f.to_dict() for f in result.failures]}, None)


@cli.command("eval")
@click.option("--replay", "replay_path", required=True, help="Replay results JSONL.")
@click.option("--k", default=10, show_default=True)
@click.option("--slice-dims", default="channel", show_default=True, help="Comma-separated.")
@click.option("--parallelism", default=4, show_default=True)
@click.option("--out", "out_path", default=None)
@click.pass_context
def eval_cmd(ctx, replay_path, k, slice_dims, parallelism, out_path):
    from .simulation import RankedResults

    policy = load_policy(_require(ctx, "policy_file", "--policy"))
    spec = load_judge_spec(_require(ctx, "judge_file", "--judge"))
    result_sets = [RankedResults.from_dict(r) for r in read_jsonl(replay_path)]
    report = evaluate_results(
        spec,
        policy,
        result_sets,
        EvalConfig(k=k),
        slice_dimensions=[d for d in slice_dims.split(",") if d],
        parallelism=parallelism,
    )
    _dump(report.to_dict(), out_path)


@cli.command("compare")
@click.option("--baseline", "baseline_path", required=True)
@click.option("--candidate", "candidate_path", required=True)
@click.option("--allow-cross-version", is_flag=True, default=False)
@click.option("--out", "out_path", default=None)
def compare_cmd(baseline_path, candidate_path, allow_cross_version, out_path):
    baseline = EvalReport.from_dict(_load_json(baseline_path))
    candidate = EvalReport.from_dict(_load_json(candidate_path))
    comparison = compare_candidates(baseline, candidate, allow_cross_version)
    _dump(comparison.to_dict(), out_path)


@cli.command("gate")
@click.option("--comparison", "comparison_path", required=True)
@click.option("--gate-config", "gate_config_path", required=True)
@click.option("--out", "out_path", default=None)
def gate_cmd(comparison_path, gate_config_path, out_path):
    from .simulation import ComparisonReport

    comparison = ComparisonReport.from_dict(_load_json(comparison_path))
    config = GateConfig.from_dict(_load_json(gate_config_path))
    verdict = run_gate(comparison, config)
    _dump(verdict.to_dict(), out_path)
    sys.exit(PASS_EXIT if verdict.passed else FAIL_EXIT)


# -- monitor -----------------------------------------------------------------------------


@cli.group()
def monitor():
    """Record metric points and detect regressions."""


@monitor.command("record")
@click.option("--points", "points_path", required=True, help="MetricPoint JSONL.")
@click.pass_context
def monitor_record(ctx, points_path):
    store = TimeSeriesStore(ctx.obj["data_dir"])
    points = [MetricPoint.from_dict(r) for r in read_jsonl(points_path)]
    recorded = store.record_points(points)
    store.close()
    _dump({"recorded": recorded, "received": len(points)}, None)


@monitor.command("detect")
@click.option("--metric", required=True, type=click.Choice(["gr", "pmr", "ndcg"]))
@click.option("--k", default=10, show_default=True)
@click.option("--slice", "slice_name", default="ALL", show_default=True)
@click.option("--as-of", required=True, help="ISO date; windows end the day before.")
@click.option("--window-days", default=7, show_default=True)
@click.option("--threshold", default=None, type=float)
@click.option("--record-alerts", is_flag=True, default=False)
@click.pass_context
def monitor_detect(ctx, metric, k, slice_name, as_of, window_days, threshold, record_alerts):
    store = TimeSeriesStore(ctx.obj["data_dir"])
    result = detect_regression(
        store,
        metric,
        k,
        slice_name,
        as_of=date_type.fromisoformat(as_of),
        window_days=window_days,
        threshold=threshold,
    )
    store.close()
    if record_alerts and result.alerts:
        alert_log = AlertLog(ctx.obj["data_dir"])
        for alert in result.alerts:
            alert_log.record(alert)
        alert_log.close()
    _dump(
        {
            "alerts": [a.to_dict() for a in result.alerts],
            "notices": [n.to_dict() for n in result.notices],
        },
        None,
    )


# -- distill -------------------------------------------------------------------------------


@cli.group()
def distill():
    """Build training corpora and cost reports."""


@distill.command("rebalance")
@click.option("--corpus", "corpus_path", required=True)
@click.option("--out", "out_path", required=True)
@click.option("--total", required=True, type=int)
@click.option(
    "--target",
    "target_json",
    default=None,
    help='Per-class fractions as JSON, e.g. \'{"0":0.25,"1":0.25,"3":0.25,"4":0.25}\'; '
    "omitted classes get none. Default: uniform over all five classes.",
)
@click.pass_context
def distill_rebalance(ctx, corpus_path, out_path, total, target_json):
    from .distill import corpus_stats

    seed = ctx.obj.get("seed") or 0
    target = None
    if target_json:
        target = {int(cls): float(frac) for cls, frac in json.loads(target_json).items()}
    examples = read_corpus(corpus_path)
    rebalanced = rebalance_classes(
        examples, total_target=total, seed=seed, target_fractions=target
    )
    stats = export_corpus(rebalanced, out_path)
    _dump({"input": corpus_stats(examples).to_dict(), "output": stats.to_dict()}, None)


@distill.command("export")
@click.option("--pairs", "pairs_path", required=True, help="JSONL of {query, document}.")
@click.option("--judgments", "judgments_path", required=True)
@click.option("--template", "template_id", default="rubric_v1", show_default=True)
@click.option("--source", default="traffic", type=click.Choice([s.value for s in ExampleSource]))
@click.option("--out", "out_path", required=True)
@click.pass_context
def distill_export(ctx, pairs_path, judgments_path, template_id, source, out_path):
    policy = load_policy(_require(ctx, "policy_file", "--policy"))
    pairs = {(q.query_id, d.doc_id): (q, d) for q, d in read_pairs_jsonl(pairs_path)}
    records = []
    for judgment in _read_judgments(judgments_path):
        pair = pairs.get((judgment.query_id, judgment.doc_id))
        if pair is None:
            raise SageError(
                f"judgment ({judgment.query_id}, {judgment.doc_id}) has no pair in {pairs_path}"
            )
        query, document = pair
        records.append(
            ExportRecord(
                query=query,
                document=document,
                judgment=judgment,
                source=ExampleSource(source),
                strata=(f"channel={query.channel.value}",),
            )
        )
    examples = build_examples(records, {policy.policy_version: policy}, template_id)
    stats = export_corpus(examples, out_path)
    _dump(stats.to_dict(), None)


@distill.command("cost")
@click.option("--counts", "counts_path", required=True, help="JSON {tier: count}.")
@click.option("--unit-costs", "unit_costs_path", required=True, help="JSON {tier: cost}.")
@click.option("--text", "as_text", is_flag=True, default=False)
def distill_cost(counts_path, unit_costs_path, as_text):
    report = cost_report(_load_json(counts_path), _load_json(unit_costs_path))
    if as_text:
        click.echo(report.render_text())
    else:
        _dump(report.to_dict(), None)


# -- daily + serve ---------------------------------------------------------------------------


@cli.group()
def daily():
    """The recurring oversight pipeline."""


@daily.command("run")
@click.option("--date", "day", default=None, help="ISO date; defaults to today.")
@click.pass_context
def daily_run(ctx, day):
    config = DailyConfig.from_file(_require(ctx, "config_file", "--config"))
    run_day = date_type.fromisoformat(day) if day else date_type.today()
    result = run_daily_pipeline(config, ctx.obj["data_dir"], run_day)
    _dump(result.to_dict(), None)


@cli.command("serve")
@click.option("--listen", default=None, help="host:port (overrides config).")
@click.pass_context
def serve_cmd(ctx, listen):
    from .service import ServiceConfig, serve

    if ctx.obj.get("config_file"):
        config = ServiceConfig.from_file(ctx.obj["config_file"])
        if ctx.obj["data_dir"] != "./sage-data":
            config = ServiceConfig.from_dict({**_load_json(ctx.obj["config_file"]), "data_dir": ctx.obj["data_dir"]})
    else:
        config = ServiceConfig(data_dir=ctx.obj["data_dir"])
    if listen:
        config = ServiceConfig(
            data_dir=config.data_dir,
            listen=listen,
            cors_allow_origins=config.cors_allow_origins,
            daily_config_file=config.daily_config_file,
            daily_schedule=config.daily_schedule,
            workbench_dir=config.workbench_dir,
        )
    serve(config)


def main() -> None:
    try:
        cli(standalone_mode=False)
    except SystemExit:
        raise
    except click.ClickException as exc:
        exc.show()
        sys.exit(ERROR_EXIT)
    except click.Abort:
        sys.exit(ERROR_EXIT)
    except SageError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(ERROR_EXIT)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(ERROR_EXIT)


if __name__ == "__main__":
    main()
