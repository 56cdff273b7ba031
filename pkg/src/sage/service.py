"""HTTP service exposing the stores and reports under /api/v1.

Every mutation funnels through the single-writer stores; the endpoints add
no business logic of their own. State is append-only logs under the data
directory, so a killed and restarted service replays to the same state.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from datetime import date as date_type
from datetime import datetime, timezone
from io import StringIO
from pathlib import Path
from typing import Mapping

from fastapi import Body, Depends, FastAPI, Header, HTTPException, Query as QueryParam
from fastapi.middleware.cors import CORSMiddleware
from fastapi.staticfiles import StaticFiles

from . import __version__
from .calibration import (
    ConsensusRule,
    DisagreementStatus,
    PrecedentStore,
    calibration_report,
    interrater_report,
)
from .core import Judgment, Policy, policy_diff, validate_policy
from .errors import ConflictError, SageError
from .metrics import AgreementReport
from .monitor import AlertLog, MetricPoint, TimeSeriesStore, detect_regression
from .pipeline import DailyConfig, run_daily_pipeline
from .stores import JudgmentLog, PolicyStore, ReportLog

API_TOKEN_ENV_VAR = "SAGE_API_TOKEN"


@dataclass(frozen=True)
class ServiceConfig:
    data_dir: str
    listen: str = "127.0.0.1:8800"
    cors_allow_origins: tuple[str, ...] = ()
    daily_config_file: str | None = None
    daily_schedule: str = ""  # informational; runs are triggered via the API
    workbench_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "cors_allow_origins", tuple(self.cors_allow_origins))

    @classmethod
    def from_dict(cls, data: Mapping) -> "ServiceConfig":
        return cls(
            data_dir=data["data_dir"],
            listen=data.get("listen", "127.0.0.1:8800"),
            cors_allow_origins=tuple(data.get("cors_allow_origins", ())),
            daily_config_file=data.get("daily_config_file"),
            daily_schedule=data.get("daily_schedule", ""),
            workbench_dir=data.get("workbench_dir"),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ServiceConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class AppState:
    """Long-lived store handles, one per resource, lazily opened."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.data_dir = Path(config.data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        probe = self.data_dir / ".writable"
        try:
            probe.write_text("ok", encoding="utf-8")
            probe.unlink()
        except OSError as exc:
            raise SageError(f"data directory {self.data_dir} is not writable: {exc}") from exc
        self.policies = PolicyStore(self.data_dir)
        self.timeseries = TimeSeriesStore(self.data_dir)
        self.alerts = AlertLog(self.data_dir)
        self._lock = threading.Lock()
        self._precedent: dict[str, PrecedentStore] = {}
        self._judgments: dict[str, JudgmentLog] = {}
        self._reports: dict[str, ReportLog] = {}
        self.jobs: dict[str, dict] = {}

    def precedent(self, policy_name: str, consensus_rule: str | None = None) -> PrecedentStore:
        with self._lock:
            if policy_name not in self._precedent:
                rule = ConsensusRule(consensus_rule) if consensus_rule else ConsensusRule.MAJORITY
                self._precedent[policy_name] = PrecedentStore(
                    self.data_dir, policy_name, consensus_rule=rule
                )
            return self._precedent[policy_name]

    def judgments(self, policy_name: str) -> JudgmentLog:
        with self._lock:
            if policy_name not in self._judgments:
                self._judgments[policy_name] = JudgmentLog(self.data_dir, policy_name)
            return self._judgments[policy_name]

    def reports(self, policy_name: str) -> ReportLog:
        with self._lock:
            if policy_name not in self._reports:
                self._reports[policy_name] = ReportLog(self.data_dir, policy_name)
            return self._reports[policy_name]


def create_app(config: ServiceConfig) -> FastAPI:
    state = AppState(config)
    app = FastAPI(title="sage", version=__version__)
    app.state.sage = state

    if config.cors_allow_origins:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=list(config.cors_allow_origins),
            allow_methods=["*"],
            allow_headers=["*"],
        )

    def require_auth(authorization: str | None = Header(default=None)) -> None:
        token = os.environ.get(API_TOKEN_ENV_VAR)
        if not token:
            return
        if authorization != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    api = Depends(require_auth)

    @app.exception_handler(ConflictError)
    def conflict_handler(request, exc):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(SageError)
    def sage_error_handler(request, exc):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=400, content={"detail": str(exc)})

    # -- health ---------------------------------------------------------------

    @app.get("/api/v1/health", dependencies=[api])
    def health():
        return {"status": "ok", "version": __version__}

    # -- policies ---------------------------------------------------------------

    @app.get("/api/v1/policies", dependencies=[api])
    def list_policies():
        return [
            {"name": name, "versions": state.policies.versions(name)}
            for name in state.policies.names()
        ]

    @app.post("/api/v1/policies", dependencies=[api], status_code=201)
    def register_policy(body: dict = Body(...)):
        policy = Policy.from_dict(body)
        violations = validate_policy(policy)
        if violations:
            raise HTTPException(status_code=400, detail={"violations": violations})
        state.policies.register(policy)
        return {
            "name": policy.name,
            "version": policy.policy_version,
            "content_hash": policy.content_hash,
        }

    @app.get("/api/v1/policies/{name}", dependencies=[api])
    def get_policy(name: str):
        versions = state.policies.versions(name)
        if not versions:
            raise HTTPException(status_code=404, detail=f"unknown policy {name!r}")
        return {"name": name, "versions": versions, "latest": versions[-1]}

    @app.get("/api/v1/policies/{name}/diff", dependencies=[api])
    def diff_policy(name: str, old: str, new: str):
        changes = policy_diff(state.policies.get(name, old), state.policies.get(name, new))
        return {"name": name, "old": old, "new": new, "changes": [c.to_dict() for c in changes]}

    @app.get("/api/v1/policies/{name}/{version}", dependencies=[api])
    def get_policy_version(name: str, version: str):
        return state.policies.get(name, version).to_dict()

    # -- precedent ---------------------------------------------------------------

    @app.post("/api/v1/precedents/import", dependencies=[api])
    def import_precedent(
        policy_name: str,
        policy_version: str,
        body: dict = Body(...),
    ):
        records = body.get("records", [])
        stream = StringIO("\n".join(json.dumps(r) for r in records))
        summary = state.precedent(policy_name).import_cases(stream, policy_version)
        return summary.to_dict()

    @app.get("/api/v1/precedents", dependencies=[api])
    def list_precedents(policy_name: str, status: str | None = None):
        cases = state.precedent(policy_name).cases.values()
        if status:
            cases = [c for c in cases if c.status.value == status]
        return [c.to_dict() for c in sorted(cases, key=lambda c: c.case_id)]

    @app.get("/api/v1/precedents/{case_id}", dependencies=[api])
    def get_precedent(case_id: str, policy_name: str):
        case = state.precedent(policy_name).cases.get(case_id)
        if case is None:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id!r}")
        return case.to_dict()

    # -- disagreements ---------------------------------------------------------

    @app.get("/api/v1/disagreements", dependencies=[api])
    def list_disagreements(policy_name: str, status: str | None = QueryParam(default=None)):
        store = state.precedent(policy_name)
        items = store.disagreements.values()
        if status:
            wanted = DisagreementStatus(status)
            items = [d for d in items if d.status is wanted]
        return [d.to_dict() for d in sorted(items, key=lambda d: d.disagreement_id)]

    @app.post("/api/v1/disagreements/detect", dependencies=[api])
    def detect(body: dict = Body(...)):
        policy_name = body["policy_name"]
        threshold = int(body.get("threshold", 1))
        store = state.precedent(policy_name)
        if "judgments" in body and body["judgments"] is not None:
            judgments = [Judgment.from_dict(j) for j in body["judgments"]]
        else:
            judgments = state.judgments(policy_name).filtered(
                policy_version=body.get("policy_version"), judge_id=body.get("judge_id")
            )
        summary = store.detect_disagreements(judgments, threshold=threshold)
        return summary.to_dict()

    @app.post("/api/v1/disagreements/{disagreement_id}/resolution", dependencies=[api])
    def resolve(disagreement_id: str, body: dict = Body(...)):
        store = state.precedent(body["policy_name"])
        resolution = store.resolve_disagreement(
            disagreement_id,
            vector=body["vector"],
            actor=body.get("actor", "workbench"),
            note=body.get("note", ""),
            new_grade=body.get("new_grade"),
        )
        return resolution.to_dict()

    @app.get("/api/v1/resolutions", dependencies=[api])
    def list_resolutions(policy_name: str):
        store = state.precedent(policy_name)
        return [r.to_dict() for r in sorted(store.resolutions.values(), key=lambda r: r.resolution_id)]

    @app.get("/api/v1/issues", dependencies=[api])
    def list_issues(policy_name: str, status: str | None = None):
        store = state.precedent(policy_name)
        items = store.issues.values()
        if status:
            items = [i for i in items if i.status.value == status]
        return [i.to_dict() for i in sorted(items, key=lambda i: i.issue_id)]

    @app.post("/api/v1/issues/{issue_id}/codify", dependencies=[api])
    def codify_issue(issue_id: str, body: dict = Body(...)):
        policy_name = body["policy_name"]
        policy = state.policies.get(policy_name, body["policy_version"])
        store = state.precedent(policy_name)
        store.codify_issue(issue_id, policy)
        return store.issues[issue_id].to_dict()

    # -- judgments ----------------------------------------------------------------

    @app.post("/api/v1/judgments", dependencies=[api])
    def append_judgments(body: dict = Body(...)):
        judgments = [Judgment.from_dict(j) for j in body.get("judgments", [])]
        count = state.judgments(body["policy_name"]).append(judgments)
        return {"recorded": count}

    @app.get("/api/v1/judgments", dependencies=[api])
    def list_judgments(
        policy_name: str,
        policy_version: str | None = None,
        judge_id: str | None = None,
    ):
        judgments = state.judgments(policy_name).filtered(policy_version, judge_id)
        return [j.to_dict() for j in judgments]

    # -- reports -------------------------------------------------------------------

    @app.get("/api/v1/reports/calibration", dependencies=[api])
    def list_calibration_reports(policy_name: str):
        return [r.to_dict() for r in state.reports(policy_name).all()]

    @app.post("/api/v1/reports/calibration", dependencies=[api])
    def record_calibration_report(body: dict = Body(...)):
        policy_name = body["policy_name"]
        label = body.get("label", "")
        if "report" in body and body["report"] is not None:
            report = AgreementReport.from_dict(body["report"])
        else:
            judgments = state.judgments(policy_name).filtered(
                policy_version=body.get("policy_version"), judge_id=body.get("judge_id")
            )
            report = calibration_report(
                state.precedent(policy_name),
                judgments,
                policy_version=body["policy_version"],
                judge_id=body.get("judge_id"),
            )
        recorded = state.reports(policy_name).record(report, label=label)
        return recorded.to_dict()

    @app.get("/api/v1/reports/interrater", dependencies=[api])
    def interrater(policy_name: str, floor: float = 0.5):
        return interrater_report(state.precedent(policy_name), agreement_floor=floor).to_dict()

    # -- time series and alerts ------------------------------------------------------

    @app.get("/api/v1/timeseries", dependencies=[api])
    def get_timeseries(
        metric: str,
        k: int,
        slice_name: str = QueryParam(default="ALL", alias="slice"),
        policy_version: str | None = None,
    ):
        points = state.timeseries.series(metric, k, slice_name, policy_version)
        return [p.to_dict() for p in points]

    @app.post("/api/v1/timeseries", dependencies=[api])
    def record_timeseries(body: dict = Body(...)):
        points = [MetricPoint.from_dict(p) for p in body.get("points", [])]
        recorded = state.timeseries.record_points(points)
        return {"recorded": recorded, "received": len(points)}

    @app.post("/api/v1/monitor/detect", dependencies=[api])
    def monitor_detect(body: dict = Body(...)):
        result = detect_regression(
            state.timeseries,
            metric=body["metric"],
            k=int(body["k"]),
            slice_name=body.get("slice", "ALL"),
            as_of=date_type.fromisoformat(body["as_of"]),
            window_days=int(body.get("window_days", 7)),
            threshold=body.get("threshold"),
        )
        return {
            "alerts": [a.to_dict() for a in result.alerts],
            "notices": [n.to_dict() for n in result.notices],
        }

    @app.get("/api/v1/alerts", dependencies=[api])
    def list_alerts():
        return [a.to_dict() for a in state.alerts.replay()]

    # -- corpora ----------------------------------------------------------------------

    @app.get("/api/v1/corpora", dependencies=[api])
    def list_corpora():
        corpora_dir = state.data_dir / "corpora"
        out = []
        if corpora_dir.exists():
            for stats_file in sorted(corpora_dir.glob("*.stats.json")):
                with open(stats_file, encoding="utf-8") as fh:
                    out.append({"corpus": stats_file.name.replace(".stats.json", ""),
                                "stats": json.load(fh)})
        return out

    # -- background jobs ----------------------------------------------------------------

    @app.post("/api/v1/jobs/daily-run", dependencies=[api], status_code=202)
    def start_daily_run(body: dict = Body(default={})):
        config_file = body.get("config_file") or state.config.daily_config_file
        if not config_file:
            raise HTTPException(status_code=400, detail="no daily config file configured")
        day = date_type.fromisoformat(body["date"]) if body.get("date") else date_type.today()
        job_id = uuid.uuid4().hex[:12]
        state.jobs[job_id] = {"status": "running", "submitted_at": _now(), "result": None}

        def run():
            try:
                result = run_daily_pipeline(
                    DailyConfig.from_file(config_file),
                    state.data_dir,
                    day,
                    store=state.timeseries,
                    alert_log=state.alerts,
                )
                state.jobs[job_id].update(status="done", result=result.to_dict())
            except Exception as exc:  # job isolation: error lands in job state
                state.jobs[job_id].update(status="error", result={"error": str(exc)})

        threading.Thread(target=run, daemon=True).start()
        return {"job_id": job_id}

    @app.get("/api/v1/jobs/{job_id}", dependencies=[api])
    def get_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id!r}")
        return {"job_id": job_id, **job}

    if config.workbench_dir and Path(config.workbench_dir).exists():
        app.mount(
            "/workbench", StaticFiles(directory=config.workbench_dir, html=True), name="workbench"
        )

    return app


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def serve(config: ServiceConfig) -> None:
    """Run the service until interrupted."""
    import uvicorn

    host, _, port = config.listen.rpartition(":")
    uvicorn.run(create_app(config), host=host or "127.0.0.1", port=int(port))
