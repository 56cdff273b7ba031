import json
from datetime import date

import pytest
from fastapi.testclient import TestClient

from sage.core import dump_policy
from sage.service import ServiceConfig, create_app

from .conftest import make_policy
from .test_calibration import case_record, judgment


@pytest.fixture
def client(tmp_path):
    config = ServiceConfig(data_dir=str(tmp_path / "data"))
    app = create_app(config)
    with TestClient(app) as client:
        yield client


def register_policy(client, version="1.0", **kwargs):
    policy = make_policy(version=version, **kwargs)
    response = client.post("/api/v1/policies", json=policy.body_dict())
    assert response.status_code == 201, response.text
    return policy


def import_cases(client, records, policy_name="job_search", version="1.0"):
    response = client.post(
        "/api/v1/precedents/import",
        params={"policy_name": policy_name, "policy_version": version},
        json={"records": records},
    )
    assert response.status_code == 200, response.text
    return response.json()


class TestPolicies:
    def test_register_and_list(self, client):
        register_policy(client, version="1.0")
        register_policy(client, version="1.1", changelog="tightened guidance")
        listed = client.get("/api/v1/policies").json()
        assert listed == [{"name": "job_search", "versions": ["1.0", "1.1"]}]
        assert client.get("/api/v1/policies/job_search").json()["latest"] == "1.1"

    def test_version_must_increase(self, client):
        register_policy(client, version="2.0")
        policy = make_policy(version="1.5")
        response = client.post("/api/v1/policies", json=policy.body_dict())
        assert response.status_code == 400
        assert "must increase" in response.json()["detail"]

    def test_invalid_policy_rejected(self, client):
        body = make_policy().body_dict()
        body["attributes"][0]["weight"] = 0
        response = client.post("/api/v1/policies", json=body)
        assert response.status_code == 400

    def test_diff_endpoint(self, client):
        register_policy(client, version="1.0")
        register_policy(client, version="1.1", weights={"Title": 2.0, "Location": 1.0})
        diff = client.get(
            "/api/v1/policies/job_search/diff", params={"old": "1.0", "new": "1.1"}
        ).json()
        kinds = {c["change"] for c in diff["changes"]}
        assert "modified_weight" in kinds

    def test_unknown_policy_404(self, client):
        assert client.get("/api/v1/policies/nope").status_code == 404


class TestPrecedentAndTriage:
    def test_import_and_list(self, client):
        summary = import_cases(client, [case_record(1), case_record(2)])
        assert summary["accepted"] == 2
        cases = client.get(
            "/api/v1/precedents", params={"policy_name": "job_search"}
        ).json()
        assert {c["case_id"] for c in cases} == {"case-1", "case-2"}

    def test_detect_resolve_conflict_cycle(self, client):
        import_cases(client, [case_record(1, consensus_grades=(4,))])
        detect = client.post(
            "/api/v1/disagreements/detect",
            json={
                "policy_name": "job_search",
                "judgments": [judgment("q1", "d1", 1).to_dict()],
            },
        )
        assert detect.status_code == 200
        (opened,) = detect.json()["opened"]
        dg_id = opened["disagreement_id"]

        listed = client.get(
            "/api/v1/disagreements",
            params={"policy_name": "job_search", "status": "open"},
        ).json()
        assert [d["disagreement_id"] for d in listed] == [dg_id]

        first = client.post(
            f"/api/v1/disagreements/{dg_id}/resolution",
            json={
                "policy_name": "job_search",
                "vector": "CORRECT_PRECEDENT",
                "actor": "reviewer",
                "new_grade": 1,
            },
        )
        assert first.status_code == 200
        assert first.json()["resulting_artifacts"]["precedent_revision_id"]

        second = client.post(
            f"/api/v1/disagreements/{dg_id}/resolution",
            json={"policy_name": "job_search", "vector": "JUDGE_ERROR", "actor": "other"},
        )
        assert second.status_code == 409

        case = client.get(
            "/api/v1/precedents/case-1", params={"policy_name": "job_search"}
        ).json()
        assert case["consensus_grade"] == 1
        assert len(case["revision_history"]) == 1

        resolutions = client.get(
            "/api/v1/resolutions", params={"policy_name": "job_search"}
        ).json()
        assert len(resolutions) == 1

    def test_detect_uses_stored_judgments_when_none_given(self, client):
        import_cases(client, [case_record(1, consensus_grades=(4,))])
        client.post(
            "/api/v1/judgments",
            json={
                "policy_name": "job_search",
                "judgments": [judgment("q1", "d1", 0).to_dict()],
            },
        )
        detect = client.post(
            "/api/v1/disagreements/detect", json={"policy_name": "job_search"}
        )
        assert len(detect.json()["opened"]) == 1

    def test_policy_issue_listing(self, client):
        import_cases(client, [case_record(1, consensus_grades=(4,))])
        detect = client.post(
            "/api/v1/disagreements/detect",
            json={"policy_name": "job_search", "judgments": [judgment("q1", "d1", 1).to_dict()]},
        )
        dg_id = detect.json()["opened"][0]["disagreement_id"]
        client.post(
            f"/api/v1/disagreements/{dg_id}/resolution",
            json={
                "policy_name": "job_search",
                "vector": "UPDATE_POLICY",
                "actor": "reviewer",
                "note": "policy gap",
            },
        )
        issues = client.get("/api/v1/issues", params={"policy_name": "job_search"}).json()
        assert len(issues) == 1
        assert issues[0]["status"] == "open"

    def test_issue_codify_endpoint(self, client):
        register_policy(client, version="1.0")
        import_cases(client, [case_record(1, consensus_grades=(4,))])
        detect = client.post(
            "/api/v1/disagreements/detect",
            json={"policy_name": "job_search", "judgments": [judgment("q1", "d1", 1).to_dict()]},
        )
        dg_id = detect.json()["opened"][0]["disagreement_id"]
        resolution = client.post(
            f"/api/v1/disagreements/{dg_id}/resolution",
            json={
                "policy_name": "job_search",
                "vector": "UPDATE_POLICY",
                "actor": "reviewer",
                "note": "needs explicit seniority language",
            },
        ).json()
        issue_id = resolution["resulting_artifacts"]["policy_issue_id"]

        unacknowledged = make_policy(version="1.1", changelog="minor wording")
        client.post("/api/v1/policies", json=unacknowledged.body_dict())
        rejected = client.post(
            f"/api/v1/issues/{issue_id}/codify",
            json={"policy_name": "job_search", "policy_version": "1.1"},
        )
        assert rejected.status_code == 400

        codifying = make_policy(version="1.2", changelog=f"codifies {issue_id}")
        client.post("/api/v1/policies", json=codifying.body_dict())
        accepted = client.post(
            f"/api/v1/issues/{issue_id}/codify",
            json={"policy_name": "job_search", "policy_version": "1.2"},
        )
        assert accepted.status_code == 200
        assert accepted.json()["status"] == "codified"
        assert accepted.json()["codified_in_version"] == "1.2"


class TestReports:
    def test_compute_and_list_calibration_reports(self, client):
        import_cases(
            client, [case_record(i, consensus_grades=(i % 5,)) for i in range(10)]
        )
        client.post(
            "/api/v1/judgments",
            json={
                "policy_name": "job_search",
                "judgments": [judgment(f"q{i}", f"d{i}", i % 5).to_dict() for i in range(10)],
            },
        )
        computed = client.post(
            "/api/v1/reports/calibration",
            json={"policy_name": "job_search", "policy_version": "1.0", "label": "iter-0"},
        )
        assert computed.status_code == 200
        assert computed.json()["report"]["linear_kappa"] == 1.0
        listed = client.get(
            "/api/v1/reports/calibration", params={"policy_name": "job_search"}
        ).json()
        assert len(listed) == 1

    def test_ingest_precomputed_kappa_sequence(self, client):
        # the dashboard trend: five ascending kappa values
        for i, kappa in enumerate([0.67, 0.71, 0.73, 0.75, 0.77]):
            body = {
                "policy_name": "people_search",
                "label": f"iteration-{i}",
                "report": {
                    "linear_kappa": kappa,
                    "quadratic_kappa": kappa + 0.02,
                    "f1_good": 0.9,
                    "f1_poor": 0.8,
                    "confusion": [[0] * 5 for _ in range(5)],
                    "n_items": 0,
                    "policy_version": "1.0",
                    "judge_id": "teacher",
                },
            }
            assert client.post("/api/v1/reports/calibration", json=body).status_code == 200
        listed = client.get(
            "/api/v1/reports/calibration", params={"policy_name": "people_search"}
        ).json()
        kappas = [r["report"]["linear_kappa"] for r in listed]
        assert kappas == [0.67, 0.71, 0.73, 0.75, 0.77]

    def test_interrater_endpoint(self, client):
        records = []
        for i in range(6):
            record = case_record(i, tags=("pattern=generic",))
            record["expert_grades"] = [
                {"annotator_id": "alice", "grade": i % 5},
                {"annotator_id": "bob", "grade": i % 5},
            ]
            records.append(record)
        import_cases(client, records)
        report = client.get(
            "/api/v1/reports/interrater", params={"policy_name": "job_search"}
        ).json()
        assert report["pairs"][0]["kappa"] == 1.0


class TestTimeseriesAndAlerts:
    def point(self, day, value):
        return {
            "date": day,
            "metric": "pmr",
            "k": 10,
            "slice": "ALL",
            "value": value,
            "n_queries": 100,
            "policy_version": "1.0",
            "judge_id": "student",
        }

    def test_record_and_fetch_ordered(self, client):
        points = [self.point(f"2026-01-{d:02d}", 0.1) for d in (3, 1, 2)]
        response = client.post("/api/v1/timeseries", json={"points": points})
        assert response.json() == {"recorded": 3, "received": 3}
        fetched = client.get(
            "/api/v1/timeseries", params={"metric": "pmr", "k": 10, "slice": "ALL"}
        ).json()
        assert [p["date"] for p in fetched] == ["2026-01-01", "2026-01-02", "2026-01-03"]

    def test_conflicting_rewrite_is_409(self, client):
        client.post("/api/v1/timeseries", json={"points": [self.point("2026-01-01", 0.1)]})
        response = client.post(
            "/api/v1/timeseries", json={"points": [self.point("2026-01-01", 0.2)]}
        )
        assert response.status_code == 409

    def test_detect_endpoint(self, client):
        points = [self.point(f"2026-01-{d:02d}", 0.10 if d <= 7 else 0.14) for d in range(1, 15)]
        client.post("/api/v1/timeseries", json={"points": points})
        result = client.post(
            "/api/v1/monitor/detect",
            json={"metric": "pmr", "k": 10, "slice": "ALL", "as_of": "2026-01-15"},
        ).json()
        assert len(result["alerts"]) == 1
        assert result["alerts"][0]["relative_change"] == pytest.approx(0.4)

    def test_alerts_initially_empty(self, client):
        assert client.get("/api/v1/alerts").json() == []


class TestAuth:
    def test_token_required_when_configured(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SAGE_API_TOKEN", "hunter2")
        app = create_app(ServiceConfig(data_dir=str(tmp_path / "data")))
        with TestClient(app) as client:
            assert client.get("/api/v1/health").status_code == 401
            ok = client.get(
                "/api/v1/health", headers={"Authorization": "Bearer hunter2"}
            )
            assert ok.status_code == 200

    def test_open_when_no_token(self, client):
        assert client.get("/api/v1/health").status_code == 200


class TestJobs:
    def test_daily_run_without_config_is_400(self, client):
        assert client.post("/api/v1/jobs/daily-run", json={}).status_code == 400

    def test_daily_run_job_completes(self, tmp_path):
        from .test_pipeline import rubric_spec, write_traffic_log

        policy_file = tmp_path / "policy.json"
        dump_policy(make_policy(), policy_file)
        judge_file = tmp_path / "judge.json"
        judge_file.write_text(json.dumps(rubric_spec().to_dict()), encoding="utf-8")
        traffic = tmp_path / "traffic.jsonl"
        write_traffic_log(traffic, [1] * 5)
        daily_config = {
            "policy_file": str(policy_file),
            "judge_file": str(judge_file),
            "traffic_log": str(traffic),
            "strata": {
                "dimensions": [{"name": "channel", "proportions": {"email": 1.0}}],
                "total_sample_size": 5,
                "seed": 1,
            },
            "k": 10,
        }
        config_file = tmp_path / "daily.json"
        config_file.write_text(json.dumps(daily_config), encoding="utf-8")
        app = create_app(ServiceConfig(data_dir=str(tmp_path / "data")))
        with TestClient(app) as client:
            started = client.post(
                "/api/v1/jobs/daily-run",
                json={"config_file": str(config_file), "date": "2026-01-01"},
            )
            assert started.status_code == 202
            job_id = started.json()["job_id"]
            for _ in range(100):
                job = client.get(f"/api/v1/jobs/{job_id}").json()
                if job["status"] != "running":
                    break
            assert job["status"] == "done", job
            assert job["result"]["points_recorded"] > 0
            points = client.get(
                "/api/v1/timeseries", params={"metric": "pmr", "k": 10, "slice": "ALL"}
            ).json()
            assert len(points) == 1


class TestRestartReplay:
    def test_new_app_instance_sees_committed_state(self, tmp_path):
        data_dir = str(tmp_path / "data")
        with TestClient(create_app(ServiceConfig(data_dir=data_dir))) as client:
            register_policy(client)
            import_cases(client, [case_record(1, consensus_grades=(4,))])
            detect = client.post(
                "/api/v1/disagreements/detect",
                json={
                    "policy_name": "job_search",
                    "judgments": [judgment("q1", "d1", 1).to_dict()],
                },
            )
            dg_id = detect.json()["opened"][0]["disagreement_id"]
            client.post(
                f"/api/v1/disagreements/{dg_id}/resolution",
                json={
                    "policy_name": "job_search",
                    "vector": "CORRECT_PRECEDENT",
                    "actor": "reviewer",
                    "new_grade": 1,
                },
            )
        with TestClient(create_app(ServiceConfig(data_dir=data_dir))) as client:
            case = client.get(
                "/api/v1/precedents/case-1", params={"policy_name": "job_search"}
            ).json()
            assert case["consensus_grade"] == 1
            resolved = client.get(
                "/api/v1/disagreements",
                params={"policy_name": "job_search", "status": "resolved"},
            ).json()
            assert len(resolved) == 1
