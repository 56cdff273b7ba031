// Typed client for the service's /api/v1 endpoints. All workbench state
// flows through here; nothing is mutated client-side without a server round
// trip.

import type {
  Alert,
  AgreementReport,
  Disagreement,
  MetricPoint,
  PolicyChange,
  PolicySummary,
  PrecedentCase,
  RecordedReport,
  Resolution,
  ResolutionDraft,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`API ${status}: ${detail}`);
  }
}

export class ConflictError extends ApiError {
  constructor(detail: string) {
    super(409, detail);
  }
}

type FetchLike = typeof fetch;

export class ApiClient {
  constructor(
    private baseUrl: string,
    private token?: string,
    private fetchImpl: FetchLike = fetch,
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const parsed = (await response.json()) as { detail?: unknown };
        if (parsed.detail !== undefined) detail = JSON.stringify(parsed.detail);
      } catch {
        // non-JSON error body; keep the status text
      }
      if (response.status === 409) throw new ConflictError(detail);
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  health(): Promise<{ status: string; version: string }> {
    return this.request("GET", "/api/v1/health");
  }

  // policies

  listPolicies(): Promise<PolicySummary[]> {
    return this.request("GET", "/api/v1/policies");
  }

  policyVersion(name: string, version: string): Promise<Record<string, unknown>> {
    return this.request("GET", `/api/v1/policies/${name}/${version}`);
  }

  policyDiff(
    name: string,
    oldVersion: string,
    newVersion: string,
  ): Promise<{ changes: PolicyChange[] }> {
    const params = new URLSearchParams({ old: oldVersion, new: newVersion });
    return this.request("GET", `/api/v1/policies/${name}/diff?${params}`);
  }

  // triage

  openDisagreements(policyName: string): Promise<Disagreement[]> {
    const params = new URLSearchParams({ policy_name: policyName, status: "open" });
    return this.request("GET", `/api/v1/disagreements?${params}`);
  }

  disagreements(policyName: string): Promise<Disagreement[]> {
    const params = new URLSearchParams({ policy_name: policyName });
    return this.request("GET", `/api/v1/disagreements?${params}`);
  }

  resolveDisagreement(
    policyName: string,
    disagreementId: string,
    draft: ResolutionDraft,
  ): Promise<Resolution> {
    return this.request("POST", `/api/v1/disagreements/${disagreementId}/resolution`, {
      policy_name: policyName,
      ...draft,
    });
  }

  resolutions(policyName: string): Promise<Resolution[]> {
    const params = new URLSearchParams({ policy_name: policyName });
    return this.request("GET", `/api/v1/resolutions?${params}`);
  }

  precedentCase(policyName: string, caseId: string): Promise<PrecedentCase> {
    const params = new URLSearchParams({ policy_name: policyName });
    return this.request("GET", `/api/v1/precedents/${caseId}?${params}`);
  }

  // dashboards

  calibrationReports(policyName: string): Promise<RecordedReport[]> {
    const params = new URLSearchParams({ policy_name: policyName });
    return this.request("GET", `/api/v1/reports/calibration?${params}`);
  }

  recordCalibrationReport(
    policyName: string,
    report: AgreementReport,
    label: string,
  ): Promise<RecordedReport> {
    return this.request("POST", "/api/v1/reports/calibration", {
      policy_name: policyName,
      report,
      label,
    });
  }

  timeseries(metric: string, k: number, slice = "ALL"): Promise<MetricPoint[]> {
    const params = new URLSearchParams({ metric, k: String(k), slice });
    return this.request("GET", `/api/v1/timeseries?${params}`);
  }

  alerts(): Promise<Alert[]> {
    return this.request("GET", "/api/v1/alerts");
  }
}
