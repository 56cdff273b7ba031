// Wire types mirroring the service's /api/v1 JSON payloads.

export type Grade = 0 | 1 | 2 | 3 | 4;

export type ResolutionVector =
  | "CORRECT_PRECEDENT"
  | "UPDATE_POLICY"
  | "JUDGE_ERROR"
  | "POLICY_AMBIGUITY";

export const RESOLUTION_VECTORS: ResolutionVector[] = [
  "CORRECT_PRECEDENT",
  "UPDATE_POLICY",
  "JUDGE_ERROR",
  "POLICY_AMBIGUITY",
];

export interface AttributeScore {
  attribute: string;
  score: number;
  rationale: string;
  evidence?: string | null;
}

export interface Judgment {
  query_id: string;
  doc_id: string;
  policy_version: string;
  judge_id: string;
  attribute_scores: AttributeScore[];
  final_grade: number;
  rationale: string;
  created_at: string;
}

export interface Disagreement {
  disagreement_id: string;
  case_id: string;
  judgment: Judgment;
  delta: number;
  status: "open" | "resolved";
  suggested_vector: ResolutionVector | null;
}

export interface ExpertGrade {
  annotator_id: string;
  grade: number;
  intuition_flag: boolean;
  note: string;
  adjudication: boolean;
}

export interface PrecedentCase {
  case_id: string;
  query: { query_id: string; text: string; facets: Record<string, string[]> };
  document: { doc_id: string; fields: Record<string, string[]> };
  expert_grades: ExpertGrade[];
  consensus_grade: number;
  status: "active" | "superseded";
  tags: string[];
  revision_history: {
    revision_id: string;
    actor: string;
    change: string;
    timestamp: string;
    prior_consensus: number;
  }[];
}

export interface Resolution {
  resolution_id: string;
  disagreement_id: string;
  vector: ResolutionVector;
  note: string;
  actor: string;
  timestamp: string;
  resulting_artifacts: Record<string, string>;
}

export interface AgreementReport {
  linear_kappa: number | null;
  quadratic_kappa: number | null;
  f1_good: number;
  f1_poor: number;
  confusion: number[][];
  n_items: number;
  policy_version: string;
  judge_id: string;
  flags: string[];
}

export interface RecordedReport {
  report: AgreementReport;
  label: string;
  recorded_at: string;
}

export interface MetricPoint {
  date: string;
  metric: "gr" | "pmr" | "ndcg";
  k: number;
  slice: string;
  value: number;
  n_queries: number;
  policy_version: string;
  judge_id: string;
}

export interface Alert {
  alert_id: string;
  metric: string;
  k: number;
  slice: string;
  window_prior: [string, string];
  window_current: [string, string];
  prior_mean: number;
  current_mean: number;
  relative_change: number;
  direction: "degradation" | "improvement";
  fired_at: string;
  policy_version: string;
  threshold: number;
}

export interface PolicyChange {
  change: string;
  subject: string;
  old: unknown;
  new: unknown;
}

export interface PolicySummary {
  name: string;
  versions: string[];
}

export interface ResolutionDraft {
  vector: ResolutionVector;
  actor: string;
  note: string;
  new_grade?: number;
}
