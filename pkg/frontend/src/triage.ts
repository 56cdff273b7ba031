// Triage queue controller: the reviewer works through open judge-vs-expert
// disagreements and files one of the four resolution vectors. The queue is
// updated optimistically; the server stays the source of truth (a 409 means
// someone else already resolved the item and we refresh it instead).

import { ApiClient, ConflictError } from "./api.js";
import type {
  Disagreement,
  PrecedentCase,
  Resolution,
  ResolutionDraft,
  ResolutionVector,
} from "./types.js";

export interface QueueFilter {
  vectorHint?: ResolutionVector | "any";
  minDelta?: number;
  slice?: string; // matches case tags, e.g. "pattern=person-name"
}

export interface TriageOutcome {
  kind: "resolved" | "conflict" | "error";
  resolution?: Resolution;
  message?: string;
}

export interface DetailPane {
  disagreement: Disagreement;
  queryText: string;
  documentFields: Record<string, string[]>;
  judgeScores: { attribute: string; score: number; rationale: string; evidence?: string | null }[];
  judgeGrade: number;
  expertGrades: { annotator: string; grade: number; note: string }[];
  consensusGrade: number;
  tags: string[];
}

export function noteRequired(vector: ResolutionVector): boolean {
  return vector === "UPDATE_POLICY" || vector === "POLICY_AMBIGUITY";
}

export function validateDraft(draft: ResolutionDraft): string | null {
  if (noteRequired(draft.vector) && draft.note.trim() === "") {
    return `${draft.vector} requires a note describing the policy gap`;
  }
  if (draft.vector === "CORRECT_PRECEDENT") {
    if (draft.new_grade === undefined) return "CORRECT_PRECEDENT requires the corrected grade";
    if (!Number.isInteger(draft.new_grade) || draft.new_grade < 0 || draft.new_grade > 4) {
      return `corrected grade must be an integer 0..4, got ${draft.new_grade}`;
    }
  }
  return null;
}

export function applyFilter(queue: Disagreement[], filter: QueueFilter, caseTags: Map<string, string[]>): Disagreement[] {
  return queue.filter((dg) => {
    if (filter.vectorHint && filter.vectorHint !== "any" && dg.suggested_vector !== filter.vectorHint) {
      return false;
    }
    if (filter.minDelta !== undefined && dg.delta < filter.minDelta) return false;
    if (filter.slice) {
      const tags = caseTags.get(dg.case_id) ?? [];
      if (!tags.includes(filter.slice)) return false;
    }
    return true;
  });
}

export class TriageController {
  queue: Disagreement[] = [];
  private cases = new Map<string, PrecedentCase>();

  constructor(
    private api: ApiClient,
    private policyName: string,
  ) {}

  async load(): Promise<Disagreement[]> {
    this.queue = await this.api.openDisagreements(this.policyName);
    this.cases.clear();
    return this.queue;
  }

  filtered(filter: QueueFilter): Disagreement[] {
    const tags = new Map<string, string[]>();
    for (const [caseId, precedent] of this.cases) tags.set(caseId, precedent.tags);
    return applyFilter(this.queue, filter, tags);
  }

  async detail(disagreementId: string): Promise<DetailPane> {
    const dg = this.queue.find((d) => d.disagreement_id === disagreementId);
    if (!dg) throw new Error(`disagreement ${disagreementId} is not in the queue`);
    const precedent = await this.caseFor(dg.case_id);
    return {
      disagreement: dg,
      queryText: precedent.query.text,
      documentFields: precedent.document.fields,
      judgeScores: dg.judgment.attribute_scores,
      judgeGrade: dg.judgment.final_grade,
      expertGrades: precedent.expert_grades
        .filter((g) => !g.adjudication)
        .map((g) => ({ annotator: g.annotator_id, grade: g.grade, note: g.note })),
      consensusGrade: precedent.consensus_grade,
      tags: precedent.tags,
    };
  }

  private async caseFor(caseId: string): Promise<PrecedentCase> {
    const cached = this.cases.get(caseId);
    if (cached) return cached;
    const precedent = await this.api.precedentCase(this.policyName, caseId);
    this.cases.set(caseId, precedent);
    return precedent;
  }

  /** Optimistically removes the item, restoring it if the API call fails.
   *  A conflict (someone else resolved it first) refreshes the queue so the
   *  reviewer sees the winning resolution. */
  async resolve(disagreementId: string, draft: ResolutionDraft): Promise<TriageOutcome> {
    const validation = validateDraft(draft);
    if (validation) return { kind: "error", message: validation };
    const index = this.queue.findIndex((d) => d.disagreement_id === disagreementId);
    if (index < 0) return { kind: "error", message: "item is no longer queued" };
    const [removed] = this.queue.splice(index, 1);
    try {
      const resolution = await this.api.resolveDisagreement(
        this.policyName,
        disagreementId,
        draft,
      );
      this.cases.delete(removed!.case_id); // revision may have changed it
      return { kind: "resolved", resolution };
    } catch (error) {
      if (error instanceof ConflictError) {
        await this.load();
        return { kind: "conflict", message: error.detail };
      }
      this.queue.splice(index, 0, removed!); // restore; surface a toast upstream
      return { kind: "error", message: error instanceof Error ? error.message : String(error) };
    }
  }
}
