// Workbench single-page app: hash-routed triage and dashboard views over
// the /api/v1 service. The page holds no authoritative state; every view is
// rebuilt from the API, and a reload after any action reproduces it.

import { ApiClient } from "./api.js";
import { confusionCells, kappaTrend, seriesWithMarkers } from "./dashboards.js";
import { renderConfusionHeatmap, renderKappaTrend, renderSeries } from "./charts.js";
import { TriageController, noteRequired } from "./triage.js";
import type { ResolutionVector } from "./types.js";
import { RESOLUTION_VECTORS } from "./types.js";

interface AppConfig {
  baseUrl: string;
  policyName: string;
  token?: string;
}

function readConfig(): AppConfig {
  const params = new URLSearchParams(window.location.search);
  return {
    baseUrl: params.get("api") ?? localStorage.getItem("sage.api") ?? "",
    policyName: params.get("policy") ?? localStorage.getItem("sage.policy") ?? "job_search",
    token: params.get("token") ?? localStorage.getItem("sage.token") ?? undefined,
  };
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") node.className = value;
    else node.setAttribute(key, value);
  }
  node.append(...children);
  return node;
}

function toast(message: string, isError = false): void {
  const box = el("div", { class: `toast ${isError ? "toast-error" : ""}` }, message);
  document.body.append(box);
  setTimeout(() => box.remove(), 4000);
}

class Workbench {
  private api: ApiClient;
  private triage: TriageController;
  private root: HTMLElement;
  private activePolicyVersion = "?";
  private lastGoodView: HTMLElement | null = null;

  constructor(private config: AppConfig) {
    this.api = new ApiClient(config.baseUrl, config.token);
    this.triage = new TriageController(this.api, config.policyName);
    this.root = document.getElementById("app")!;
    window.addEventListener("hashchange", () => void this.route());
  }

  async start(): Promise<void> {
    await this.refreshPolicyVersion();
    await this.route();
  }

  private async refreshPolicyVersion(): Promise<void> {
    try {
      const policies = await this.api.listPolicies();
      const mine = policies.find((p) => p.name === this.config.policyName);
      this.activePolicyVersion = mine?.versions.at(-1) ?? "unregistered";
    } catch {
      this.activePolicyVersion = "unreachable";
    }
  }

  private header(viewName: string): HTMLElement {
    return el(
      "header",
      {},
      el("strong", {}, "sage workbench"),
      el("nav", {},
        el("a", { href: "#/triage" }, "triage"),
        el("a", { href: "#/dashboards" }, "dashboards"),
        el("a", { href: "#/policy" }, "policy"),
      ),
      el(
        "span",
        { class: "policy-badge" },
        `${this.config.policyName} @ policy v${this.activePolicyVersion} — ${viewName}`,
      ),
    );
  }

  private async route(): Promise<void> {
    const hash = window.location.hash || "#/triage";
    try {
      let view: HTMLElement;
      if (hash.startsWith("#/dashboards")) view = await this.dashboardsView();
      else if (hash.startsWith("#/policy")) view = await this.policyView();
      else view = await this.triageView();
      this.lastGoodView = view;
      this.root.replaceChildren(this.header(hash.slice(2)), view);
    } catch (error) {
      const banner = el(
        "div",
        { class: "stale-banner" },
        `service unavailable (${error instanceof Error ? error.message : error}); showing last loaded view`,
      );
      this.root.replaceChildren(
        this.header("offline"),
        banner,
        this.lastGoodView ?? el("p", {}, "no cached view yet"),
      );
    }
  }

  // -- triage -----------------------------------------------------------------

  private async triageView(): Promise<HTMLElement> {
    await this.triage.load();
    const container = el("main", { class: "triage" });
    const list = el("ul", { class: "queue" });
    const detail = el("section", { class: "detail" }, el("p", {}, "pick an item"));

    const renderQueue = () => {
      list.replaceChildren(
        ...this.triage.queue.map((dg) =>
          el(
            "li",
            {},
            el(
              "button",
              { "data-id": dg.disagreement_id },
              `${dg.disagreement_id} Δ${dg.delta}` +
                (dg.suggested_vector ? ` hint:${dg.suggested_vector}` : ""),
            ),
          ),
        ),
      );
      if (this.triage.queue.length === 0) {
        list.replaceChildren(el("li", {}, "queue is empty"));
      }
    };

    list.addEventListener("click", (event) => {
      const target = event.target as HTMLElement;
      const id = target.getAttribute("data-id");
      if (id) void showDetail(id);
    });

    const showDetail = async (id: string) => {
      const pane = await this.triage.detail(id);
      const judgeSide = el(
        "div",
        { class: "judge-side" },
        el("h3", {}, `judge grade ${pane.judgeGrade}`),
        ...pane.judgeScores.map((s) =>
          el(
            "p",
            {},
            `${s.attribute}: ${s.score} — ${s.rationale}` + (s.evidence ? ` [${s.evidence}]` : ""),
          ),
        ),
      );
      const expertSide = el(
        "div",
        { class: "expert-side" },
        el("h3", {}, `expert consensus ${pane.consensusGrade}`),
        ...pane.expertGrades.map((g) =>
          el("p", {}, `${g.annotator}: ${g.grade}` + (g.note ? ` — ${g.note}` : "")),
        ),
      );
      const noteInput = el("input", { placeholder: "resolution note", class: "note" });
      const gradeInput = el("input", {
        placeholder: "corrected grade 0-4",
        class: "grade",
        type: "number",
        min: "0",
        max: "4",
      });
      const actions = el(
        "div",
        { class: "actions" },
        ...RESOLUTION_VECTORS.map((vector) => {
          const button = el("button", { class: `act-${vector.toLowerCase()}` }, vector);
          button.addEventListener("click", () => void act(vector));
          return button;
        }),
      );
      const act = async (vector: ResolutionVector) => {
        const draft = {
          vector,
          actor: "workbench-reviewer",
          note: (noteInput as HTMLInputElement).value,
          new_grade:
            vector === "CORRECT_PRECEDENT"
              ? Number((gradeInput as HTMLInputElement).value)
              : undefined,
        };
        if (noteRequired(vector) && draft.note.trim() === "") {
          toast(`${vector} needs a note`, true);
          return;
        }
        const outcome = await this.triage.resolve(id, draft);
        if (outcome.kind === "resolved") {
          toast(`resolved via ${vector}`);
          detail.replaceChildren(el("p", {}, `resolved: ${outcome.resolution?.resolution_id}`));
        } else if (outcome.kind === "conflict") {
          toast("already resolved by someone else; queue refreshed", true);
          detail.replaceChildren(el("p", {}, "item was resolved concurrently"));
        } else {
          toast(outcome.message ?? "failed", true);
        }
        renderQueue();
      };
      detail.replaceChildren(
        el("h2", {}, `${pane.disagreement.disagreement_id} — ${pane.queryText}`),
        el(
          "div",
          { class: "doc-fields" },
          ...Object.entries(pane.documentFields).map(([name, values]) =>
            el("p", {}, `${name}: ${values.join("; ")}`),
          ),
        ),
        el("div", { class: "sides" }, judgeSide, expertSide),
        noteInput,
        gradeInput,
        actions,
      );
    };

    renderQueue();
    container.append(list, detail);
    return container;
  }

  // -- dashboards ------------------------------------------------------------------

  private async dashboardsView(): Promise<HTMLElement> {
    const [reports, alerts] = await Promise.all([
      this.api.calibrationReports(this.config.policyName),
      this.api.alerts(),
    ]);
    const container = el("main", { class: "dashboards" });

    const trend = kappaTrend(reports);
    const trendBox = el("section", {}, el("h2", {}, "judge calibration (linear kappa)"));
    trendBox.insertAdjacentHTML("beforeend", renderKappaTrend(trend));

    const heatBox = el("section", {}, el("h2", {}, "latest confusion matrix"));
    const latest = reports.at(-1);
    if (latest) {
      heatBox.insertAdjacentHTML(
        "beforeend",
        renderConfusionHeatmap(confusionCells(latest.report)),
      );
    } else {
      heatBox.append(el("p", {}, "no calibration reports recorded yet"));
    }

    const seriesBox = el("section", {}, el("h2", {}, "PMR@10 (ALL) with alert markers"));
    try {
      const points = await this.api.timeseries("pmr", 10, "ALL");
      const view = seriesWithMarkers(points, alerts.filter((a) => a.metric === "pmr"));
      seriesBox.insertAdjacentHTML("beforeend", renderSeries(view, "pmr@10"));
    } catch (error) {
      seriesBox.append(el("p", {}, `no series: ${error instanceof Error ? error.message : error}`));
    }

    container.append(trendBox, heatBox, seriesBox);
    return container;
  }

  // -- policy ------------------------------------------------------------------------

  private async policyView(): Promise<HTMLElement> {
    const container = el("main", { class: "policy" });
    const policies = await this.api.listPolicies();
    const mine = policies.find((p) => p.name === this.config.policyName);
    if (!mine || mine.versions.length === 0) {
      container.append(el("p", {}, "policy not registered with the service"));
      return container;
    }
    container.append(el("h2", {}, `versions: ${mine.versions.join(", ")}`));
    if (mine.versions.length >= 2) {
      const oldVersion = mine.versions.at(-2)!;
      const newVersion = mine.versions.at(-1)!;
      const diff = await this.api.policyDiff(this.config.policyName, oldVersion, newVersion);
      const list = el("ul", { class: "diff" });
      for (const change of diff.changes) {
        list.append(
          el(
            "li",
            {},
            `${change.change} ${change.subject}: ${JSON.stringify(change.old)} -> ${JSON.stringify(change.new)}`,
          ),
        );
      }
      container.append(el("h3", {}, `diff ${oldVersion} -> ${newVersion}`), list);
    }
    return container;
  }
}

export function bootstrap(): void {
  const config = readConfig();
  void new Workbench(config).start();
}

if (typeof window !== "undefined" && document.getElementById("app")) {
  bootstrap();
}
