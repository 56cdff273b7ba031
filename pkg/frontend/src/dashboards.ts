// Pure data transforms behind the dashboard views. Charts render whatever
// these produce; keeping them pure makes the dashboard content testable
// without a DOM.

import type { Alert, MetricPoint, RecordedReport } from "./types.js";

export interface TrendPoint {
  index: number;
  label: string;
  kappa: number;
  tooltip: string;
  policyVersion: string;
}

/** Calibration trend: one point per recorded report, in recorded order. */
export function kappaTrend(reports: RecordedReport[]): TrendPoint[] {
  const points: TrendPoint[] = [];
  for (const [index, recorded] of reports.entries()) {
    const kappa = recorded.report.linear_kappa;
    if (kappa === null) continue; // degenerate report: nothing to plot
    points.push({
      index,
      label: recorded.label || `report ${index + 1}`,
      kappa,
      tooltip: `${recorded.label || `report ${index + 1}`}: linear kappa ${kappa.toFixed(2)}`,
      policyVersion: recorded.report.policy_version,
    });
  }
  return points;
}

export function isAscending(points: TrendPoint[]): boolean {
  return points.every((p, i) => i === 0 || p.kappa > points[i - 1]!.kappa);
}

export interface HeatmapCell {
  judgeGrade: number;
  referenceGrade: number;
  count: number;
  share: number; // of all items
}

/** 5x5 confusion heatmap cells from the most recent report. */
export function confusionCells(report: { confusion: number[][]; n_items: number }): HeatmapCell[] {
  const cells: HeatmapCell[] = [];
  for (let judge = 0; judge < 5; judge++) {
    for (let reference = 0; reference < 5; reference++) {
      const count = report.confusion[judge]?.[reference] ?? 0;
      cells.push({
        judgeGrade: judge,
        referenceGrade: reference,
        count,
        share: report.n_items > 0 ? count / report.n_items : 0,
      });
    }
  }
  return cells;
}

export interface SeriesMarker {
  date: string;
  kind: "alert" | "policy_version";
  label: string;
}

export interface SeriesView {
  points: { date: string; value: number; policyVersion: string }[];
  markers: SeriesMarker[];
}

/** Time series plus overlay markers: every fired alert, and every day the
 *  policy version changed (so definitional shifts are never mistaken for
 *  model regressions). */
export function seriesWithMarkers(points: MetricPoint[], alerts: Alert[]): SeriesView {
  const ordered = [...points].sort((a, b) => a.date.localeCompare(b.date));
  const markers: SeriesMarker[] = [];
  let previousVersion: string | null = null;
  for (const point of ordered) {
    if (previousVersion !== null && point.policy_version !== previousVersion) {
      markers.push({
        date: point.date,
        kind: "policy_version",
        label: `policy ${previousVersion} -> ${point.policy_version}`,
      });
    }
    previousVersion = point.policy_version;
  }
  for (const alert of alerts) {
    markers.push({
      date: alert.window_current[1],
      kind: "alert",
      label: `${alert.metric}@${alert.k} ${alert.slice} ${(alert.relative_change * 100).toFixed(1)}% WoW`,
    });
  }
  markers.sort((a, b) => a.date.localeCompare(b.date));
  return {
    points: ordered.map((p) => ({
      date: p.date,
      value: p.value,
      policyVersion: p.policy_version,
    })),
    markers,
  };
}
