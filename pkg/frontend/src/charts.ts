// Dependency-free SVG chart rendering. Each function returns an SVG string;
// tooltips are <title> children so tests can assert on them directly.

import type { HeatmapCell, SeriesView, TrendPoint } from "./dashboards.js";

const WIDTH = 640;
const HEIGHT = 240;
const PAD = 36;

function escapeXml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function scale(value: number, lo: number, hi: number, outLo: number, outHi: number): number {
  if (hi === lo) return (outLo + outHi) / 2;
  return outLo + ((value - lo) / (hi - lo)) * (outHi - outLo);
}

export function renderKappaTrend(points: TrendPoint[]): string {
  if (points.length === 0) return `<svg class="trend" viewBox="0 0 ${WIDTH} ${HEIGHT}"></svg>`;
  const kappas = points.map((p) => p.kappa);
  const lo = Math.min(...kappas, 0.5);
  const hi = Math.max(...kappas, 1.0);
  const xs = points.map((_, i) => scale(i, 0, Math.max(points.length - 1, 1), PAD, WIDTH - PAD));
  const ys = points.map((p) => scale(p.kappa, lo, hi, HEIGHT - PAD, PAD));
  const path = xs.map((x, i) => `${i === 0 ? "M" : "L"}${x.toFixed(1)},${ys[i]!.toFixed(1)}`).join(" ");
  const circles = points
    .map(
      (p, i) =>
        `<circle class="trend-point" cx="${xs[i]!.toFixed(1)}" cy="${ys[i]!.toFixed(1)}" r="5"` +
        ` data-kappa="${p.kappa}"><title>${escapeXml(p.tooltip)}</title></circle>`,
    )
    .join("");
  return (
    `<svg class="trend" viewBox="0 0 ${WIDTH} ${HEIGHT}">` +
    `<path d="${path}" fill="none" stroke="currentColor" stroke-width="2"/>` +
    circles +
    `</svg>`
  );
}

export function renderConfusionHeatmap(cells: HeatmapCell[]): string {
  const size = 32;
  const origin = 40;
  const rects = cells
    .map((cell) => {
      const x = origin + cell.referenceGrade * size;
      const y = origin + (4 - cell.judgeGrade) * size;
      const alpha = cell.share === 0 ? 0.04 : 0.15 + 0.85 * cell.share;
      return (
        `<rect x="${x}" y="${y}" width="${size - 2}" height="${size - 2}"` +
        ` fill="rgba(30, 90, 160, ${alpha.toFixed(3)})" data-count="${cell.count}">` +
        `<title>judge ${cell.judgeGrade} vs expert ${cell.referenceGrade}: ${cell.count}</title></rect>`
      );
    })
    .join("");
  const side = origin * 2 + size * 5;
  return `<svg class="heatmap" viewBox="0 0 ${side} ${side}">${rects}</svg>`;
}

export function renderSeries(view: SeriesView, metricLabel: string): string {
  if (view.points.length === 0) {
    return `<svg class="series" viewBox="0 0 ${WIDTH} ${HEIGHT}"></svg>`;
  }
  const values = view.points.map((p) => p.value);
  const lo = Math.min(...values, 0);
  const hi = Math.max(...values) * 1.1 || 1;
  const dates = view.points.map((p) => p.date);
  const xFor = (date: string) => {
    const index = dates.indexOf(date);
    return scale(index < 0 ? dates.length - 1 : index, 0, Math.max(dates.length - 1, 1), PAD, WIDTH - PAD);
  };
  const path = view.points
    .map((p, i) => `${i === 0 ? "M" : "L"}${xFor(p.date).toFixed(1)},${scale(p.value, lo, hi, HEIGHT - PAD, PAD).toFixed(1)}`)
    .join(" ");
  const markers = view.markers
    .map((marker) => {
      const x = xFor(marker.date).toFixed(1);
      const cls = marker.kind === "alert" ? "marker-alert" : "marker-version";
      const stroke = marker.kind === "alert" ? "#c0392b" : "#7f8c8d";
      const dash = marker.kind === "alert" ? "" : ` stroke-dasharray="4 3"`;
      return (
        `<line class="${cls}" x1="${x}" y1="${PAD}" x2="${x}" y2="${HEIGHT - PAD}"` +
        ` stroke="${stroke}"${dash}><title>${escapeXml(marker.label)}</title></line>`
      );
    })
    .join("");
  return (
    `<svg class="series" viewBox="0 0 ${WIDTH} ${HEIGHT}" aria-label="${escapeXml(metricLabel)}">` +
    `<path d="${path}" fill="none" stroke="currentColor" stroke-width="2"/>` +
    markers +
    `</svg>`
  );
}
