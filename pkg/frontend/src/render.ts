// Pure render functions: state in, HTML string out. Snapshot-testable
// without a browser; main.ts assigns the output to innerHTML.

import type { ChatViewState, MetricsViewState } from "./state.js";
import type { RunReport, TelemetrySnapshot } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}

export function renderTranscript(state: ChatViewState): string {
  const turns = state.transcript.map((turn, i) => {
    const img = turn.imagePreviewUrl
      ? `<img class="thumb" src="${escapeHtml(turn.imagePreviewUrl)}" alt="attachment">`
      : "";
    const streaming =
      state.pending && i === state.transcript.length - 1 && turn.role === "assistant"
        ? " streaming"
        : "";
    return `<div class="turn ${turn.role}${streaming}">${img}<p>${escapeHtml(turn.text)}</p></div>`;
  });
  return turns.join("\n");
}

export function renderAttachment(state: ChatViewState): string {
  if (!state.attached) return `<span class="no-attachment">no image attached</span>`;
  return `<img class="thumb pending-attachment" src="${escapeHtml(state.attached.previewUrl)}" alt="staged attachment">`;
}

function fmt(value: number | undefined | null, digits = 1): string {
  return value === undefined || value === null ? "n/a" : value.toFixed(digits);
}

function gaugeClass(value: number | undefined, lo: number, hi: number): string {
  if (value === undefined) return "absent";
  return value >= lo && value <= hi ? "ok" : "violation";
}

const GIB = 1024 ** 3;

/**
 * The three budget metrics (utilization, power, memory) against their
 * envelope, mirroring the run report's table. Absent readings render "n/a",
 * never 0.
 */
export function renderMetricsPanel(state: MetricsViewState): string {
  const snap: TelemetrySnapshot | null = state.snapshot;
  const report: RunReport | null = state.report;
  const env = report?.envelope ?? {
    power_min_w: 10,
    power_max_w: 30,
    memory_budget_bytes: 32 * GIB,
    utilization_target_pct: 100,
  };
  const offline = state.offline ? `<span class="badge offline">offline</span>` : "";
  const power = snap?.power_w;
  const util = snap?.utilization_pct;
  const memGib = snap ? snap.rss_bytes / GIB : undefined;
  const rows = [
    `<tr class="metric utilization ${util === undefined ? "absent" : "ok"}">` +
      `<td>Utilization (%)</td><td class="value">${fmt(util)}</td>` +
      `<td>close to ${env.utilization_target_pct.toFixed(0)}</td></tr>`,
    `<tr class="metric power ${gaugeClass(power, env.power_min_w, env.power_max_w)}" data-power="${power ?? "n/a"}">` +
      `<td>Power (W)</td><td class="value">${fmt(power)}</td>` +
      `<td>${env.power_min_w.toFixed(0)}-${env.power_max_w.toFixed(0)}</td></tr>`,
    `<tr class="metric memory ${gaugeClass(memGib, 0, env.memory_budget_bytes / GIB)}">` +
      `<td>Memory (GiB)</td><td class="value">${fmt(memGib)}</td>` +
      `<td>${(env.memory_budget_bytes / GIB).toFixed(0)}</td></tr>`,
  ];
  const throughput = snap
    ? `<p class="throughput">${fmt(snap.tokens_per_second)} tok/s, ` +
      `${snap.tokens_generated} total</p>`
    : `<p class="throughput">no data</p>`;
  const verdicts = report ? `<p class="verdicts">${report.verdicts.join(", ")}</p>` : "";
  return (
    `<div class="metrics">${offline}<table><thead>` +
    `<tr><th>Metric</th><th>Measured</th><th>Expected</th></tr></thead>` +
    `<tbody>${rows.join("")}</tbody></table>${throughput}${verdicts}</div>`
  );
}
