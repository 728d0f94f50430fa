/** HTML-string renderers. Kept free of DOM calls so the exact markup is
 * assertable in tests; main.ts owns mounting them into the page.
 */
import type { LookupState, TrajectoryRowView } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

function formatWhen(unixMillis: number): string {
  return new Date(unixMillis).toISOString().replace("T", " ").slice(0, 19);
}

export function renderRow(row: TrajectoryRowView): string {
  const classes = ["entry", `kind-${row.kindBadge}`];
  if (row.superseded) classes.push("superseded");
  const open = row.hasPayload
    ? `<button class="open" data-height="${row.height}">open</button>`
    : "";
  return (
    `<tr class="${classes.join(" ")}" data-tx="${escapeHtml(row.txId)}">` +
    `<td class="height">${row.height}</td>` +
    `<td class="kind">${escapeHtml(row.kindBadge)}</td>` +
    `<td class="media">${escapeHtml(row.mediaHint)}</td>` +
    `<td class="creator">${escapeHtml(row.creator)}</td>` +
    `<td class="when">${formatWhen(row.createdAt)}</td>` +
    `<td class="note">${escapeHtml(row.note)}</td>` +
    `<td class="actions">${open}</td>` +
    `</tr>`
  );
}

export function renderTable(rows: TrajectoryRowView[]): string {
  const body = rows.map(renderRow).join("");
  return (
    `<table class="trajectory">` +
    `<thead><tr><th>#</th><th>change</th><th>media</th>` +
    `<th>recorded by</th><th>when</th><th>note</th><th></th></tr></thead>` +
    `<tbody>${body}</tbody>` +
    `</table>`
  );
}

export function renderBanner(kind: "info" | "warn" | "danger", message: string): string {
  return `<div class="banner ${kind}">${escapeHtml(message)}</div>`;
}

/** One entry point for the whole lookup screen. */
export function renderLookup(state: LookupState, rows: TrajectoryRowView[]): string {
  switch (state.state) {
    case "idle":
      return renderBanner("info", "enter a patient id to fetch their health trajectory");
    case "loading":
      return renderBanner("info", `looking up ${state.patientId}…`);
    case "trajectory": {
      const head =
        `<h2>${escapeHtml(state.patientId)}</h2>` +
        `<p class="counts">${state.log.length} records, ` +
        `${state.current.length} in force</p>`;
      return head + renderTable(rows);
    }
    case "not-found":
      return renderBanner("warn", `no ledger for ${state.patientId}: ${state.message}`);
    case "unavailable":
      return (
        renderBanner("danger", `ledger temporarily unavailable: ${state.message}`) +
        `<button class="retry">retry</button>`
      );
    case "transport":
      return (
        renderBanner("danger", `cannot reach the gateway: ${state.message}`) +
        `<button class="retry">retry</button>`
      );
    case "error":
      return renderBanner("danger", `lookup failed: ${state.message}`);
  }
}
