/** Pure view-model logic for the trajectory table. */
import type { TrajectoryEntry, TrajectoryRowView } from "./types.js";

const KIND_BADGES: Record<string, string> = {
  ADD: "added",
  MODIFY: "revised",
  DELETE: "retracted",
};

/** Prepare entries for display: height order, one row per committed record,
 * with rows that a later revision or retraction points at flagged. */
export function toRowViews(entries: TrajectoryEntry[]): TrajectoryRowView[] {
  const ordered = [...entries].sort((a, b) => a.height - b.height);
  const supersededIds = new Set<string>();
  for (const entry of ordered) {
    if (entry.supersedes) {
      supersededIds.add(entry.supersedes);
    }
  }
  return ordered.map((entry) => ({
    height: entry.height,
    txId: entry.tx_id,
    kindBadge: KIND_BADGES[entry.kind] ?? entry.kind.toLowerCase(),
    mediaHint: entry.media_hint,
    creator: entry.creator,
    createdAt: entry.created_at,
    note: entry.note,
    superseded: supersededIds.has(entry.tx_id),
    hasPayload: entry.kind !== "DELETE" && entry.ref_url !== "",
  }));
}

/** The table must show exactly one row per record the gateway returned —
 * nothing merged away, nothing invented. */
export function rowCountMatches(
  entries: TrajectoryEntry[],
  rows: TrajectoryRowView[],
): boolean {
  return rows.length === entries.length;
}

/** Transaction ids of records still in force, for cross-checking the
 * current view against the full log. */
export function activeTxIds(entries: TrajectoryEntry[]): string[] {
  return toRowViews(entries)
    .filter((row) => !row.superseded && row.kindBadge !== "retracted")
    .map((row) => row.txId);
}
