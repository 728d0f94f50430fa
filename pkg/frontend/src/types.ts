/** Shared domain types for the doctor console. */

/** Everything one browser session needs to talk to the backends. */
export interface SessionContext {
  /** Base URL of the institution's REST gateway, e.g. "http://127.0.0.1:7830". */
  gatewayUrl: string;
  /** Base URL of the institution's evidence store, e.g. "http://127.0.0.1:7820". */
  storeUrl: string;
  /** Gateway bearer token; required before any data call. */
  token: string;
  /** Display name of the institution operating this console. */
  institution: string;
}

/** One committed change record, as the gateway serves it. */
export interface TrajectoryEntry {
  height: number;
  tx_id: string;
  kind: string; // ADD | MODIFY | DELETE
  creator: string;
  created_at: number; // unix milliseconds
  ref_url: string;
  access_key: string;
  content_hash: string;
  media_hint: string;
  note: string;
  supersedes: string;
}

/** A trajectory entry prepared for rendering. */
export interface TrajectoryRowView {
  height: number;
  txId: string;
  kindBadge: string;
  mediaHint: string;
  creator: string;
  createdAt: number;
  note: string;
  /** True when a later MODIFY/DELETE points at this row's transaction. */
  superseded: boolean;
  /** True when the row carries a payload that can be opened. */
  hasPayload: boolean;
}

/** What the store mints for an uploaded payload. */
export interface StoredResource {
  url: string;
  access_key: string;
  content_hash: string;
  media_hint: string;
  resource_id: string;
  size: number;
}

/** Trajectory screen states; exactly one is active at a time. */
export type LookupState =
  | { state: "idle" }
  | { state: "loading"; patientId: string }
  | {
      state: "trajectory";
      patientId: string;
      log: TrajectoryEntry[];
      current: TrajectoryEntry[];
    }
  | { state: "not-found"; patientId: string; message: string }
  | { state: "unavailable"; patientId: string; message: string; retryable: true }
  | { state: "transport"; patientId: string; message: string; retryable: true }
  | { state: "error"; patientId: string; message: string };

/** Outcome of opening one evidence row. */
export type EvidenceResult =
  | { state: "ok"; bytes: Uint8Array; mediaHint: string; contentHash: string }
  | { state: "tamper"; message: string }
  | { state: "transport"; message: string }
  | { state: "error"; message: string };
