/** User-facing flows, written as pure async functions over the API clients
 * so every branch is testable without a browser.
 */
import type { GatewayClient, StoreClient } from "./api.js";
import {
  BackendError,
  CODE_INTEGRITY,
  CODE_NOT_FOUND,
  CODE_TRANSPORT,
  CODE_UNAVAILABLE,
} from "./errors.js";
import { sha256Hex } from "./hash.js";
import type { EvidenceResult, LookupState, TrajectoryEntry } from "./types.js";

/** Look a patient up and fetch both the full log and the in-force view.
 * Every failure maps to a distinct screen state so the doctor knows whether
 * to fix the id, retry later, or call IT. */
export async function lookupPatient(
  gateway: GatewayClient,
  patientId: string,
): Promise<LookupState> {
  try {
    const log = await gateway.getTrajectory(patientId);
    const current = await gateway.getCurrentView(patientId);
    return { state: "trajectory", patientId, log, current };
  } catch (err) {
    if (err instanceof BackendError) {
      if (err.code === CODE_NOT_FOUND) {
        return { state: "not-found", patientId, message: err.message };
      }
      if (err.code === CODE_UNAVAILABLE) {
        return { state: "unavailable", patientId, message: err.message, retryable: true };
      }
      if (err.code === CODE_TRANSPORT) {
        return { state: "transport", patientId, message: err.message, retryable: true };
      }
      return { state: "error", patientId, message: err.message };
    }
    return { state: "error", patientId, message: String(err) };
  }
}

/** Store the payload first, then commit the reference. If the store call
 * fails nothing reaches the ledger, so a failed upload leaves no trace. */
export async function uploadEvidence(
  store: StoreClient,
  gateway: GatewayClient,
  args: {
    patientId: string;
    bytes: Uint8Array;
    mediaHint: string;
    note?: string;
    /** Set to revise an existing record: the tx id being replaced. */
    supersedes?: string;
  },
): Promise<TrajectoryEntry> {
  const stored = await store.save(args.bytes, args.mediaHint);
  return gateway.postReference({
    patient_id: args.patientId,
    kind: args.supersedes ? "MODIFY" : "ADD",
    resource: {
      url: stored.url,
      access_key: stored.access_key,
      content_hash: stored.content_hash,
      media_hint: stored.media_hint,
    },
    note: args.note ?? "",
    supersedes: args.supersedes,
  });
}

/** Retract a record without attaching a replacement payload. */
export async function retractEvidence(
  gateway: GatewayClient,
  args: { patientId: string; supersedes: string; note?: string },
): Promise<TrajectoryEntry> {
  return gateway.postReference({
    patient_id: args.patientId,
    kind: "DELETE",
    note: args.note ?? "",
    supersedes: args.supersedes,
  });
}

/** Fetch one record's payload and verify the bytes against the digest the
 * ledger committed. A mismatch is surfaced as tampering, never as content. */
export async function openEvidence(
  gateway: GatewayClient,
  patientId: string,
  row: { height: number; hasPayload: boolean },
): Promise<EvidenceResult> {
  if (!row.hasPayload) {
    return { state: "error", message: "this record carries no payload" };
  }
  let fetched: { bytes: Uint8Array; mediaHint: string; contentHash: string };
  try {
    fetched = await gateway.getEvidence(patientId, row.height);
  } catch (err) {
    if (err instanceof BackendError) {
      if (err.code === CODE_INTEGRITY) {
        return { state: "tamper", message: err.message };
      }
      if (err.code === CODE_TRANSPORT || err.code === CODE_UNAVAILABLE) {
        return { state: "transport", message: err.message };
      }
      return { state: "error", message: err.message };
    }
    return { state: "error", message: String(err) };
  }
  const digest = await sha256Hex(fetched.bytes);
  if (fetched.contentHash && digest !== fetched.contentHash) {
    return {
      state: "tamper",
      message:
        `payload digest ${digest.slice(0, 12)}… does not match ` +
        `the committed record ${fetched.contentHash.slice(0, 12)}…`,
    };
  }
  return {
    state: "ok",
    bytes: fetched.bytes,
    mediaHint: fetched.mediaHint,
    contentHash: fetched.contentHash,
  };
}
