/** Test doubles: canned HTTP responses and a recording fetch. */
import type { FetchLike } from "../src/api.js";
import type { SessionContext, TrajectoryEntry } from "../src/types.js";

export const SESSION: SessionContext = {
  gatewayUrl: "http://gw.test",
  storeUrl: "http://store.test",
  token: "tok-123",
  institution: "hospital-es",
};

export function jsonResponse(status: number, doc: unknown): Response {
  return new Response(JSON.stringify(doc), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

export function errorResponse(status: number, code: string, message: string): Response {
  return jsonResponse(status, { error: { code, message } });
}

export function bytesResponse(
  bytes: Uint8Array,
  headers: Record<string, string>,
): Response {
  const body = bytes.buffer.slice(
    bytes.byteOffset,
    bytes.byteOffset + bytes.byteLength,
  ) as ArrayBuffer;
  return new Response(body, { status: 200, headers });
}

export interface RecordedCall {
  url: string;
  method: string;
  headers: Record<string, string>;
  body?: unknown;
}

/** A fetch that answers from a queue of handlers and records every call. */
export function recordingFetch(
  handlers: Array<(call: RecordedCall) => Response | Error>,
): { fetchImpl: FetchLike; calls: RecordedCall[] } {
  const calls: RecordedCall[] = [];
  const fetchImpl: FetchLike = async (url, init) => {
    const headers: Record<string, string> = {};
    for (const [key, value] of Object.entries(init?.headers ?? {})) {
      headers[key.toLowerCase()] = value as string;
    }
    let body: unknown = init?.body;
    if (typeof body === "string") {
      try {
        body = JSON.parse(body);
      } catch {
        // keep the raw string
      }
    }
    const call: RecordedCall = {
      url,
      method: init?.method ?? "GET",
      headers,
      body,
    };
    calls.push(call);
    const handler = handlers.shift();
    if (!handler) throw new Error(`unexpected request: ${call.method} ${url}`);
    const result = handler(call);
    if (result instanceof Error) throw result;
    return result;
  };
  return { fetchImpl, calls };
}

let nextHeight = 1;

/** A plausible committed record; override what the test cares about. */
export function entry(overrides: Partial<TrajectoryEntry> = {}): TrajectoryEntry {
  const height = overrides.height ?? nextHeight++;
  return {
    height,
    tx_id: `tx-${height}`,
    kind: "ADD",
    creator: "hospital-es",
    created_at: 1_755_400_000_000 + height * 1000,
    ref_url: `http://store.test/resources/res-${height}`,
    access_key: "k".repeat(64),
    content_hash: "c".repeat(64),
    media_hint: "application/json",
    note: "",
    supersedes: "",
    ...overrides,
  };
}
