/** HTTP clients for the two backends the console is allowed to talk to:
 * the institution's REST gateway and its evidence store. The console never
 * speaks to ledger nodes directly.
 */
import {
  BackendError,
  errorFromResponse,
  transportError,
} from "./errors.js";
import type { SessionContext, StoredResource, TrajectoryEntry } from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Normalize "host:port" or trailing-slash forms to "http://host:port". */
export function normalizeBaseUrl(raw: string): string {
  let url = raw.trim().replace(/\/+$/, "");
  if (url && !/^https?:\/\//.test(url)) {
    url = `http://${url}`;
  }
  return url;
}

/** Validate a runtime config document into a session. */
export function createSession(doc: Record<string, unknown>): SessionContext {
  const gatewayUrl = normalizeBaseUrl(String(doc.gateway_url ?? ""));
  const storeUrl = normalizeBaseUrl(String(doc.store_url ?? ""));
  const token = String(doc.token ?? "").trim();
  const institution = String(doc.institution ?? "").trim();
  if (!gatewayUrl) throw new Error("config needs gateway_url");
  if (!storeUrl) throw new Error("config needs store_url");
  if (!token) throw new Error("config needs a bearer token");
  return { gatewayUrl, storeUrl, token, institution: institution || "unnamed clinic" };
}

interface TrajectoryResponse {
  patient_id: string;
  entries: TrajectoryEntry[];
}

export class GatewayClient {
  constructor(
    private readonly session: SessionContext,
    private readonly fetchImpl: FetchLike = fetch,
  ) {
    if (!session.token) {
      throw new Error("a session token is required before any data call");
    }
  }

  private headers(extra: Record<string, string> = {}): Record<string, string> {
    return { Authorization: `Bearer ${this.session.token}`, ...extra };
  }

  private async request(url: string, init: RequestInit): Promise<Response> {
    let response: Response;
    try {
      response = await this.fetchImpl(url, init);
    } catch (cause) {
      throw transportError(cause);
    }
    if (!response.ok) {
      throw await errorFromResponse(response);
    }
    return response;
  }

  /** Full change log, every committed record in height order. */
  async getTrajectory(patientId: string): Promise<TrajectoryEntry[]> {
    const url = `${this.session.gatewayUrl}/trajectory/${encodeURIComponent(patientId)}`;
    const response = await this.request(url, { headers: this.headers() });
    const doc = (await response.json()) as TrajectoryResponse;
    return doc.entries;
  }

  /** Records still in force after applying revisions and retractions. */
  async getCurrentView(patientId: string): Promise<TrajectoryEntry[]> {
    const url = `${this.session.gatewayUrl}/trajectory/${encodeURIComponent(patientId)}/current`;
    const response = await this.request(url, { headers: this.headers() });
    const doc = (await response.json()) as TrajectoryResponse;
    return doc.entries;
  }

  /** Commit a change record referencing an already-stored payload. */
  async postReference(body: {
    patient_id: string;
    kind: string;
    resource?: Pick<StoredResource, "url" | "access_key" | "content_hash" | "media_hint">;
    note?: string;
    supersedes?: string;
  }): Promise<TrajectoryEntry> {
    const url = `${this.session.gatewayUrl}/references`;
    const response = await this.request(url, {
      method: "POST",
      headers: this.headers({ "Content-Type": "application/json" }),
      body: JSON.stringify(body),
    });
    const doc = (await response.json()) as { entry: TrajectoryEntry };
    return doc.entry;
  }

  /** Raw payload bytes for the record at one height, via the gateway proxy. */
  async getEvidence(
    patientId: string,
    height: number,
  ): Promise<{ bytes: Uint8Array; mediaHint: string; contentHash: string }> {
    const url =
      `${this.session.gatewayUrl}/evidence/${height}` +
      `?patient_id=${encodeURIComponent(patientId)}`;
    const response = await this.request(url, { headers: this.headers() });
    const bytes = new Uint8Array(await response.arrayBuffer());
    return {
      bytes,
      mediaHint: response.headers.get("Content-Type") ?? "application/octet-stream",
      contentHash: response.headers.get("X-Content-Hash") ?? "",
    };
  }

  async health(): Promise<{ status: string; institution: string }> {
    const response = await this.request(`${this.session.gatewayUrl}/health`, {});
    return (await response.json()) as { status: string; institution: string };
  }
}

export class StoreClient {
  constructor(
    private readonly session: SessionContext,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  /** Park payload bytes in the institution's store; the response is the
   * only copy of the access key, so it must go straight into a reference. */
  async save(bytes: Uint8Array, mediaHint: string): Promise<StoredResource> {
    const body = bytes.buffer.slice(
      bytes.byteOffset,
      bytes.byteOffset + bytes.byteLength,
    ) as ArrayBuffer;
    let response: Response;
    try {
      response = await this.fetchImpl(`${this.session.storeUrl}/resources`, {
        method: "POST",
        headers: { "Content-Type": "application/octet-stream", "X-Media-Hint": mediaHint },
        body,
      });
    } catch (cause) {
      throw transportError(cause);
    }
    if (!response.ok) {
      throw await errorFromResponse(response);
    }
    return (await response.json()) as StoredResource;
  }
}

export { BackendError };
