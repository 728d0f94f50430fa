import { describe, expect, it } from "vitest";
import { createSession, GatewayClient, normalizeBaseUrl, StoreClient } from "../src/api.js";
import { BackendError } from "../src/errors.js";
import {
  bytesResponse,
  entry,
  errorResponse,
  jsonResponse,
  recordingFetch,
  SESSION,
} from "./helpers.js";

describe("normalizeBaseUrl", () => {
  it("adds a scheme and strips trailing slashes", () => {
    expect(normalizeBaseUrl("127.0.0.1:7830")).toBe("http://127.0.0.1:7830");
    expect(normalizeBaseUrl("http://gw.test/")).toBe("http://gw.test");
    expect(normalizeBaseUrl("https://gw.test///")).toBe("https://gw.test");
  });
});

describe("createSession", () => {
  it("accepts a complete config document", () => {
    const session = createSession({
      gateway_url: "gw.test:1",
      store_url: "store.test:2",
      token: "t",
      institution: "clinic",
    });
    expect(session.gatewayUrl).toBe("http://gw.test:1");
    expect(session.storeUrl).toBe("http://store.test:2");
  });

  it.each([
    [{ store_url: "s:1", token: "t" }, "gateway_url"],
    [{ gateway_url: "g:1", token: "t" }, "store_url"],
    [{ gateway_url: "g:1", store_url: "s:1" }, "token"],
    [{ gateway_url: "g:1", store_url: "s:1", token: "   " }, "token"],
  ])("rejects %j", (doc, missing) => {
    expect(() => createSession(doc as Record<string, unknown>)).toThrow(missing);
  });
});

describe("GatewayClient", () => {
  it("refuses to exist without a token", () => {
    expect(() => new GatewayClient({ ...SESSION, token: "" })).toThrow("token");
  });

  it("sends the bearer token on every trajectory read", async () => {
    const { fetchImpl, calls } = recordingFetch([
      () => jsonResponse(200, { patient_id: "paula", entries: [entry({ height: 1 })] }),
    ]);
    const gateway = new GatewayClient(SESSION, fetchImpl);
    const entries = await gateway.getTrajectory("paula");
    expect(entries).toHaveLength(1);
    expect(calls[0].url).toBe("http://gw.test/trajectory/paula");
    expect(calls[0].headers.authorization).toBe("Bearer tok-123");
  });

  it("hits the in-force endpoint for the current view", async () => {
    const { fetchImpl, calls } = recordingFetch([
      () => jsonResponse(200, { patient_id: "paula", entries: [] }),
    ]);
    await new GatewayClient(SESSION, fetchImpl).getCurrentView("paula");
    expect(calls[0].url).toBe("http://gw.test/trajectory/paula/current");
  });

  it("escapes patient ids in paths", async () => {
    const { fetchImpl, calls } = recordingFetch([
      () => jsonResponse(200, { patient_id: "a/b", entries: [] }),
    ]);
    await new GatewayClient(SESSION, fetchImpl).getTrajectory("a/b");
    expect(calls[0].url).toBe("http://gw.test/trajectory/a%2Fb");
  });

  it("posts references as JSON and unwraps the committed entry", async () => {
    const committed = entry({ height: 7, tx_id: "t7" });
    const { fetchImpl, calls } = recordingFetch([
      () => jsonResponse(201, { entry: committed }),
    ]);
    const result = await new GatewayClient(SESSION, fetchImpl).postReference({
      patient_id: "paula",
      kind: "ADD",
      resource: {
        url: "http://store.test/resources/r1",
        access_key: "k".repeat(64),
        content_hash: "c".repeat(64),
        media_hint: "text/plain",
      },
      note: "checkup",
    });
    expect(result.tx_id).toBe("t7");
    expect(calls[0].method).toBe("POST");
    expect(calls[0].url).toBe("http://gw.test/references");
    expect(calls[0].headers["content-type"]).toBe("application/json");
    expect((calls[0].body as { kind: string }).kind).toBe("ADD");
  });

  it("returns evidence bytes with the headers the gateway sets", async () => {
    const payload = new TextEncoder().encode("reading one");
    const { fetchImpl, calls } = recordingFetch([
      () =>
        bytesResponse(payload, {
          "Content-Type": "text/plain",
          "X-Content-Hash": "f".repeat(64),
        }),
    ]);
    const got = await new GatewayClient(SESSION, fetchImpl).getEvidence("paula", 3);
    expect(calls[0].url).toBe("http://gw.test/evidence/3?patient_id=paula");
    expect(new TextDecoder().decode(got.bytes)).toBe("reading one");
    expect(got.mediaHint).toBe("text/plain");
    expect(got.contentHash).toBe("f".repeat(64));
  });

  it("raises typed errors off the backend envelope", async () => {
    const { fetchImpl } = recordingFetch([
      () => errorResponse(404, "not_found", "no ledger routed for 'ghost'"),
    ]);
    const gateway = new GatewayClient(SESSION, fetchImpl);
    const err = await gateway.getTrajectory("ghost").catch((e) => e);
    expect(err).toBeInstanceOf(BackendError);
    expect((err as BackendError).code).toBe("not_found");
  });

  it("maps network failures to a transport-coded error", async () => {
    const { fetchImpl } = recordingFetch([() => new TypeError("fetch failed")]);
    const gateway = new GatewayClient(SESSION, fetchImpl);
    const err = await gateway.getTrajectory("paula").catch((e) => e);
    expect((err as BackendError).code).toBe("transport");
  });
});

describe("StoreClient", () => {
  it("uploads raw bytes with the media hint header", async () => {
    const minted = {
      url: "http://store.test/resources/r9",
      access_key: "a".repeat(64),
      content_hash: "b".repeat(64),
      media_hint: "image/png",
      resource_id: "r9",
      size: 3,
    };
    const { fetchImpl, calls } = recordingFetch([() => jsonResponse(201, minted)]);
    const stored = await new StoreClient(SESSION, fetchImpl).save(
      new Uint8Array([1, 2, 3]),
      "image/png",
    );
    expect(stored).toEqual(minted);
    expect(calls[0].url).toBe("http://store.test/resources");
    expect(calls[0].method).toBe("POST");
    expect(calls[0].headers["x-media-hint"]).toBe("image/png");
  });

  it("surfaces store refusals as typed errors", async () => {
    const { fetchImpl } = recordingFetch([
      () => errorResponse(503, "unavailable", "store is shutting down"),
    ]);
    const err = await new StoreClient(SESSION, fetchImpl)
      .save(new Uint8Array(0), "text/plain")
      .catch((e) => e);
    expect((err as BackendError).code).toBe("unavailable");
  });
});
