/** Browser bootstrap: load config, build clients, wire the page together.
 * All decision logic lives in flows.ts/trajectory.ts; this file only mounts it.
 */
import { createSession, GatewayClient, StoreClient } from "./api.js";
import { lookupPatient, openEvidence, uploadEvidence } from "./flows.js";
import { renderBanner, renderLookup } from "./render.js";
import { toRowViews } from "./trajectory.js";
import type { LookupState, SessionContext } from "./types.js";

function mustFind<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`page is missing #${id}`);
  return el as T;
}

async function loadConfig(): Promise<SessionContext> {
  const response = await fetch("config.json");
  if (!response.ok) {
    throw new Error("config.json is missing next to index.html");
  }
  return createSession((await response.json()) as Record<string, unknown>);
}

function showEvidence(result: Awaited<ReturnType<typeof openEvidence>>, pane: HTMLElement): void {
  if (result.state === "ok") {
    const blob = new Blob([result.bytes.buffer.slice(
      result.bytes.byteOffset,
      result.bytes.byteOffset + result.bytes.byteLength,
    ) as ArrayBuffer], { type: result.mediaHint });
    const url = URL.createObjectURL(blob);
    if (result.mediaHint.startsWith("image/")) {
      pane.innerHTML = `<img alt="evidence payload" src="${url}">`;
    } else if (result.mediaHint.startsWith("text/") || result.mediaHint === "application/json") {
      void blob.text().then((text) => {
        pane.textContent = text;
      });
    } else {
      pane.innerHTML = `<a href="${url}" target="_blank" rel="noopener">open payload (${result.mediaHint})</a>`;
    }
    return;
  }
  const kind = result.state === "tamper" ? "danger" : "warn";
  pane.innerHTML = renderBanner(kind, result.message);
}

async function boot(): Promise<void> {
  const screen = mustFind<HTMLDivElement>("screen");
  const pane = mustFind<HTMLDivElement>("evidence");
  let session: SessionContext;
  try {
    session = await loadConfig();
  } catch (err) {
    screen.innerHTML = renderBanner("danger", String(err));
    return;
  }
  const gateway = new GatewayClient(session);
  const store = new StoreClient(session);
  mustFind<HTMLSpanElement>("institution").textContent = session.institution;

  let state: LookupState = { state: "idle" };
  let rows: ReturnType<typeof toRowViews> = [];

  const repaint = (): void => {
    rows = state.state === "trajectory" ? toRowViews(state.log) : [];
    screen.innerHTML = renderLookup(state, rows);
  };

  const lookup = async (patientId: string): Promise<void> => {
    state = { state: "loading", patientId };
    repaint();
    state = await lookupPatient(gateway, patientId);
    repaint();
  };

  const form = mustFind<HTMLFormElement>("lookup-form");
  const input = mustFind<HTMLInputElement>("patient-id");
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const patientId = input.value.trim();
    if (patientId) void lookup(patientId);
  });

  screen.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    if (target.matches("button.retry") && state.state !== "idle" && state.state !== "loading") {
      void lookup(state.patientId);
    }
    if (target.matches("button.open") && state.state === "trajectory") {
      const height = Number(target.dataset.height);
      const row = rows.find((r) => r.height === height);
      if (row) {
        pane.innerHTML = renderBanner("info", "fetching payload…");
        void openEvidence(gateway, state.patientId, row).then((result) =>
          showEvidence(result, pane),
        );
      }
    }
  });

  const uploadForm = mustFind<HTMLFormElement>("upload-form");
  const fileInput = mustFind<HTMLInputElement>("payload");
  const noteInput = mustFind<HTMLInputElement>("note");
  uploadForm.addEventListener("submit", (event) => {
    event.preventDefault();
    if (state.state !== "trajectory") {
      pane.innerHTML = renderBanner("warn", "look a patient up before adding evidence");
      return;
    }
    const file = fileInput.files?.[0];
    if (!file) return;
    const patientId = state.patientId;
    void (async () => {
      try {
        const bytes = new Uint8Array(await file.arrayBuffer());
        await uploadEvidence(store, gateway, {
          patientId,
          bytes,
          mediaHint: file.type || "application/octet-stream",
          note: noteInput.value,
        });
        uploadForm.reset();
        await lookup(patientId);
      } catch (err) {
        pane.innerHTML = renderBanner("danger", `upload failed: ${String(err)}`);
      }
    })();
  });
}

void boot();
