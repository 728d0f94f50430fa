/** Backend error envelope handling.
 *
 * Every backend service reports failures as
 * `{"error": {"code": "...", "message": "..."}}`. The console keeps the
 * code so screens can distinguish "patient does not exist" from
 * "ledger temporarily unavailable" from "store unreachable".
 */

export class BackendError extends Error {
  readonly code: string;
  readonly status: number;

  constructor(code: string, message: string, status: number) {
    super(message);
    this.name = "BackendError";
    this.code = code;
    this.status = status;
  }
}

/** Raised when fetched bytes do not match their recorded digest. */
export class TamperError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "TamperError";
  }
}

export const CODE_NOT_FOUND = "not_found";
export const CODE_UNAVAILABLE = "unavailable";
export const CODE_TRANSPORT = "transport";
export const CODE_INTEGRITY = "integrity";
export const CODE_UNAUTHENTICATED = "unauthenticated";

/** Build the typed error for a non-2xx backend response. */
export async function errorFromResponse(response: Response): Promise<BackendError> {
  let code = "error";
  let message = `${response.status} ${response.statusText}`.trim();
  try {
    const doc = await response.json();
    if (doc && typeof doc === "object" && doc.error) {
      code = String(doc.error.code ?? code);
      message = String(doc.error.message ?? message);
    }
  } catch {
    // Not a JSON envelope; keep the HTTP status line as the message.
  }
  return new BackendError(code, message, response.status);
}

/** Wrap a network-level failure (service down, DNS, CORS) uniformly. */
export function transportError(cause: unknown): BackendError {
  const message = cause instanceof Error ? cause.message : String(cause);
  return new BackendError(CODE_TRANSPORT, `service unreachable: ${message}`, 0);
}
