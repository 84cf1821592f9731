/** Typed client for the segmentation session service. */

import { base64ToBytes, bytesToBase64, decodePgm, Pgm, toBinaryMask } from "./pgm.js";

export interface MaskPayload {
  pgm_base64: string;
  extents: number[];
}

export interface SessionCreated {
  session_id: string;
  round: number;
  mask: MaskPayload;
}

export interface RefineResult {
  no_op: boolean;
  round: number;
  mask?: MaskPayload;
}

export interface ScribbleItem {
  pixel: [number, number];
  label: 0 | 1;
}

export function decodeMaskPayload(payload: MaskPayload): { mask: Uint8Array; pgm: Pgm } {
  const pgm = decodePgm(base64ToBytes(payload.pgm_base64));
  return { mask: toBinaryMask(pgm), pgm };
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class SessionApi {
  constructor(
    private baseUrl: string = "",
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<any> {
    const res = await this.fetchImpl(this.baseUrl + path, init);
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const body = await res.json();
        detail = typeof body.detail === "string" ? body.detail : JSON.stringify(body.detail);
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(res.status, detail);
    }
    return res.json();
  }

  private post(path: string, body: unknown): Promise<any> {
    return this.request(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  createSession(imagePgm: Uint8Array): Promise<SessionCreated> {
    return this.post("/sessions", { image: { pgm_base64: bytesToBase64(imagePgm) } });
  }

  getSession(sessionId: string): Promise<any> {
    return this.request(`/sessions/${sessionId}`);
  }

  submitScribbles(sessionId: string, items: ScribbleItem[]): Promise<{ accepted: number }> {
    return this.post(`/sessions/${sessionId}/scribbles`, { scribbles: items });
  }

  refine(sessionId: string): Promise<RefineResult> {
    return this.post(`/sessions/${sessionId}/refine`, {});
  }

  evalDice(sessionId: string, gtPgm: Uint8Array): Promise<{ dice: number }> {
    return this.post(`/sessions/${sessionId}/eval`, {
      mask_pgm_base64: bytesToBase64(gtPgm),
    });
  }
}

/** Dice is displayed with exactly four decimals, matching the report format. */
export function formatDice(value: number): string {
  return value.toFixed(4);
}
