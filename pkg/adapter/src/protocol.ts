/**
 * Wire protocol shared with the matcher's decoder bridge: one handshake
 * line on start, then one JSON response line per request line. Mask
 * tensors travel out-of-band as CSTF-1 files named in the response.
 */

import { z } from "zod";

export const PROTOCOL_NAME = "cyclesam-decode";
export const PROTOCOL_VERSION = 1;
export const CANDIDATES = 3;

export const promptPointSchema = z.object({
  x: z.number().int(),
  y: z.number().int(),
  score: z.number(),
});

export const promptSetSchema = z.object({
  class: z.number().int().min(1),
  image_size: z.tuple([z.number().int().min(1), z.number().int().min(1)]),
  positives: z.array(promptPointSchema),
  negatives: z.array(promptPointSchema),
});

export const requestSchema = z.object({
  id: z.number().int(),
  image: z.string(),
  prompts: promptSetSchema,
});

export type PromptSet = z.infer<typeof promptSetSchema>;
export type DecodeRequest = z.infer<typeof requestSchema>;

export interface DecodeResponse {
  id: number;
  masks?: string;
  error?: string;
}

export function handshakeLine(): string {
  return JSON.stringify({ protocol: PROTOCOL_NAME, version: PROTOCOL_VERSION });
}

export type ParsedLine =
  | { ok: true; request: DecodeRequest }
  | { ok: false; response: DecodeResponse };

/** Parse one request line; returns an error response instead of throwing. */
export function parseRequestLine(line: string): ParsedLine {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch (err) {
    return { ok: false, response: { id: -1, error: `request line is not JSON: ${String(err)}` } };
  }
  const parsed = requestSchema.safeParse(raw);
  if (!parsed.success) {
    const id =
      typeof raw === "object" && raw !== null && typeof (raw as { id?: unknown }).id === "number"
        ? ((raw as { id: number }).id)
        : -1;
    return { ok: false, response: { id, error: `malformed request: ${parsed.error.message}` } };
  }
  const { prompts } = parsed.data;
  const [w, h] = prompts.image_size;
  for (const p of [...prompts.positives, ...prompts.negatives]) {
    if (p.x < 0 || p.x >= w || p.y < 0 || p.y >= h) {
      return {
        ok: false,
        response: { id: parsed.data.id, error: `prompt (${p.x}, ${p.y}) outside ${w}x${h}` },
      };
    }
  }
  return { ok: true, request: parsed.data };
}
