/**
 * Long-running worker loop: handshake on stdout, then one response line per
 * request line on stdin. Every protocol violation is answered with an
 * error line; the worker never exits silently mid-conversation.
 */

import { mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import path from "node:path";
import readline from "node:readline";

import { writeCstf } from "./cstf.js";
import { synthesizeMasks, type DecodeMode } from "./decode.js";
import { handshakeLine, parseRequestLine, type DecodeResponse } from "./protocol.js";

export interface ServeConfig {
  mode: DecodeMode;
  /** reserved for a checkpoint-backed mode; unused by echo/raster */
  checkpoint?: string;
  echoValue: number;
}

export async function serve(config: ServeConfig): Promise<number> {
  const out = (obj: unknown) => process.stdout.write(`${JSON.stringify(obj)}\n`);
  process.stdout.write(`${handshakeLine()}\n`);
  const workdir = mkdtempSync(path.join(tmpdir(), "cyclesam-adapter-"));
  let count = 0;

  const rl = readline.createInterface({ input: process.stdin, crlfDelay: Infinity });
  for await (const line of rl) {
    if (!line.trim()) continue;
    const parsed = parseRequestLine(line);
    if (!parsed.ok) {
      out(parsed.response satisfies DecodeResponse);
      continue;
    }
    const request = parsed.request;
    count += 1;
    try {
      const masks = synthesizeMasks(config.mode, request.prompts, config.echoValue);
      const maskPath = path.join(workdir, `masks_${count}.cstf`);
      await writeCstf(maskPath, masks);
      out({ id: request.id, masks: maskPath } satisfies DecodeResponse);
    } catch (err) {
      out({ id: request.id, error: String(err) } satisfies DecodeResponse);
    }
  }
  return 0;
}
